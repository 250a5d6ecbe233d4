#pragma once

#include "fedcausal/estimators.hpp"
#include "fedcausal/federation.hpp"
#include "fedcausal/nuisance.hpp"

#include <json.hpp>

namespace fedcausal {

using Json = nlohmann::json;

Json to_json(const Vector& v);
Json to_json(const Matrix& m);
Vector vector_from_json(const Json& j);
Matrix matrix_from_json(const Json& j);

Json to_json(const FeatureMap& f);
Json to_json(const LogisticParams& p);
Json to_json(const GaussianMoments& m);
Json to_json(const MembershipParams& p);
Json to_json(const GlobalPropensity& gp);
Json to_json(const OutcomeModel& m);
Json to_json(const LedgerTotals& t);
Json to_json(const EstimateReport& r);

FeatureMap feature_map_from_json(const Json& j);
LogisticParams logistic_params_from_json(const Json& j);
GaussianMoments gaussian_moments_from_json(const Json& j);
MembershipParams membership_params_from_json(const Json& j);
GlobalPropensity global_propensity_from_json(const Json& j);
OutcomeModel outcome_model_from_json(const Json& j);

}  // namespace fedcausal

#pragma once

#include "fedcausal/core_data.hpp"
#include "fedcausal/dgp.hpp"

#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace fedcausal {

// ---------------------------------------------------------------------------
// Feature maps

/// z = ((x - shift) ./ scale, [1]). An empty shift/scale means identity, so
/// the default map passes covariates through untouched.
struct FeatureMap {
  Vector shift;
  Vector scale;
  bool intercept = false;

  Eigen::Index output_dim(Eigen::Index input_dim) const { return input_dim + (intercept ? 1 : 0); }
  Covariates apply(const Covariates& x) const;
  Vector apply(const ConstVectorRef& x) const;
};

// ---------------------------------------------------------------------------
// Local propensity models

enum class Degenerate { Normal, AllControl, AllTreated };

std::string to_string(Degenerate d);

struct FitDiagnostics {
  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool gradient_descent_fallback = false;
};

struct LogisticParams {
  Vector beta;
  double intercept = 0.0;
  bool has_intercept = false;
  Degenerate degenerate = Degenerate::Normal;
  FitDiagnostics diagnostics;
};

struct LogisticFitOptions {
  bool intercept = true;
  double tolerance = 1e-8;
  int max_iterations = 100;
};

/// Maximum-likelihood logistic regression of w on x by Newton/IRLS with step
/// halving; a failed Hessian factorization switches the remaining iterations
/// to gradient ascent. Single-arm sites are flagged degenerate, not fitted.
LogisticParams fit_logistic_local(const SiteDataset& site, const LogisticFitOptions& opts = {});

double predict_local(const LogisticParams& params, const ConstVectorRef& x);
Vector predict_local(const LogisticParams& params, const Covariates& x);
inline double predict_local(const LogisticParams& params, const Vector& x) {
  return predict_local(params, ConstVectorRef(x));
}

/// Mean log-likelihood (1/n) sum [w log p + (1-w) log(1-p)] and its gradient
/// with respect to (beta, intercept). Exposed for diagnostics and tests.
double logistic_mean_log_likelihood(const Covariates& x, const IntVector& w, const LogisticParams& p);
Vector logistic_mean_gradient(const Covariates& x, const IntVector& w, const LogisticParams& p);

// ---------------------------------------------------------------------------
// Gaussian moments and density ratio weights

struct GaussianMoments {
  Vector mean;
  Matrix covariance;
  Eigen::Index count = 0;
};

/// Mean and 1/n covariance of a site, plus ridge * I. Without an explicit
/// ridge, 1e-8 * trace / d is added.
GaussianMoments fit_gaussian_moments(const SiteDataset& site, std::optional<double> ridge = std::nullopt);

/// Multivariate normal pdf with a cached Cholesky factor.
class GaussianDensity {
 public:
  explicit GaussianDensity(const GaussianMoments& m);

  double log_pdf(const ConstVectorRef& x) const;
  Vector log_pdf(const Covariates& x) const;
  double log_pdf(const Vector& x) const { return log_pdf(ConstVectorRef(x)); }

 private:
  Vector mean_;
  Matrix lower_;
  double log_norm_ = 0.0;
};

double gaussian_density(const GaussianMoments& m, const ConstVectorRef& x);

/// w_k(x) = rho_k f_k(x) / sum_j rho_j f_j(x). Throws AllDensitiesZero if every
/// rho_k f_k(x) underflows to zero.
Vector density_ratio_weights(const std::vector<GaussianMoments>& moments, const Vector& proportions,
                             const ConstVectorRef& x);
/// One row of weights per covariate row.
Matrix density_ratio_weights(const std::vector<GaussianMoments>& moments, const Vector& proportions,
                             const Covariates& x);
inline Vector density_ratio_weights(const std::vector<GaussianMoments>& moments, const Vector& proportions,
                                    const Vector& x) {
  return density_ratio_weights(moments, proportions, ConstVectorRef(x));
}

// ---------------------------------------------------------------------------
// Membership weights

struct MembershipParams {
  /// (feature dim) x K coefficient matrix.
  Matrix theta;
  FeatureMap features;

  Eigen::Index num_sites() const noexcept { return theta.cols(); }
};

/// In-place, max-subtracted softmax of each row.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

Vector membership_weights(const MembershipParams& params, const ConstVectorRef& x);
Matrix membership_weights(const MembershipParams& params, const Covariates& x);
inline Vector membership_weights(const MembershipParams& params, const Vector& x) {
  return membership_weights(params, ConstVectorRef(x));
}

// ---------------------------------------------------------------------------
// Global propensity

enum class WeightScheme { MW, DW };

std::string to_string(WeightScheme s);

struct DensityRatioModel {
  std::vector<GaussianMoments> moments;
  Vector proportions;
};

struct GlobalPropensity {
  std::vector<LogisticParams> local;
  std::variant<MembershipParams, DensityRatioModel> weights;
  /// Scores are clipped to [clip, 1 - clip] when clip > 0.
  double clip = 0.0;

  WeightScheme scheme() const noexcept {
    return std::holds_alternative<MembershipParams>(weights) ? WeightScheme::MW : WeightScheme::DW;
  }
  std::size_t num_sites() const noexcept { return local.size(); }
};

/// e(x) = sum_k w_k(x) e_k(x), then clipped.
double global_propensity(const GlobalPropensity& gp, const ConstVectorRef& x);
Vector global_propensity(const GlobalPropensity& gp, const Covariates& x);
inline double global_propensity(const GlobalPropensity& gp, const Vector& x) {
  return global_propensity(gp, ConstVectorRef(x));
}

/// Weight matrix (rows x K) of the scheme held by gp.
Matrix federation_weights(const GlobalPropensity& gp, const Covariates& x);
/// Local scores (rows x K).
Matrix local_scores(const std::vector<LogisticParams>& local, const Covariates& x);

// ---------------------------------------------------------------------------
// Oracle nuisances of the synthetic scenarios

/// Local models that reproduce the generating propensities exactly.
std::vector<LogisticParams> oracle_local_models(const std::vector<Vector>& gammas, OverlapRegime regime,
                                                std::size_t control_only_site);

/// DGP A: density ratio weights with the generating moments and design
/// proportions; these are also the true membership probabilities.
GlobalPropensity oracle_global_propensity(const DgpAParams& p);
/// DGP B: membership weights with the generating softmax coefficients.
GlobalPropensity oracle_global_propensity(const DgpBParams& p);

}  // namespace fedcausal

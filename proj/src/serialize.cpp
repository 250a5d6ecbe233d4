#include "fedcausal/serialize.hpp"

#include <cmath>

namespace fedcausal {

namespace {

// JSON has no infinity; overlap sentinels are written as strings.
Json real(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const Json::exception& e) {
    fail(ErrorCode::IoError, std::string("malformed ") + what + ": " + e.what());
  }
}

}  // namespace

Json to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_json(Vector(m.row(i).transpose())));
  return rows;
}

Vector vector_from_json(const Json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

Matrix matrix_from_json(const Json& j) {
  if (!j.is_array()) fail(ErrorCode::IoError, "matrix must be an array of rows");
  if (j.empty()) return Matrix();
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Vector r = vector_from_json(j[static_cast<std::size_t>(i)]);
    if (r.size() != cols) fail(ErrorCode::DimensionMismatch, "ragged matrix rows");
    m.row(i) = r.transpose();
  }
  return m;
}

Json to_json(const FeatureMap& f) {
  return {{"shift", to_json(f.shift)}, {"scale", to_json(f.scale)}, {"intercept", f.intercept}};
}

Json to_json(const LogisticParams& p) {
  return {{"beta", to_json(p.beta)},
          {"intercept", p.intercept},
          {"has_intercept", p.has_intercept},
          {"degenerate", to_string(p.degenerate)},
          {"diagnostics",
           {{"converged", p.diagnostics.converged},
            {"iterations", p.diagnostics.iterations},
            {"gradient_norm", real(p.diagnostics.gradient_norm)},
            {"gradient_descent_fallback", p.diagnostics.gradient_descent_fallback}}}};
}

Json to_json(const GaussianMoments& m) {
  return {{"mean", to_json(m.mean)}, {"covariance", to_json(m.covariance)}, {"count", m.count}};
}

Json to_json(const MembershipParams& p) { return {{"theta", to_json(p.theta)}, {"features", to_json(p.features)}}; }

Json to_json(const GlobalPropensity& gp) {
  Json j;
  j["scheme"] = to_string(gp.scheme());
  j["clip"] = gp.clip;
  j["local"] = Json::array();
  for (const auto& l : gp.local) j["local"].push_back(to_json(l));
  if (const auto* mw = std::get_if<MembershipParams>(&gp.weights)) {
    j["membership"] = to_json(*mw);
  } else {
    const auto& dw = std::get<DensityRatioModel>(gp.weights);
    j["proportions"] = to_json(dw.proportions);
    j["moments"] = Json::array();
    for (const auto& m : dw.moments) j["moments"].push_back(to_json(m));
  }
  return j;
}

Json to_json(const OutcomeModel& m) {
  return {{"kind", to_string(m.kind)}, {"coef", to_json(m.coef)}, {"features", to_json(m.features)}};
}

Json to_json(const LedgerTotals& t) {
  return {{"upload_floats", t.upload_floats},
          {"broadcast_floats", t.broadcast_floats},
          {"upload_counts", t.upload_counts},
          {"diagnostic_floats", t.diagnostic_floats}};
}

Json to_json(const EstimateReport& r) {
  Json j;
  j["estimator"] = r.estimator;
  j["form"] = to_string(r.form);
  j["scheme"] = r.scheme;
  j["tau_hat"] = real(r.tau_hat);
  j["var_plugin"] = real(r.var_plugin);
  if (r.ci) {
    j["ci"] = {{"lo", r.ci->lo},
               {"hi", r.ci->hi},
               {"level", r.ci->level},
               {"resamples", r.ci->resamples},
               {"failed", r.ci->failed}};
  } else {
    j["ci"] = nullptr;
  }
  j["o_global"] = real(r.o_global);
  j["o_local"] = Json::array();
  for (double o : r.o_local) j["o_local"].push_back(real(o));
  j["site_tau"] = r.site_tau;
  j["site_term_variance"] = r.site_term_variance;
  j["communication"] = to_json(r.communication);
  j["notes"] = r.notes;
  return j;
}

FeatureMap feature_map_from_json(const Json& j) {
  return guarded("feature map", [&] {
    FeatureMap f;
    f.shift = vector_from_json(j.at("shift"));
    f.scale = vector_from_json(j.at("scale"));
    f.intercept = j.at("intercept").get<bool>();
    if (f.shift.size() != f.scale.size()) fail(ErrorCode::DimensionMismatch, "shift and scale differ in length");
    return f;
  });
}

LogisticParams logistic_params_from_json(const Json& j) {
  return guarded("logistic model", [&] {
    LogisticParams p;
    p.beta = vector_from_json(j.at("beta"));
    p.intercept = j.at("intercept").get<double>();
    p.has_intercept = j.at("has_intercept").get<bool>();
    const auto deg = j.at("degenerate").get<std::string>();
    if (deg == to_string(Degenerate::Normal)) p.degenerate = Degenerate::Normal;
    else if (deg == to_string(Degenerate::AllControl)) p.degenerate = Degenerate::AllControl;
    else if (deg == to_string(Degenerate::AllTreated)) p.degenerate = Degenerate::AllTreated;
    else fail(ErrorCode::IoError, "unknown degenerate flag '" + deg + "'");
    if (j.contains("diagnostics")) {
      const auto& d = j["diagnostics"];
      p.diagnostics.converged = d.value("converged", false);
      p.diagnostics.iterations = d.value("iterations", 0);
      if (d.contains("gradient_norm") && d["gradient_norm"].is_number())
        p.diagnostics.gradient_norm = d["gradient_norm"].get<double>();
      p.diagnostics.gradient_descent_fallback = d.value("gradient_descent_fallback", false);
    }
    return p;
  });
}

GaussianMoments gaussian_moments_from_json(const Json& j) {
  return guarded("moments", [&] {
    GaussianMoments m;
    m.mean = vector_from_json(j.at("mean"));
    m.covariance = matrix_from_json(j.at("covariance"));
    m.count = j.at("count").get<Eigen::Index>();
    return m;
  });
}

MembershipParams membership_params_from_json(const Json& j) {
  return guarded("membership model", [&] {
    return MembershipParams{matrix_from_json(j.at("theta")), feature_map_from_json(j.at("features"))};
  });
}

GlobalPropensity global_propensity_from_json(const Json& j) {
  return guarded("global propensity", [&] {
    GlobalPropensity gp;
    gp.clip = j.value("clip", 0.0);
    for (const auto& l : j.at("local")) gp.local.push_back(logistic_params_from_json(l));
    const auto scheme = j.at("scheme").get<std::string>();
    if (scheme == "MW") {
      gp.weights = membership_params_from_json(j.at("membership"));
    } else if (scheme == "DW") {
      DensityRatioModel dw;
      dw.proportions = vector_from_json(j.at("proportions"));
      for (const auto& m : j.at("moments")) dw.moments.push_back(gaussian_moments_from_json(m));
      gp.weights = std::move(dw);
    } else {
      fail(ErrorCode::IoError, "unknown weight scheme '" + scheme + "'");
    }
    return gp;
  });
}

OutcomeModel outcome_model_from_json(const Json& j) {
  return guarded("outcome model", [&] {
    OutcomeModel m;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == to_string(OutcomeKind::Linear)) m.kind = OutcomeKind::Linear;
    else if (kind == to_string(OutcomeKind::Logistic)) m.kind = OutcomeKind::Logistic;
    else fail(ErrorCode::IoError, "unknown outcome kind '" + kind + "'");
    m.coef = vector_from_json(j.at("coef"));
    m.features = feature_map_from_json(j.at("features"));
    return m;
  });
}

}  // namespace fedcausal

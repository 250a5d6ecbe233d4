#include "fedcausal/experiments.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace fedcausal {

std::string to_string(DgpKind k) { return k == DgpKind::A ? "A" : "B"; }
std::string to_string(NuisanceMode m) { return m == NuisanceMode::Oracle ? "oracle" : "estimated"; }
std::string to_string(OutcomeMode m) { return m == OutcomeMode::Oracle ? "oracle" : "linear"; }

const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> names = {
      "Fed-IPW-MW",  "Fed-IPW-DW",   "Fed-AIPW-MW",           "Fed-AIPW-DW",
      "Meta-SW-IPW", "Meta-SW-AIPW", "Centralized-Oracle-IPW", "Centralized-Oracle-AIPW"};
  return names;
}

std::size_t ScenarioConfig::num_sites() const {
  return dgp == DgpKind::A ? dgp_a.num_sites() : dgp_b.num_sites();
}

Eigen::Index ScenarioConfig::dim() const { return dgp == DgpKind::A ? dgp_a.dim() : dgp_b.dim(); }

void apply_regime(ScenarioConfig& cfg) {
  std::vector<Vector> gammas = {cfg.gamma_1, cfg.regime == OverlapRegime::Poor ? cfg.gamma_2_weak : cfg.gamma_2_good,
                                cfg.gamma_3};
  cfg.dgp_a.gammas = gammas;
  cfg.dgp_b.gammas = gammas;
  cfg.dgp_a.regime = cfg.regime;
  cfg.dgp_b.regime = cfg.regime;
}

namespace {

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorCode::ConfigError, msg); }

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) config_error(where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) config_error("unknown key '" + key + "' in " + where);
}

/// Scalar c or an explicit list.
Vector read_vector(const Json& j, Eigen::Index d, const std::string& key) {
  if (j.is_number()) return Vector::Constant(d, j.get<double>());
  if (!j.is_array()) config_error(key + " must be a number or a list");
  Vector v = vector_from_json(j);
  if (v.size() != d) config_error(key + " must have " + std::to_string(d) + " entries");
  return v;
}

/// {"I": a, "J": b} for a I + b J, or an explicit matrix.
Matrix read_covariance(const Json& j, Eigen::Index d, const std::string& key) {
  if (j.is_object()) {
    check_keys(j, {"I", "J"}, key);
    return identity_plus_ones(d, j.value("I", 0.0), j.value("J", 0.0));
  }
  Matrix m = matrix_from_json(j);
  if (m.rows() != d || m.cols() != d) config_error(key + " must be " + std::to_string(d) + "x" + std::to_string(d));
  return m;
}

FedAvgConfig read_fedavg(const Json& j, FedAvgConfig cfg, const std::string& where) {
  check_keys(j, {"T", "E", "eta", "B", "divergence_tolerance", "divergence_patience"}, where);
  cfg.rounds = j.value("T", cfg.rounds);
  cfg.local_steps = j.value("E", cfg.local_steps);
  cfg.learning_rate = j.value("eta", cfg.learning_rate);
  cfg.batch_size = j.value("B", cfg.batch_size);
  cfg.divergence_tolerance = j.value("divergence_tolerance", cfg.divergence_tolerance);
  cfg.divergence_patience = j.value("divergence_patience", cfg.divergence_patience);
  return cfg;
}

Json fedavg_json(const FedAvgConfig& c) {
  return {{"T", c.rounds},
          {"E", c.local_steps},
          {"eta", c.learning_rate},
          {"B", c.batch_size},
          {"divergence_tolerance", c.divergence_tolerance},
          {"divergence_patience", c.divergence_patience}};
}

Json covariance_json(const Matrix& m) {
  // Written back as {"I", "J"} when the matrix has that shape.
  const Eigen::Index d = m.rows();
  if (d >= 2) {
    const double b = m(0, 1);
    const double a = m(0, 0) - b;
    if (m.isApprox(identity_plus_ones(d, a, b), 0.0)) return {{"I", a}, {"J", b}};
  }
  return to_json(m);
}

}  // namespace

ScenarioConfig parse_config(const Json& j) {
  check_keys(j, {"name", "dgp", "overlap_regime", "common", "dgp_a", "dgp_b", "estimators", "nuisance",
                 "outcome_model", "fedavg", "outcome_fedavg", "local_intercept", "clip", "ridge", "bootstrap_B",
                 "bootstrap_level", "replications", "seed", "true_ate_draws", "max_attempts", "output_dir"},
             "config");
  ScenarioConfig cfg;
  try {
    cfg.name = j.value("name", cfg.name);
    if (j.contains("dgp")) {
      const auto d = j["dgp"].get<std::string>();
      if (d == "A" || d == "a") cfg.dgp = DgpKind::A;
      else if (d == "B" || d == "b") cfg.dgp = DgpKind::B;
      else config_error("dgp must be A or B");
    }
    if (j.contains("overlap_regime")) cfg.regime = parse_overlap_regime(j["overlap_regime"].get<std::string>());

    constexpr Eigen::Index d = 10;
    if (j.contains("common")) {
      const auto& c = j["common"];
      check_keys(c, {"gamma_1", "gamma_2_weak", "gamma_2_good", "gamma_3", "noise_sd"}, "common");
      if (c.contains("gamma_1")) cfg.gamma_1 = read_vector(c["gamma_1"], d, "gamma_1");
      if (c.contains("gamma_2_weak")) cfg.gamma_2_weak = read_vector(c["gamma_2_weak"], d, "gamma_2_weak");
      if (c.contains("gamma_2_good")) cfg.gamma_2_good = read_vector(c["gamma_2_good"], d, "gamma_2_good");
      if (c.contains("gamma_3")) cfg.gamma_3 = read_vector(c["gamma_3"], d, "gamma_3");
      cfg.noise_sd = c.value("noise_sd", cfg.noise_sd);
    }
    if (j.contains("dgp_a")) {
      const auto& a = j["dgp_a"];
      check_keys(a, {"n_k", "mu_1", "mu_2", "mu_3", "Sigma_1", "Sigma_2", "Sigma_3"}, "dgp_a");
      if (a.contains("n_k")) {
        if (a["n_k"].is_number()) {
          cfg.dgp_a.sizes.assign(3, a["n_k"].get<Eigen::Index>());
        } else {
          cfg.dgp_a.sizes = a["n_k"].get<std::vector<Eigen::Index>>();
          if (cfg.dgp_a.sizes.size() != 3) config_error("dgp_a.n_k must list 3 sizes");
        }
      }
      for (int k = 0; k < 3; ++k) {
        const auto mu = "mu_" + std::to_string(k + 1), sigma = "Sigma_" + std::to_string(k + 1);
        if (a.contains(mu)) cfg.dgp_a.means[static_cast<std::size_t>(k)] = read_vector(a[mu], d, mu);
        if (a.contains(sigma))
          cfg.dgp_a.covariances[static_cast<std::size_t>(k)] = read_covariance(a[sigma], d, sigma);
      }
    }
    if (j.contains("dgp_b")) {
      const auto& b = j["dgp_b"];
      check_keys(b, {"n", "mixture_weights", "mu_1", "mu_2", "Sigma_1", "Sigma_2", "theta_1", "theta_2", "theta_3"},
                 "dgp_b");
      cfg.dgp_b.n = b.value("n", cfg.dgp_b.n);
      if (b.contains("mixture_weights")) cfg.dgp_b.mixture_weights = read_vector(b["mixture_weights"], 2, "mixture_weights");
      for (int c = 0; c < 2; ++c) {
        const auto mu = "mu_" + std::to_string(c + 1), sigma = "Sigma_" + std::to_string(c + 1);
        if (b.contains(mu)) cfg.dgp_b.component_means[static_cast<std::size_t>(c)] = read_vector(b[mu], d, mu);
        if (b.contains(sigma))
          cfg.dgp_b.component_covariances[static_cast<std::size_t>(c)] = read_covariance(b[sigma], d, sigma);
      }
      for (int k = 0; k < 3; ++k) {
        const auto key = "theta_" + std::to_string(k + 1);
        if (b.contains(key)) cfg.dgp_b.theta.col(k) = read_vector(b[key], d, key);
      }
    }
    if (j.contains("estimators")) cfg.estimators = j["estimators"].get<std::vector<std::string>>();
    if (j.contains("nuisance")) {
      const auto m = j["nuisance"].get<std::string>();
      if (m == "oracle") cfg.nuisance = NuisanceMode::Oracle;
      else if (m == "estimated") cfg.nuisance = NuisanceMode::Estimated;
      else config_error("nuisance must be oracle or estimated");
    }
    if (j.contains("outcome_model")) {
      const auto m = j["outcome_model"].get<std::string>();
      if (m == "oracle") cfg.outcome_model = OutcomeMode::Oracle;
      else if (m == "linear") cfg.outcome_model = OutcomeMode::Linear;
      else config_error("outcome_model must be oracle or linear");
    }
    if (j.contains("fedavg")) cfg.fedavg = read_fedavg(j["fedavg"], cfg.fedavg, "fedavg");
    if (j.contains("outcome_fedavg"))
      cfg.outcome_fedavg = read_fedavg(j["outcome_fedavg"], cfg.outcome_fedavg, "outcome_fedavg");
    cfg.local_intercept = j.value("local_intercept", cfg.local_intercept);
    cfg.clip = j.value("clip", cfg.clip);
    if (j.contains("ridge") && !j["ridge"].is_null()) cfg.ridge = j["ridge"].get<double>();
    cfg.bootstrap_b = j.value("bootstrap_B", cfg.bootstrap_b);
    cfg.bootstrap_level = j.value("bootstrap_level", cfg.bootstrap_level);
    cfg.replications = j.value("replications", cfg.replications);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.true_ate_draws = j.value("true_ate_draws", cfg.true_ate_draws);
    cfg.max_attempts = j.value("max_attempts", cfg.max_attempts);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
  } catch (const Json::exception& e) {
    config_error(std::string("malformed config value: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    config_error(e.what());
  }
  apply_regime(cfg);
  check_config(cfg);
  return cfg;
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ConfigError, "cannot open config '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    fail(ErrorCode::ConfigError, "cannot parse '" + path + "': " + e.what());
  }
  return parse_config(j);
}

Json config_to_json(const ScenarioConfig& cfg) {
  Json j;
  j["name"] = cfg.name;
  j["dgp"] = to_string(cfg.dgp);
  j["overlap_regime"] = to_string(cfg.regime);
  j["common"] = {{"gamma_1", to_json(cfg.gamma_1)},
                 {"gamma_2_weak", to_json(cfg.gamma_2_weak)},
                 {"gamma_2_good", to_json(cfg.gamma_2_good)},
                 {"gamma_3", to_json(cfg.gamma_3)},
                 {"noise_sd", cfg.noise_sd}};
  Json a;
  a["n_k"] = cfg.dgp_a.sizes;
  for (std::size_t k = 0; k < cfg.dgp_a.num_sites(); ++k) {
    a["mu_" + std::to_string(k + 1)] = to_json(cfg.dgp_a.means[k]);
    a["Sigma_" + std::to_string(k + 1)] = covariance_json(cfg.dgp_a.covariances[k]);
  }
  j["dgp_a"] = a;
  Json b;
  b["n"] = cfg.dgp_b.n;
  b["mixture_weights"] = to_json(cfg.dgp_b.mixture_weights);
  for (std::size_t c = 0; c < cfg.dgp_b.component_means.size(); ++c) {
    b["mu_" + std::to_string(c + 1)] = to_json(cfg.dgp_b.component_means[c]);
    b["Sigma_" + std::to_string(c + 1)] = covariance_json(cfg.dgp_b.component_covariances[c]);
  }
  for (Eigen::Index k = 0; k < cfg.dgp_b.theta.cols(); ++k)
    b["theta_" + std::to_string(k + 1)] = to_json(Vector(cfg.dgp_b.theta.col(k)));
  j["dgp_b"] = b;
  j["estimators"] = cfg.estimators;
  j["nuisance"] = to_string(cfg.nuisance);
  j["outcome_model"] = to_string(cfg.outcome_model);
  j["fedavg"] = fedavg_json(cfg.fedavg);
  j["outcome_fedavg"] = fedavg_json(cfg.outcome_fedavg);
  j["local_intercept"] = cfg.local_intercept;
  j["clip"] = cfg.clip;
  j["ridge"] = cfg.ridge ? Json(*cfg.ridge) : Json(nullptr);
  j["bootstrap_B"] = cfg.bootstrap_b;
  j["bootstrap_level"] = cfg.bootstrap_level;
  j["replications"] = cfg.replications;
  j["seed"] = cfg.seed;
  j["true_ate_draws"] = cfg.true_ate_draws;
  j["max_attempts"] = cfg.max_attempts;
  j["output_dir"] = cfg.output_dir;
  return j;
}

void check_config(const ScenarioConfig& cfg) {
  if (cfg.replications < 1) config_error("replications must be >= 1");
  if (cfg.estimators.empty()) config_error("estimator list is empty");
  const auto& known = known_estimators();
  for (const auto& e : cfg.estimators)
    if (std::find(known.begin(), known.end(), e) == known.end()) config_error("unknown estimator '" + e + "'");
  if (cfg.bootstrap_b != 0 && cfg.bootstrap_b < 2) config_error("bootstrap_B must be 0 or >= 2");
  if (!(cfg.bootstrap_level > 0.0 && cfg.bootstrap_level < 1.0)) config_error("bootstrap_level must lie in (0, 1)");
  if (!(cfg.clip >= 0.0 && cfg.clip < 0.5)) config_error("clip must lie in [0, 0.5)");
  if (cfg.ridge && *cfg.ridge < 0.0) config_error("ridge must be nonnegative");
  if (!(cfg.noise_sd >= 0.0)) config_error("noise_sd must be nonnegative");
  if (cfg.true_ate_draws < 10'000) config_error("true_ate_draws must be >= 10000");
  if (cfg.max_attempts < 1) config_error("max_attempts must be >= 1");
  if (cfg.name.empty() || cfg.name.find('/') != std::string::npos) config_error("name must be a plain file name");
  try {
    check_config(cfg.fedavg);
    check_config(cfg.outcome_fedavg);
    check_params(cfg.dgp_a);
    check_params(cfg.dgp_b);
    for (std::size_t k = 0; k < cfg.dgp_a.num_sites(); ++k)
      MultivariateNormal(cfg.dgp_a.means[k], cfg.dgp_a.covariances[k]);
    for (std::size_t c = 0; c < cfg.dgp_b.component_means.size(); ++c)
      MultivariateNormal(cfg.dgp_b.component_means[c], cfg.dgp_b.component_covariances[c]);
  } catch (const Error& e) {
    config_error(e.what());
  }
}

ScenarioConfig panel_config(const ScenarioConfig& base, DgpKind dgp, OverlapRegime regime) {
  ScenarioConfig cfg = base;
  cfg.dgp = dgp;
  cfg.regime = regime;
  cfg.name = "dgp_" + std::string(dgp == DgpKind::A ? "a" : "b") + "_" + to_string(regime);
  apply_regime(cfg);
  return cfg;
}

std::vector<ScenarioConfig> standard_panels(const ScenarioConfig& base) {
  std::vector<ScenarioConfig> out;
  for (auto dgp : {DgpKind::A, DgpKind::B})
    for (auto regime : {OverlapRegime::None, OverlapRegime::Poor, OverlapRegime::Good})
      out.push_back(panel_config(base, dgp, regime));
  return out;
}

}  // namespace fedcausal

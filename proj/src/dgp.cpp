#include "fedcausal/dgp.hpp"

#include <algorithm>
#include <numeric>

namespace fedcausal {

std::string to_string(OverlapRegime r) {
  switch (r) {
    case OverlapRegime::None: return "none";
    case OverlapRegime::Poor: return "poor";
    case OverlapRegime::Good: return "good";
  }
  return "unknown";
}

OverlapRegime parse_overlap_regime(const std::string& s) {
  if (s == "none" || s == "None") return OverlapRegime::None;
  if (s == "poor" || s == "Poor" || s == "weak") return OverlapRegime::Poor;
  if (s == "good" || s == "Good") return OverlapRegime::Good;
  fail(ErrorCode::ConfigError, "unknown overlap regime '" + s + "'");
}

OutcomeSpec table_outcome_spec(double noise_sd) {
  auto check = [](const ConstVectorRef& x) {
    if (x.size() != 10)
      fail(ErrorCode::DimensionMismatch, "outcome model needs d=10, got " + std::to_string(x.size()));
  };
  OutcomeSpec spec;
  spec.treated_mean = [check](const ConstVectorRef& x) {
    check(x);
    double v = 0.0;
    for (int j = 1; j <= 5; ++j) v += (j / 10.0) * x(j - 1) * x(j - 1);
    for (int j = 6; j <= 10; ++j) v += (j / 10.0) * x(j - 1);
    return v + x(8) * x(9);
  };
  spec.control_mean = [check](const ConstVectorRef& x) {
    check(x);
    double v = 0.0;
    for (int j = 1; j <= 5; ++j) v += ((3.0 * j - 10.0) / 30.0) * x(j - 1) * x(j - 1);
    for (int j = 6; j <= 10; ++j) v += ((3.0 * j - 10.0) / 30.0) * x(j - 1);
    return v + x(0) * x(9);
  };
  spec.noise_sd = noise_sd;
  return spec;
}

MultivariateNormal::MultivariateNormal(Vector mean, const Matrix& cov) : mean_(std::move(mean)) {
  if (cov.rows() != mean_.size() || cov.cols() != mean_.size())
    fail(ErrorCode::DimensionMismatch, "covariance shape does not match mean");
  if (!cov.isApprox(cov.transpose(), 1e-12))
    fail(ErrorCode::NonPositiveDefiniteCovariance, "covariance is not symmetric");
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success)
    fail(ErrorCode::NonPositiveDefiniteCovariance, "Cholesky factorization failed");
  lower_ = llt.matrixL();
}

Covariates MultivariateNormal::sample(Eigen::Index n, RngHandle& rng) const {
  const Eigen::Index d = dim();
  Covariates z(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = rng.normal();
  Covariates x = z * lower_.transpose();
  x.rowwise() += mean_.transpose();
  return x;
}

Matrix identity_plus_ones(Eigen::Index d, double identity_coef, double ones_coef) {
  return identity_coef * Matrix::Identity(d, d) + ones_coef * Matrix::Ones(d, d);
}

std::vector<Vector> table_gammas(OverlapRegime regime) {
  Vector g1(10), g2(10), g3(10);
  g1 << -.25, .25, -.25, -.25, .25, -.25, -.25, .25, -.25, .25;
  g3 << .15, -.15, .15, -.15, .15, -.15, .15, -.15, .15, -.15;
  if (regime == OverlapRegime::Poor)
    g2 << -2.5, -1, -0.15, -0.15, 0, -0.15, -1, -0.15, -0.15, 0;
  else
    g2 << -.05, -.1, -.05, -.1, .05, -.1, -.05, -.1, .05, -.1;
  return {g1, g2, g3};
}

DgpAParams dgp_a_table_params(OverlapRegime regime, Eigen::Index n_per_site) {
  constexpr Eigen::Index d = 10;
  DgpAParams p;
  p.means = {Vector::Constant(d, 1.0), Vector::Constant(d, 1.5), Vector::Constant(d, 3.0)};
  p.covariances = {identity_plus_ones(d, 1.0, 0.5), identity_plus_ones(d, 0.6, 0.4),
                   identity_plus_ones(d, 3.0, 0.3)};
  p.sizes = {n_per_site, n_per_site, n_per_site};
  p.gammas = table_gammas(regime);
  p.regime = regime;
  return p;
}

DgpBParams dgp_b_table_params(OverlapRegime regime, Eigen::Index n) {
  constexpr Eigen::Index d = 10;
  DgpBParams p;
  p.n = n;
  p.mixture_weights = Vector(2);
  p.mixture_weights << 2.0 / 3.0, 1.0 / 3.0;
  p.component_means = {Vector::Zero(d), Vector::Constant(d, 1.5)};
  p.component_covariances = {Matrix::Identity(d, d), identity_plus_ones(d, 1.0, 0.5)};
  p.theta = Matrix(d, 3);
  p.theta.col(0) << -0.5, -0.5, 0.2, -0.5, -0.5, 0.2, -0.5, -0.5, 0.2, 0.2;
  p.theta.col(1) << 0.5, 0.5, 0.2, 0.5, 0.5, 0.2, 0.5, 0.5, 0.2, 0.5;
  p.theta.col(2) << 1, 1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2;
  p.gammas = table_gammas(regime);
  p.regime = regime;
  return p;
}

namespace {

void check_gammas(const std::vector<Vector>& gammas, std::size_t k, Eigen::Index d) {
  if (gammas.size() != k)
    fail(ErrorCode::DimensionMismatch, "need one propensity coefficient vector per site");
  for (const auto& g : gammas)
    if (g.size() != d) fail(ErrorCode::DimensionMismatch, "propensity coefficients have wrong length");
}

}  // namespace

void check_params(const DgpAParams& p) {
  const auto k = p.num_sites();
  if (k == 0) fail(ErrorCode::InvalidArgument, "DGP A needs at least one site");
  if (p.covariances.size() != k || p.sizes.size() != k)
    fail(ErrorCode::DimensionMismatch, "DGP A site parameter lists differ in length");
  for (std::size_t s = 0; s < k; ++s) {
    if (p.means[s].size() != p.dim()) fail(ErrorCode::DimensionMismatch, "site means differ in dimension");
    if (p.sizes[s] < 1) fail(ErrorCode::EmptySite, "site size must be positive");
  }
  check_gammas(p.gammas, k, p.dim());
}

void check_params(const DgpBParams& p) {
  const auto c = static_cast<std::size_t>(p.mixture_weights.size());
  if (c == 0 || p.component_means.size() != c || p.component_covariances.size() != c)
    fail(ErrorCode::DimensionMismatch, "DGP B mixture parameter lists differ in length");
  if ((p.mixture_weights.array() < 0).any() || std::abs(p.mixture_weights.sum() - 1.0) > 1e-12)
    fail(ErrorCode::InvalidArgument, "mixture weights must be a probability vector");
  if (p.theta.cols() < 1 || p.n < 1) fail(ErrorCode::InvalidArgument, "DGP B needs sites and rows");
  for (const auto& m : p.component_means)
    if (m.size() != p.dim()) fail(ErrorCode::DimensionMismatch, "component mean has wrong length");
  check_gammas(p.gammas, p.num_sites(), p.dim());
}

double oracle_local_propensity(const std::vector<Vector>& gammas, OverlapRegime regime,
                               std::size_t control_only_site, std::size_t k,
                               const ConstVectorRef& x) {
  if (regime == OverlapRegime::None && k == control_only_site) return 0.0;
  return logistic(x, gammas[k]);
}

namespace {

void fill_outcomes(SiteDataset& s, const std::vector<Vector>& gammas, OverlapRegime regime,
                   std::size_t control_only_site, std::size_t k, const OutcomeSpec& spec,
                   RngHandle& rng) {
  const Eigen::Index n = s.x.rows();
  s.w.resize(n);
  s.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto xi = s.x.row(i).transpose();
    const double e = oracle_local_propensity(gammas, regime, control_only_site, k, xi);
    s.w(i) = rng.bernoulli(e) ? 1 : 0;
    const double mean = s.w(i) == 1 ? spec.treated_mean(xi) : spec.control_mean(xi);
    s.y(i) = mean + spec.noise_sd * rng.normal();
  }
}

}  // namespace

FederatedDataset gen_dgp_a(const DgpAParams& p, const OutcomeSpec& spec, const ReplicationKey& key) {
  check_params(p);
  FederatedDataset fd;
  fd.d = p.dim();
  fd.sites.resize(p.num_sites());
  for (std::size_t k = 0; k < p.num_sites(); ++k) {
    const MultivariateNormal mvn(p.means[k], p.covariances[k]);
    RngHandle rng(key.seed, stream_id(StreamPurpose::Data, key.replication, k, key.attempt));
    auto& s = fd.sites[k];
    s.site_id = static_cast<int>(k + 1);
    s.x = mvn.sample(p.sizes[k], rng);
    fill_outcomes(s, p.gammas, p.regime, p.control_only_site, k, spec, rng);
  }
  return fd;
}

namespace {

std::size_t draw_categorical(const Vector& probs, RngHandle& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    acc += probs(k);
    if (u < acc) return static_cast<std::size_t>(k);
  }
  return static_cast<std::size_t>(probs.size() - 1);
}

Covariates sample_mixture(const Vector& weights, const std::vector<MultivariateNormal>& comps,
                          Eigen::Index n, RngHandle& rng) {
  std::vector<std::size_t> label(static_cast<std::size_t>(n));
  std::vector<Eigen::Index> counts(comps.size(), 0);
  for (auto& l : label) ++counts[l = draw_categorical(weights, rng)];
  std::vector<Covariates> blocks;
  for (std::size_t c = 0; c < comps.size(); ++c) blocks.push_back(comps[c].sample(counts[c], rng));
  Covariates x(n, comps.front().dim());
  std::vector<Eigen::Index> next(comps.size(), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = label[static_cast<std::size_t>(i)];
    x.row(i) = blocks[c].row(next[c]++);
  }
  return x;
}

std::vector<MultivariateNormal> components(const std::vector<Vector>& means,
                                           const std::vector<Matrix>& covs) {
  std::vector<MultivariateNormal> out;
  for (std::size_t c = 0; c < means.size(); ++c) out.emplace_back(means[c], covs[c]);
  return out;
}

}  // namespace

FederatedDataset gen_dgp_b(const DgpBParams& p, const OutcomeSpec& spec, const ReplicationKey& key) {
  check_params(p);
  const auto comps = components(p.component_means, p.component_covariances);
  RngHandle rng(key.seed, stream_id(StreamPurpose::Data, key.replication, 0, key.attempt));
  const Covariates x = sample_mixture(p.mixture_weights, comps, p.n, rng);

  const auto k_sites = p.num_sites();
  std::vector<std::size_t> site(static_cast<std::size_t>(p.n));
  std::vector<Eigen::Index> counts(k_sites, 0);
  for (Eigen::Index i = 0; i < p.n; ++i) {
    Vector z = p.theta.transpose() * x.row(i).transpose();
    z.array() -= z.maxCoeff();
    Vector probs = z.array().exp();
    probs /= probs.sum();
    ++counts[site[static_cast<std::size_t>(i)] = draw_categorical(probs, rng)];
  }

  FederatedDataset fd;
  fd.d = p.dim();
  fd.sites.resize(k_sites);
  for (std::size_t k = 0; k < k_sites; ++k) {
    fd.sites[k].site_id = static_cast<int>(k + 1);
    fd.sites[k].x.resize(counts[k], p.dim());
  }
  std::vector<Eigen::Index> next(k_sites, 0);
  for (Eigen::Index i = 0; i < p.n; ++i) {
    const auto k = site[static_cast<std::size_t>(i)];
    fd.sites[k].x.row(next[k]++) = x.row(i);
  }
  for (std::size_t k = 0; k < k_sites; ++k) {
    if (counts[k] == 0) fail(ErrorCode::EmptySite, "site " + std::to_string(k + 1) + " drew no rows");
    fill_outcomes(fd.sites[k], p.gammas, p.regime, p.control_only_site, k, spec, rng);
  }
  return fd;
}

CovariateSampler marginal_sampler(const DgpAParams& p) {
  check_params(p);
  Vector weights(static_cast<Eigen::Index>(p.num_sites()));
  const double n = static_cast<double>(std::accumulate(p.sizes.begin(), p.sizes.end(), Eigen::Index{0}));
  for (std::size_t k = 0; k < p.num_sites(); ++k)
    weights(static_cast<Eigen::Index>(k)) = static_cast<double>(p.sizes[k]) / n;
  auto comps = components(p.means, p.covariances);
  return [weights, comps](Eigen::Index m, RngHandle& rng) {
    return sample_mixture(weights, comps, m, rng);
  };
}

CovariateSampler marginal_sampler(const DgpBParams& p) {
  check_params(p);
  auto comps = components(p.component_means, p.component_covariances);
  Vector weights = p.mixture_weights;
  return [weights, comps](Eigen::Index m, RngHandle& rng) {
    return sample_mixture(weights, comps, m, rng);
  };
}

MonteCarloValue true_ate(const OutcomeSpec& spec, const CovariateSampler& sampler, Eigen::Index m,
                         RngHandle& rng) {
  if (m < 10000) fail(ErrorCode::InvalidArgument, "true_ate needs at least 10^4 draws");
  constexpr Eigen::Index chunk = 100000;
  // Welford accumulation keeps the SE exact for constant effects.
  double mean = 0.0, m2 = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index done = 0; done < m; done += chunk) {
    const Covariates x = sampler(std::min(chunk, m - done), rng);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const auto xi = x.row(i).transpose();
      const double v = spec.treated_mean(xi) - spec.control_mean(xi);
      ++count;
      const double delta = v - mean;
      mean += delta / static_cast<double>(count);
      m2 += delta * (v - mean);
    }
  }
  const double var = count > 1 ? m2 / static_cast<double>(count - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(count))};
}

}  // namespace fedcausal

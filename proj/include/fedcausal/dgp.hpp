#pragma once

#include "fedcausal/core_data.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace fedcausal {

enum class OverlapRegime { None, Poor, Good };

std::string to_string(OverlapRegime r);
OverlapRegime parse_overlap_regime(const std::string& s);

/// Numerically stable inverse logit.
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double ez = std::exp(z);
  return ez / (1.0 + ez);
}

/// 1 / (1 + exp(-gamma' x)).
template <typename DerivedX, typename DerivedG>
double logistic(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedG>& gamma) {
  if (x.size() != gamma.size())
    fail(ErrorCode::DimensionMismatch, "logistic: dim(x)=" + std::to_string(x.size()) +
                                           " dim(gamma)=" + std::to_string(gamma.size()));
  return sigmoid(x.dot(gamma));
}

/// Conditional outcome means and additive Gaussian noise scale.
struct OutcomeSpec {
  PointFn treated_mean;
  PointFn control_mean;
  double noise_sd = 1.0;
};

/// mu_1(x) = sum_{j<=5} (j/10) x_j^2 + sum_{j=6..10} (j/10) x_j + x_9 x_10,
/// mu_0(x) = sum_{j<=5} ((3j-10)/30) x_j^2 + sum_{j=6..10} ((3j-10)/30) x_j + x_1 x_10.
/// Requires d == 10.
OutcomeSpec table_outcome_spec(double noise_sd = 1.0);

/// Sampler for N(mean, cov) through the Cholesky factor of cov.
class MultivariateNormal {
 public:
  MultivariateNormal(Vector mean, const Matrix& cov);

  Eigen::Index dim() const noexcept { return mean_.size(); }
  const Vector& mean() const noexcept { return mean_; }
  const Matrix& chol() const noexcept { return lower_; }

  /// n rows, each mean + L z with z standard normal.
  Covariates sample(Eigen::Index n, RngHandle& rng) const;

 private:
  Vector mean_;
  Matrix lower_;
};

/// c_i I_d + c_j J_d.
Matrix identity_plus_ones(Eigen::Index d, double identity_coef, double ones_coef);

/// Local treatment coefficients per site: site 1 and 3 fixed, site 2 weak or
/// good depending on the regime (ignored under None).
std::vector<Vector> table_gammas(OverlapRegime regime);

struct DgpAParams {
  std::vector<Vector> means;
  std::vector<Matrix> covariances;
  std::vector<Eigen::Index> sizes;
  std::vector<Vector> gammas;
  OverlapRegime regime = OverlapRegime::Good;
  /// Zero-based site that only holds controls under the None regime.
  std::size_t control_only_site = 1;

  std::size_t num_sites() const noexcept { return means.size(); }
  Eigen::Index dim() const { return means.empty() ? 0 : means.front().size(); }
};

struct DgpBParams {
  Eigen::Index n = 6000;
  Vector mixture_weights;
  std::vector<Vector> component_means;
  std::vector<Matrix> component_covariances;
  /// d x K site-membership coefficients; P(H=k|x) = softmax(theta' x)_k.
  Matrix theta;
  std::vector<Vector> gammas;
  OverlapRegime regime = OverlapRegime::Good;
  std::size_t control_only_site = 1;

  std::size_t num_sites() const noexcept { return static_cast<std::size_t>(theta.cols()); }
  Eigen::Index dim() const { return theta.rows(); }
};

/// DGP A with the tabulated means, covariances and sizes (n_k = 2000 by default).
DgpAParams dgp_a_table_params(OverlapRegime regime, Eigen::Index n_per_site = 2000);
/// DGP B with the tabulated mixture and membership coefficients (n = 6000 by default).
DgpBParams dgp_b_table_params(OverlapRegime regime, Eigen::Index n = 6000);

void check_params(const DgpAParams& p);
void check_params(const DgpBParams& p);

/// Oracle local propensity e_k(x) of zero-based site k.
double oracle_local_propensity(const std::vector<Vector>& gammas, OverlapRegime regime,
                               std::size_t control_only_site, std::size_t k,
                               const ConstVectorRef& x);

/// Identifies the random streams of one replication. attempt > 0 is used when
/// a draw has to be regenerated.
struct ReplicationKey {
  std::uint64_t seed = 0;
  std::uint64_t replication = 0;
  std::uint64_t attempt = 0;
};

/// K sites sampled independently, site k from stream (seed, replication, k).
FederatedDataset gen_dgp_a(const DgpAParams& p, const OutcomeSpec& spec, const ReplicationKey& key);

/// n rows from the mixture, sites assigned by softmax(theta' x).
FederatedDataset gen_dgp_b(const DgpBParams& p, const OutcomeSpec& spec, const ReplicationKey& key);

/// Draws m covariate rows from a scenario's marginal law.
using CovariateSampler = std::function<Covariates(Eigen::Index m, RngHandle& rng)>;

CovariateSampler marginal_sampler(const DgpAParams& p);
CovariateSampler marginal_sampler(const DgpBParams& p);

struct MonteCarloValue {
  double value = 0.0;
  double se = 0.0;
};

/// Monte Carlo mean of mu_1(X) - mu_0(X) over m fresh draws, SE = sd / sqrt(m).
MonteCarloValue true_ate(const OutcomeSpec& spec, const CovariateSampler& sampler, Eigen::Index m,
                         RngHandle& rng);

}  // namespace fedcausal

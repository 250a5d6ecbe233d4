#pragma once

#include "fedcausal/core_data.hpp"
#include "fedcausal/federation.hpp"
#include "fedcausal/nuisance.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace fedcausal {

enum class EstimatorForm { IPW, AIPW };

std::string to_string(EstimatorForm f);

/// W Y / e - (1 - W) Y / (1 - e).
double ipw_term(int w, double y, double e);

/// mu1 - mu0 + W (Y - mu1) / e - (1 - W)(Y - mu0) / (1 - e).
double aipw_term(int w, double y, double e, double mu1, double mu0);

/// Propensity and (optional) outcome models, each evaluated on a covariate
/// block. AIPW needs both outcome models.
struct NuisanceBundle {
  BatchFn propensity;
  BatchFn mu1;
  BatchFn mu0;

  bool has_outcome_models() const noexcept { return static_cast<bool>(mu1) && static_cast<bool>(mu0); }
};

BatchFn as_batch(const GlobalPropensity& gp);
BatchFn as_batch(const LogisticParams& local);
BatchFn as_batch(const OutcomeModel& model);

struct BootstrapInterval {
  double lo = 0.0;
  double hi = 0.0;
  double level = 0.95;
  int resamples = 0;
  int failed = 0;
};

struct EstimateReport {
  std::string estimator;
  EstimatorForm form = EstimatorForm::IPW;
  std::string scheme;
  double tau_hat = 0.0;
  double var_plugin = 0.0;
  std::optional<BootstrapInterval> ci;
  double o_global = 0.0;
  std::vector<double> o_local;
  /// Per-site point estimates and per-row term variances (1/n_k normalized).
  std::vector<double> site_tau;
  std::vector<double> site_term_variance;
  LedgerTotals communication;
  std::vector<std::string> notes;
};

/// `estimator,form,scheme,tau_hat,var_plugin,ci_lo,ci_hi,o_global,o_k_1..K,failed_resamples`.
std::string report_csv_header(std::size_t num_sites);
std::string report_csv_row(const EstimateReport& r, std::size_t num_sites);

/// Per-row terms of one site; errors carry the site and row.
Vector site_terms(const SiteDataset& site, const Vector& e, const Vector* mu1, const Vector* mu0,
                  EstimatorForm form);

/// (1/n) sum over all pooled rows.
EstimateReport estimate_centralized(const FederatedDataset& fd, const NuisanceBundle& nb, EstimatorForm form);

/// sum_k (n_k/n) tau_k with each site's own propensity. MetaUndefined when any
/// site lacks one of the two arms.
EstimateReport estimate_meta(const FederatedDataset& fd, const std::vector<BatchFn>& local_propensities,
                             const BatchFn& mu1, const BatchFn& mu0, EstimatorForm form);

/// sum_k (n_k/n) tau_k^fed, every site evaluating the shared global score.
EstimateReport estimate_federated(const FederatedDataset& fd, const NuisanceBundle& nb, EstimatorForm form);
EstimateReport estimate_federated(const FederatedDataset& fd, const GlobalPropensity& gp,
                                  const BatchFn& mu1, const BatchFn& mu0, EstimatorForm form);

/// mean((WY/e)^2 + ((1-W)Y/(1-e))^2) - tau^2, divided by n.
double variance_ipw_plugin(const FederatedDataset& fd, const BatchFn& e);
/// Sample variance (1/n) of the AIPW terms, divided by n.
double variance_aipw_plugin(const FederatedDataset& fd, const BatchFn& e, const BatchFn& mu1, const BatchFn& mu0);

/// (1/n) sum_k rho_k V_k + (1/n) (sum_k rho_k tau_k^2 - (sum_k rho_k tau_k)^2).
double variance_meta_decomposition(const std::vector<double>& site_variances, const Vector& proportions,
                                   const std::vector<double>& site_taus, double n);

/// Mean of 1 / (e (1 - e)); +inf if any score leaves (0, 1).
double overlap_global(const FederatedDataset& fd, const BatchFn& e);
double overlap_local(const SiteDataset& site, const BatchFn& e_k);
double overlap_of_scores(const Vector& e);

// ---------------------------------------------------------------------------
// Resampling

/// Type-7 (linear interpolation) empirical quantile.
double empirical_quantile(std::vector<double> values, double q);

/// n_k rows drawn with replacement inside every site.
FederatedDataset resample_within_sites(const FederatedDataset& fd, RngHandle& rng);

using DatasetEstimator = std::function<double(const FederatedDataset&)>;

struct BootstrapResult {
  BootstrapInterval interval;
  std::vector<double> estimates;
};

/// Per-site terms with one propensity per site, or a single shared one.
std::vector<Vector> terms_by_site(const FederatedDataset& fd, const std::vector<BatchFn>& propensity,
                                  const BatchFn& mu1, const BatchFn& mu0, EstimatorForm form);

/// Site-stratified percentile bootstrap. Resamples whose estimator throws an
/// Error are dropped and counted; more than 20% failures is fatal.
BootstrapResult bootstrap_ci(const FederatedDataset& fd, const DatasetEstimator& estimator, int resamples,
                             double level, RngHandle& rng);

/// The same bootstrap for estimators whose nuisances stay fixed: each
/// resample is sum_k (n_k/n) mean(resampled terms of site k). Draws indices
/// in the same order as resample_within_sites, so with the same stream the
/// result equals bootstrap_ci on the fixed-nuisance estimator.
BootstrapResult bootstrap_terms(const std::vector<Vector>& site_terms, int resamples, double level,
                                RngHandle& rng);

// ---------------------------------------------------------------------------
// Replication statistics

struct SampleSummary {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  double se = 0.0;        // sd / sqrt(m)
};

SampleSummary summarize(const std::vector<double>& values);

struct VarianceDifference {
  double difference = 0.0;
  double jackknife_se = 0.0;
};

/// Var(a) - Var(b) on paired replications with its leave-one-out jackknife SE.
VarianceDifference variance_difference_jackknife(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace fedcausal

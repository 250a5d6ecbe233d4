#pragma once

#include "fedcausal/dgp.hpp"
#include "fedcausal/estimators.hpp"
#include "fedcausal/federation.hpp"
#include "fedcausal/nuisance.hpp"
#include "fedcausal/serialize.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fedcausal {

enum class DgpKind { A, B };
enum class NuisanceMode { Oracle, Estimated };
/// Outcome models used by the AIPW estimators: the generating means or
/// (misspecified) linear models trained by FedAvg.
enum class OutcomeMode { Oracle, Linear };

std::string to_string(DgpKind k);
std::string to_string(NuisanceMode m);
std::string to_string(OutcomeMode m);

/// All estimators known to the runner, in their canonical order.
const std::vector<std::string>& known_estimators();

struct ScenarioConfig {
  std::string name = "scenario";
  DgpKind dgp = DgpKind::A;
  OverlapRegime regime = OverlapRegime::Good;
  /// Local treatment coefficients; site 2 uses the weak vector under the
  /// poor regime and the good one otherwise.
  Vector gamma_1 = table_gammas(OverlapRegime::Good)[0];
  Vector gamma_2_weak = table_gammas(OverlapRegime::Poor)[1];
  Vector gamma_2_good = table_gammas(OverlapRegime::Good)[1];
  Vector gamma_3 = table_gammas(OverlapRegime::Good)[2];
  DgpAParams dgp_a = dgp_a_table_params(OverlapRegime::Good);
  DgpBParams dgp_b = dgp_b_table_params(OverlapRegime::Good);
  double noise_sd = 1.0;
  std::vector<std::string> estimators = known_estimators();
  NuisanceMode nuisance = NuisanceMode::Oracle;
  OutcomeMode outcome_model = OutcomeMode::Oracle;
  /// Membership model training.
  FedAvgConfig fedavg{};
  /// Outcome model training.
  FedAvgConfig outcome_fedavg{500, 1, 0.1, 0, 0, 0, 1e-12, 10, false};
  bool local_intercept = true;
  double clip = 0.0;
  std::optional<double> ridge;
  int bootstrap_b = 0;
  double bootstrap_level = 0.95;
  int replications = 300;
  std::uint64_t seed = 20240917;
  Eigen::Index true_ate_draws = 1'000'000;
  /// Regeneration attempts when a site that should hold both arms does not.
  int max_attempts = 10;
  std::string output_dir = "out";

  std::size_t num_sites() const;
  Eigen::Index dim() const;
};

/// Number of replications used by --paper-scale.
inline constexpr int kFullScaleReplications = 1500;

/// Parses a scenario document whose parameter keys follow the simulation
/// tables (gamma_1, gamma_2_weak, mu_1, Sigma_1 = {"I": a, "J": b}, theta_1,
/// ...). Missing keys keep the tabulated defaults. Throws ConfigError.
ScenarioConfig parse_config(const Json& j);
/// Copies regime and coefficient table into both DGP parameter sets.
void apply_regime(ScenarioConfig& cfg);
ScenarioConfig load_config(const std::string& path);
Json config_to_json(const ScenarioConfig& cfg);
void check_config(const ScenarioConfig& cfg);

/// One panel of the (DGP, regime) grid with tabulated parameters, on top of `base`.
ScenarioConfig panel_config(const ScenarioConfig& base, DgpKind dgp, OverlapRegime regime);
/// The six panels (A, B) x (none, poor, good).
std::vector<ScenarioConfig> standard_panels(const ScenarioConfig& base);

FederatedDataset generate(const ScenarioConfig& cfg, const ReplicationKey& key);
OutcomeSpec outcome_spec(const ScenarioConfig& cfg);
MonteCarloValue scenario_true_ate(const ScenarioConfig& cfg);

// ---------------------------------------------------------------------------
// Nuisances and estimator evaluation on one dataset

struct EstimationSettings {
  bool local_intercept = true;
  FedAvgConfig fedavg{};
  FedAvgConfig outcome_fedavg{500, 1, 0.1, 0, 0, 0, 1e-12, 10, false};
  std::optional<double> ridge;
  double clip = 0.0;
  bool membership = true;
  bool density_ratio = true;
  bool outcome_models = true;
};

struct FittedNuisances {
  std::vector<LogisticParams> local;
  std::optional<GlobalPropensity> mw;
  std::optional<GlobalPropensity> dw;
  /// Known generating propensity; only set for synthetic data.
  BatchFn oracle_propensity;
  BatchFn mu1;
  BatchFn mu0;
  LedgerTotals local_comm;
  /// Shared by the membership and outcome models, counted once per report.
  LedgerTotals standardize_comm;
  LedgerTotals mw_comm;
  LedgerTotals dw_comm;
  LedgerTotals outcome_comm;
  CommunicationLedger ledger;
  std::vector<std::string> notes;
};

/// Fits everything from the data through the federation protocols.
FittedNuisances fit_nuisances(const FederatedDataset& fd, const EstimationSettings& s);

/// Nuisances of a synthetic scenario in its configured mode.
FittedNuisances scenario_nuisances(const ScenarioConfig& cfg, const FederatedDataset& fd,
                                   std::uint64_t replication);

struct EstimatorOutcome {
  std::string estimator;
  EstimatorForm form = EstimatorForm::IPW;
  std::optional<EstimateReport> report;
  /// Set when the estimator could not be computed.
  std::optional<ErrorCode> error;
  std::string message;
  /// Per-site terms, kept for the fixed-nuisance bootstrap.
  std::vector<Vector> terms;
};

EstimatorOutcome evaluate_estimator(const std::string& name, const FederatedDataset& fd,
                                    const FittedNuisances& nu, bool keep_terms = false);

// ---------------------------------------------------------------------------
// Monte Carlo runs

struct ReplicationRecord {
  std::uint64_t replication = 0;
  std::uint64_t attempt = 0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<EstimatorOutcome> outcomes;
  std::vector<Eigen::Index> treated_per_site;
  /// Overlap of the oracle (or fitted) global score against the
  /// sample-size weighted local overlaps, on this dataset.
  double o_global = 0.0;
  double o_local_weighted = 0.0;
};

struct EstimatorSummary {
  std::string estimator;
  int ok = 0;
  int undefined = 0;
  int failed = 0;
  double mean = 0.0;
  double bias = 0.0;
  double mc_variance = 0.0;
  double se = 0.0;
  double mean_var_plugin = 0.0;
  double coverage = 0.0;
  int ci_count = 0;
  double mean_o_global = 0.0;
  double mean_upload_floats = 0.0;
  /// tau_hat per replication in replication order, NaN where undefined.
  std::vector<double> estimates;
};

/// Scores on the rows of the poorly overlapping site for the log-scale
/// histograms: its local score and the global score.
struct ScoreSample {
  Vector local;
  Vector global;
  IntVector w;
};

struct RunSummary {
  std::string name;
  DgpKind dgp = DgpKind::A;
  OverlapRegime regime = OverlapRegime::Good;
  MonteCarloValue truth;
  int replications = 0;
  int aborted = 0;
  int regenerated = 0;
  std::vector<EstimatorSummary> estimators;
  std::vector<ReplicationRecord> records;
  std::vector<std::string> log;
  std::optional<ScoreSample> scores;
  std::string output_dir;

  const EstimatorSummary& at(const std::string& estimator) const;
};

struct RunOptions {
  int jobs = 1;
  /// Write raw/summary/plot files under cfg.output_dir/cfg.name.
  bool write_files = true;
  bool keep_records = true;
};

/// Header of the per-replication CSV.
std::string raw_csv_header(std::size_t num_sites);
std::string summary_csv_header();
std::string summary_csv_row(const RunSummary& s, const EstimatorSummary& e);

RunSummary run_scenario(const ScenarioConfig& cfg, const RunOptions& opts = {});
/// Runs every scenario; keys are (dgp, regime) in run order.
std::vector<RunSummary> run_matrix(const std::vector<ScenarioConfig>& configs, const RunOptions& opts = {});
void write_combined_summary(const std::vector<RunSummary>& runs, const std::string& path);

/// Boxplot CSV, log-scale score histograms and an SVG boxplot next to the raw
/// CSV. Throws IoError on a missing or empty raw CSV.
struct PlotFiles {
  std::string boxplot_csv;
  std::string histogram_csv;
  std::string svg;
};
PlotFiles emit_plotdata(const RunSummary& summary, const std::string& raw_csv_path, const std::string& out_dir);

struct HistogramBin {
  std::string score;
  std::string group;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// log10 bins shared by both scores; exact zeros get their own bin with
/// lo = hi = -inf.
std::vector<HistogramBin> log_histogram(const ScoreSample& s, int bins = 48, double log10_min = -12.0);

}  // namespace fedcausal

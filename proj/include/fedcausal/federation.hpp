#pragma once

#include "fedcausal/core_data.hpp"
#include "fedcausal/nuisance.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fedcausal {

// ---------------------------------------------------------------------------
// Communication ledger

/// Traffic between the server and one site in one round.
struct LedgerEntry {
  int round = 0;
  int site = 0;
  std::uint64_t upload_floats = 0;
  std::uint64_t broadcast_floats = 0;
  /// Integer metadata (row counts) sent alongside the floats.
  std::uint64_t upload_counts = 0;
  /// Monitoring scalars (local loss) that are not part of the model payload.
  std::uint64_t diagnostic_floats = 0;
  std::string scheme;
};

struct LedgerTotals {
  std::uint64_t upload_floats = 0;
  std::uint64_t broadcast_floats = 0;
  std::uint64_t upload_counts = 0;
  std::uint64_t diagnostic_floats = 0;

  LedgerTotals& operator+=(const LedgerTotals& o);
};

class CommunicationLedger {
 public:
  void record(LedgerEntry entry);
  void merge(const CommunicationLedger& other);

  const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
  LedgerTotals totals() const;
  std::map<std::string, LedgerTotals> by_scheme() const;

  /// `round,site,upload_floats,broadcast_floats`, one line per entry.
  void write_csv(std::ostream& out) const;

 private:
  std::vector<LedgerEntry> entries_;
};

// ---------------------------------------------------------------------------
// Site -> server payloads. Only these types ever leave a site.

struct MomentsPayload {
  int site = 0;
  GaussianMoments moments;

  std::uint64_t float_count() const {
    return static_cast<std::uint64_t>(moments.mean.size() + moments.covariance.size());
  }
};

struct StandardizationPayload {
  int site = 0;
  Vector mean;
  Vector variance;
  Eigen::Index count = 0;

  std::uint64_t float_count() const { return static_cast<std::uint64_t>(mean.size() + variance.size()); }
};

struct ModelPayload {
  int site = 0;
  Matrix params;
  Eigen::Index count = 0;
  /// Local objective evaluated at the broadcast parameters.
  double local_loss = 0.0;

  std::uint64_t float_count() const { return static_cast<std::uint64_t>(params.size()); }
};

enum class OutcomeKind { Linear, Logistic };
std::string to_string(OutcomeKind k);

struct FedAvgConfig {
  int rounds = 5000;
  int local_steps = 1;
  double learning_rate = 0.1;
  /// 0 means full batch.
  Eigen::Index batch_size = 0;
  std::uint64_t seed = 0;
  std::uint64_t replication = 0;
  double divergence_tolerance = 1e-12;
  int divergence_patience = 10;
  bool record_iterates = false;
};

void check_config(const FedAvgConfig& cfg);

/// A site as seen from the server: its records stay private, the server only
/// receives the payloads returned by these methods.
class SiteNode {
 public:
  explicit SiteNode(const SiteDataset& data) : data_(&data) {}

  int site_id() const noexcept { return data_->site_id; }
  Eigen::Index size() const noexcept { return data_->size(); }
  Eigen::Index dim() const noexcept { return data_->dim(); }
  /// Rows in treatment arm `arm` (0 or 1).
  Eigen::Index arm_size(int arm) const;

  MomentsPayload share_moments(std::optional<double> ridge) const;
  StandardizationPayload share_standardization() const;

  /// Runs E local steps of multinomial gradient descent where every local
  /// row carries this site's label.
  ModelPayload multinomial_update(const Matrix& theta, const FeatureMap& features, std::size_t num_sites,
                                  const FedAvgConfig& cfg, RngHandle& rng) const;

  /// E local steps on the rows of one treatment arm.
  ModelPayload outcome_update(const Vector& coef, int arm, OutcomeKind kind, const FeatureMap& features,
                              const FedAvgConfig& cfg, RngHandle& rng) const;

  /// Local application of a broadcast standardization.
  SiteDataset standardized(const FeatureMap& map) const;

 private:
  struct FeatureCache {
    FeatureMap map;
    int arm = -1;
    Covariates z;
    Vector y;
  };

  /// Mapped covariates (and outcomes) of all rows (arm < 0) or of one arm,
  /// computed once per node.
  const FeatureCache& features_for(const FeatureMap& map, int arm) const;

  const SiteDataset* data_;
  mutable std::vector<FeatureCache> cache_;
};

// ---------------------------------------------------------------------------
// Protocols

struct FedAvgResult {
  MembershipParams params;
  CommunicationLedger ledger;
  /// Sample-size weighted local loss at the start of each round.
  std::vector<double> loss_history;
  /// Server iterate after each round when cfg.record_iterates is set.
  std::vector<Matrix> iterates;
};

/// FedAvg training of the multinomial site-membership model from Theta_0 = 0.
FedAvgResult fedavg_multinomial(const FederatedDataset& fd, const FedAvgConfig& cfg,
                                const FeatureMap& features = {});

struct OutcomeModel {
  OutcomeKind kind = OutcomeKind::Linear;
  Vector coef;
  FeatureMap features;

  double predict(const ConstVectorRef& x) const;
  Vector predict(const Covariates& x) const;
  double predict(const Vector& x) const { return predict(ConstVectorRef(x)); }
};

struct OutcomeModelsResult {
  OutcomeModel control;
  OutcomeModel treated;
  CommunicationLedger ledger;
  std::vector<Vector> control_iterates;
  std::vector<Vector> treated_iterates;
};

/// Two FedAvg runs, one per treatment arm. Sites without rows in an arm sit
/// out that arm's aggregation and the remaining weights are renormalized.
OutcomeModelsResult fedavg_outcome_models(const FederatedDataset& fd, const FedAvgConfig& cfg,
                                          OutcomeKind kind, const FeatureMap& features = {});

struct StandardizationResult {
  Vector mean;
  Vector variance;
  /// shift = mean, scale = sd (1 on zero-variance coordinates).
  FeatureMap map;
  std::vector<bool> zero_variance;
  FederatedDataset transformed;
  CommunicationLedger ledger;

  bool any_zero_variance() const;
};

/// Pooled mean and (1/n) variance from per-site means and variances.
StandardizationResult federated_standardize(const FederatedDataset& fd);

struct MomentExchangeResult {
  DensityRatioModel model;
  CommunicationLedger ledger;
};

/// One round: every site uploads (mean, covariance, n_k).
MomentExchangeResult one_shot_moment_exchange(const FederatedDataset& fd, std::optional<double> ridge);

/// Floats predicted by the closed-form accounting: MW -> T K d, DW -> K d + K d^2.
std::uint64_t communication_cost(WeightScheme scheme, std::uint64_t rounds, std::uint64_t num_sites,
                                 std::uint64_t dim);

/// Ledger with one upload of each site's fitted local propensity model.
CommunicationLedger local_model_upload_ledger(const std::vector<LogisticParams>& local);

}  // namespace fedcausal

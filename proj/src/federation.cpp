#include "fedcausal/federation.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

namespace fedcausal {

LedgerTotals& LedgerTotals::operator+=(const LedgerTotals& o) {
  upload_floats += o.upload_floats;
  broadcast_floats += o.broadcast_floats;
  upload_counts += o.upload_counts;
  diagnostic_floats += o.diagnostic_floats;
  return *this;
}

void CommunicationLedger::record(LedgerEntry entry) { entries_.push_back(std::move(entry)); }

void CommunicationLedger::merge(const CommunicationLedger& other) {
  entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
}

namespace {

LedgerTotals totals_of(const LedgerEntry& e) {
  return {e.upload_floats, e.broadcast_floats, e.upload_counts, e.diagnostic_floats};
}

}  // namespace

LedgerTotals CommunicationLedger::totals() const {
  LedgerTotals t;
  for (const auto& e : entries_) t += totals_of(e);
  return t;
}

std::map<std::string, LedgerTotals> CommunicationLedger::by_scheme() const {
  std::map<std::string, LedgerTotals> out;
  for (const auto& e : entries_) out[e.scheme] += totals_of(e);
  return out;
}

void CommunicationLedger::write_csv(std::ostream& out) const {
  out << "round,site,upload_floats,broadcast_floats\n";
  for (const auto& e : entries_)
    out << e.round << ',' << e.site << ',' << e.upload_floats << ',' << e.broadcast_floats << '\n';
}

std::string to_string(OutcomeKind k) { return k == OutcomeKind::Linear ? "linear" : "logistic"; }

void check_config(const FedAvgConfig& cfg) {
  if (cfg.rounds < 1) fail(ErrorCode::InvalidArgument, "FedAvg needs T >= 1");
  if (cfg.local_steps < 1) fail(ErrorCode::InvalidArgument, "FedAvg needs E >= 1");
  if (!(cfg.learning_rate > 0.0)) fail(ErrorCode::InvalidArgument, "FedAvg needs eta > 0");
  if (cfg.batch_size < 0) fail(ErrorCode::InvalidArgument, "batch size must be >= 0");
}

// ---------------------------------------------------------------------------

namespace {

bool same_map(const FeatureMap& a, const FeatureMap& b) {
  return a.intercept == b.intercept && a.shift.size() == b.shift.size() && a.shift == b.shift &&
         a.scale == b.scale;
}

/// Row indices of one local step: all rows, or B drawn without replacement.
std::vector<Eigen::Index> batch_indices(Eigen::Index n, Eigen::Index batch, RngHandle& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  if (batch == 0 || batch >= n) return idx;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Eigen::Index j = i + rng.index(n - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(batch));
  return idx;
}

Covariates gather(const Covariates& x, const std::vector<Eigen::Index>& idx) {
  Covariates out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  return out;
}

Vector gather(const Vector& v, const std::vector<Eigen::Index>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(idx[i]);
  return out;
}

/// Mean of -log softmax(z theta)_label over the rows of z.
double multinomial_loss(const Matrix& logits, Eigen::Index label) {
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    const double lse = top + std::log((logits.row(i).array() - top).exp().sum());
    loss += lse - logits(i, label);
  }
  return loss / static_cast<double>(logits.rows());
}

double outcome_loss(const Vector& pred_linear, const Vector& y, OutcomeKind kind) {
  if (kind == OutcomeKind::Linear) return 0.5 * (pred_linear - y).squaredNorm() / static_cast<double>(y.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double z = pred_linear(i);
    loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y(i) * z;
  }
  return loss / static_cast<double>(y.size());
}

}  // namespace

Eigen::Index SiteNode::arm_size(int arm) const { return (data_->w.array() == arm).count(); }

const SiteNode::FeatureCache& SiteNode::features_for(const FeatureMap& map, int arm) const {
  for (const auto& c : cache_)
    if (c.arm == arm && same_map(c.map, map)) return c;
  FeatureCache c;
  c.map = map;
  c.arm = arm;
  if (arm < 0) {
    c.z = map.apply(data_->x);
    c.y = data_->y;
  } else {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < data_->size(); ++i)
      if (data_->w(i) == arm) rows.push_back(i);
    c.z = map.apply(gather(data_->x, rows));
    c.y = gather(data_->y, rows);
  }
  cache_.push_back(std::move(c));
  return cache_.back();
}

MomentsPayload SiteNode::share_moments(std::optional<double> ridge) const {
  return MomentsPayload{site_id(), fit_gaussian_moments(*data_, ridge)};
}

StandardizationPayload SiteNode::share_standardization() const {
  StandardizationPayload p;
  p.site = site_id();
  p.count = size();
  p.mean = data_->x.colwise().mean().transpose();
  p.variance = (data_->x.rowwise() - p.mean.transpose()).array().square().colwise().mean().transpose();
  return p;
}

ModelPayload SiteNode::multinomial_update(const Matrix& theta, const FeatureMap& features,
                                          std::size_t num_sites, const FedAvgConfig& cfg,
                                          RngHandle& rng) const {
  const auto& cache = features_for(features, -1);
  const Covariates& z = cache.z;
  if (theta.rows() != z.cols() || static_cast<std::size_t>(theta.cols()) != num_sites)
    fail(ErrorCode::DimensionMismatch, "membership parameters do not match the feature map");
  const Eigen::Index label = site_id() - 1;
  const bool full = cfg.batch_size == 0 || cfg.batch_size >= size();

  ModelPayload out;
  out.site = site_id();
  out.count = size();
  out.params = theta;
  for (int step = 0; step < cfg.local_steps; ++step) {
    Matrix grad;
    if (full) {
      Matrix p = z * out.params;
      if (step == 0) out.local_loss = multinomial_loss(p, label);
      softmax_rows(p);
      p.col(label).array() -= 1.0;
      grad = z.transpose() * p / static_cast<double>(z.rows());
    } else {
      if (step == 0) out.local_loss = multinomial_loss(z * out.params, label);
      const auto idx = batch_indices(size(), cfg.batch_size, rng);
      const Covariates zb = gather(z, idx);
      Matrix p = zb * out.params;
      softmax_rows(p);
      p.col(label).array() -= 1.0;
      grad = zb.transpose() * p / static_cast<double>(zb.rows());
    }
    out.params -= cfg.learning_rate * grad;
  }
  return out;
}

ModelPayload SiteNode::outcome_update(const Vector& coef, int arm, OutcomeKind kind,
                                      const FeatureMap& features, const FedAvgConfig& cfg,
                                      RngHandle& rng) const {
  const auto& cache = features_for(features, arm);
  if (coef.size() != cache.z.cols())
    fail(ErrorCode::DimensionMismatch, "outcome coefficients do not match the feature map");
  ModelPayload out;
  out.site = site_id();
  out.count = cache.z.rows();
  out.params = coef;
  if (out.count == 0) return out;
  const bool full = cfg.batch_size == 0 || cfg.batch_size >= out.count;
  for (int step = 0; step < cfg.local_steps; ++step) {
    Covariates zb_store;
    Vector yb_store;
    const Covariates* zb = &cache.z;
    const Vector* yb = &cache.y;
    if (!full) {
      const auto idx = batch_indices(out.count, cfg.batch_size, rng);
      zb_store = gather(cache.z, idx);
      yb_store = gather(cache.y, idx);
      zb = &zb_store;
      yb = &yb_store;
    }
    Vector eta = *zb * out.params;
    if (step == 0) out.local_loss = full ? outcome_loss(eta, *yb, kind)
                                         : outcome_loss(cache.z * out.params, cache.y, kind);
    if (kind == OutcomeKind::Logistic) eta = eta.unaryExpr([](double v) { return sigmoid(v); });
    const Vector grad = zb->transpose() * (eta - *yb) / static_cast<double>(zb->rows());
    out.params.col(0) -= cfg.learning_rate * grad;
  }
  return out;
}

SiteDataset SiteNode::standardized(const FeatureMap& map) const {
  SiteDataset s = *data_;
  FeatureMap no_intercept = map;
  no_intercept.intercept = false;
  s.x = no_intercept.apply(data_->x);
  return s;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<SiteNode> nodes_of(const FederatedDataset& fd) {
  std::vector<SiteNode> nodes;
  nodes.reserve(fd.num_sites());
  for (const auto& s : fd.sites) nodes.emplace_back(s);
  return nodes;
}

std::vector<RngHandle> site_streams(const FedAvgConfig& cfg, std::size_t num_sites) {
  std::vector<RngHandle> rngs;
  for (std::size_t k = 0; k < num_sites; ++k)
    rngs.emplace_back(cfg.seed, stream_id(StreamPurpose::FedAvg, cfg.replication, k));
  return rngs;
}

/// Tracks consecutive loss increases.
class DivergenceMonitor {
 public:
  DivergenceMonitor(double tol, int patience) : tol_(tol), patience_(patience) {}

  void observe(double loss, int round) {
    if (!std::isfinite(loss))
      fail(ErrorCode::DivergenceDetected, "non-finite loss at round " + std::to_string(round));
    if (has_prev_ && loss > prev_ + tol_) {
      if (++streak_ >= patience_)
        fail(ErrorCode::DivergenceDetected, "loss increased for " + std::to_string(streak_) +
                                                " consecutive rounds (round " + std::to_string(round) + ")");
    } else {
      streak_ = 0;
    }
    prev_ = loss;
    has_prev_ = true;
  }

 private:
  double tol_;
  int patience_;
  double prev_ = 0.0;
  bool has_prev_ = false;
  int streak_ = 0;
};

}  // namespace

FedAvgResult fedavg_multinomial(const FederatedDataset& fd, const FedAvgConfig& cfg,
                                const FeatureMap& features) {
  check_config(cfg);
  require_valid(fd);
  const std::size_t k_sites = fd.num_sites();
  if (k_sites < 2)
    fail(ErrorCode::DegenerateFederation, "membership weights are constant for a single site");

  auto nodes = nodes_of(fd);
  auto rngs = site_streams(cfg, k_sites);
  const double n = static_cast<double>(fd.size());
  const Eigen::Index p = features.output_dim(fd.d);
  const auto param_floats = static_cast<std::uint64_t>(p) * k_sites;

  FedAvgResult res;
  Matrix theta = Matrix::Zero(p, static_cast<Eigen::Index>(k_sites));
  DivergenceMonitor monitor(cfg.divergence_tolerance, cfg.divergence_patience);
  for (int t = 1; t <= cfg.rounds; ++t) {
    std::vector<ModelPayload> uploads;
    uploads.reserve(k_sites);
    for (std::size_t k = 0; k < k_sites; ++k)
      uploads.push_back(nodes[k].multinomial_update(theta, features, k_sites, cfg, rngs[k]));

    // Aggregation runs in site order whatever order the uploads arrived in.
    Matrix next = Matrix::Zero(theta.rows(), theta.cols());
    double loss = 0.0;
    for (const auto& u : uploads) {
      const double weight = static_cast<double>(u.count) / n;
      next += weight * u.params;
      loss += weight * u.local_loss;
      res.ledger.record(LedgerEntry{t, u.site, u.float_count(), param_floats, 0, 1, "MW"});
    }
    theta = std::move(next);
    res.loss_history.push_back(loss);
    if (cfg.record_iterates) res.iterates.push_back(theta);
    monitor.observe(loss, t);
  }
  res.params = MembershipParams{theta, features};
  return res;
}

double OutcomeModel::predict(const ConstVectorRef& x) const {
  const double eta = features.apply(x).dot(coef);
  return kind == OutcomeKind::Linear ? eta : sigmoid(eta);
}

Vector OutcomeModel::predict(const Covariates& x) const {
  Vector eta = features.apply(x) * coef;
  if (kind == OutcomeKind::Logistic) eta = eta.unaryExpr([](double v) { return sigmoid(v); });
  return eta;
}

namespace {

OutcomeModel train_arm(const std::vector<SiteNode>& nodes, std::vector<RngHandle>& rngs, int arm,
                       OutcomeKind kind, const FeatureMap& features, Eigen::Index dim,
                       const FedAvgConfig& cfg, CommunicationLedger& ledger, std::vector<Vector>* iterates) {
  Eigen::Index arm_total = 0;
  for (const auto& node : nodes) arm_total += node.arm_size(arm);
  if (arm_total == 0)
    fail(ErrorCode::EmptyGlobalArm, std::string("no site holds ") + (arm == 1 ? "treated" : "control") + " rows");

  const Eigen::Index p = features.output_dim(dim);
  Vector coef = Vector::Zero(p);
  const std::string scheme = arm == 1 ? "outcome_treated" : "outcome_control";
  DivergenceMonitor monitor(cfg.divergence_tolerance, cfg.divergence_patience);
  for (int t = 1; t <= cfg.rounds; ++t) {
    Vector next = Vector::Zero(p);
    double loss = 0.0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k].arm_size(arm) == 0) continue;
      const auto u = nodes[k].outcome_update(coef, arm, kind, features, cfg, rngs[k]);
      const double weight = static_cast<double>(u.count) / static_cast<double>(arm_total);
      next += weight * u.params.col(0);
      loss += weight * u.local_loss;
      ledger.record(LedgerEntry{t, u.site, u.float_count(), static_cast<std::uint64_t>(p), 0, 1, scheme});
    }
    coef = std::move(next);
    if (iterates) iterates->push_back(coef);
    monitor.observe(loss, t);
  }
  return OutcomeModel{kind, coef, features};
}

}  // namespace

OutcomeModelsResult fedavg_outcome_models(const FederatedDataset& fd, const FedAvgConfig& cfg,
                                          OutcomeKind kind, const FeatureMap& features) {
  check_config(cfg);
  require_valid(fd);
  const auto nodes = nodes_of(fd);
  auto rngs = site_streams(cfg, fd.num_sites());
  OutcomeModelsResult res;
  res.control = train_arm(nodes, rngs, 0, kind, features, fd.d, cfg, res.ledger,
                          cfg.record_iterates ? &res.control_iterates : nullptr);
  res.treated = train_arm(nodes, rngs, 1, kind, features, fd.d, cfg, res.ledger,
                          cfg.record_iterates ? &res.treated_iterates : nullptr);
  return res;
}

bool StandardizationResult::any_zero_variance() const {
  for (bool z : zero_variance)
    if (z) return true;
  return false;
}

StandardizationResult federated_standardize(const FederatedDataset& fd) {
  require_valid(fd);
  if (fd.size() < 2) fail(ErrorCode::InsufficientData, "standardization needs n >= 2");
  const auto nodes = nodes_of(fd);
  std::vector<StandardizationPayload> uploads;
  for (const auto& node : nodes) uploads.push_back(node.share_standardization());

  const double n = static_cast<double>(fd.size());
  StandardizationResult res;
  res.mean = Vector::Zero(fd.d);
  for (const auto& u : uploads) res.mean += (static_cast<double>(u.count) / n) * u.mean;
  // Within-site plus between-site decomposition of the pooled variance.
  res.variance = Vector::Zero(fd.d);
  for (const auto& u : uploads)
    res.variance += (static_cast<double>(u.count) / n) *
                    (u.variance.array() + (u.mean - res.mean).array().square()).matrix();

  res.map.shift = res.mean;
  res.map.scale = Vector::Ones(fd.d);
  res.zero_variance.assign(static_cast<std::size_t>(fd.d), false);
  for (Eigen::Index j = 0; j < fd.d; ++j) {
    if (res.variance(j) <= 1e-14 * std::max(1.0, res.mean(j) * res.mean(j)))
      res.zero_variance[static_cast<std::size_t>(j)] = true;  // ZeroVariance: left unscaled
    else
      res.map.scale(j) = std::sqrt(res.variance(j));
  }

  const auto broadcast = static_cast<std::uint64_t>(2 * fd.d);
  for (const auto& u : uploads)
    res.ledger.record(LedgerEntry{1, u.site, u.float_count(), broadcast, 1, 0, "standardize"});

  res.transformed.d = fd.d;
  for (const auto& node : nodes) res.transformed.sites.push_back(node.standardized(res.map));
  return res;
}

MomentExchangeResult one_shot_moment_exchange(const FederatedDataset& fd, std::optional<double> ridge) {
  require_valid(fd);
  const auto nodes = nodes_of(fd);
  MomentExchangeResult res;
  const double n = static_cast<double>(fd.size());
  res.model.proportions.resize(static_cast<Eigen::Index>(nodes.size()));
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    auto u = nodes[k].share_moments(ridge);
    res.ledger.record(LedgerEntry{1, u.site, u.float_count(), 0, 1, 0, "DW"});
    res.model.proportions(static_cast<Eigen::Index>(k)) = static_cast<double>(u.moments.count) / n;
    res.model.moments.push_back(std::move(u.moments));
  }
  return res;
}

std::uint64_t communication_cost(WeightScheme scheme, std::uint64_t rounds, std::uint64_t num_sites,
                                 std::uint64_t dim) {
  if (scheme == WeightScheme::MW) return rounds * num_sites * dim;
  return num_sites * dim + num_sites * dim * dim;
}

CommunicationLedger local_model_upload_ledger(const std::vector<LogisticParams>& local) {
  CommunicationLedger ledger;
  for (std::size_t k = 0; k < local.size(); ++k) {
    const auto floats = static_cast<std::uint64_t>(local[k].beta.size() + (local[k].has_intercept ? 1 : 0));
    ledger.record(LedgerEntry{1, static_cast<int>(k + 1), floats, 0, 0, 0, "local_propensity"});
  }
  return ledger;
}

}  // namespace fedcausal

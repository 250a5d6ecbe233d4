#include "fedcausal/experiments.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace fedcausal {

namespace fs = std::filesystem;

FederatedDataset generate(const ScenarioConfig& cfg, const ReplicationKey& key) {
  const auto spec = outcome_spec(cfg);
  return cfg.dgp == DgpKind::A ? gen_dgp_a(cfg.dgp_a, spec, key) : gen_dgp_b(cfg.dgp_b, spec, key);
}

OutcomeSpec outcome_spec(const ScenarioConfig& cfg) { return table_outcome_spec(cfg.noise_sd); }

MonteCarloValue scenario_true_ate(const ScenarioConfig& cfg) {
  RngHandle rng(cfg.seed, stream_id(StreamPurpose::TrueAte, 0, 0));
  const auto sampler = cfg.dgp == DgpKind::A ? marginal_sampler(cfg.dgp_a) : marginal_sampler(cfg.dgp_b);
  return true_ate(outcome_spec(cfg), sampler, cfg.true_ate_draws, rng);
}

// ---------------------------------------------------------------------------

FittedNuisances fit_nuisances(const FederatedDataset& fd, const EstimationSettings& s) {
  require_valid(fd);
  FittedNuisances nu;
  LogisticFitOptions opts;
  opts.intercept = s.local_intercept;
  for (const auto& site : fd.sites) {
    nu.local.push_back(fit_logistic_local(site, opts));
    const auto& p = nu.local.back();
    if (p.degenerate != Degenerate::Normal)
      nu.notes.push_back("site " + std::to_string(site.site_id) + " local score is constant (" +
                         to_string(p.degenerate) + ")");
    else if (p.diagnostics.gradient_descent_fallback)
      nu.notes.push_back("site " + std::to_string(site.site_id) + " local fit fell back to gradient ascent");
  }
  const auto local_ledger = local_model_upload_ledger(nu.local);
  nu.local_comm = local_ledger.totals();
  nu.ledger.merge(local_ledger);

  FeatureMap features;
  if (s.membership || s.outcome_models) {
    const auto st = federated_standardize(fd);
    features = st.map;
    features.intercept = true;
    nu.standardize_comm = st.ledger.totals();
    nu.ledger.merge(st.ledger);
    if (st.any_zero_variance()) nu.notes.push_back("zero-variance covariate left unscaled");
  }
  if (s.membership) {
    const auto fit = fedavg_multinomial(fd, s.fedavg, features);
    nu.mw = GlobalPropensity{nu.local, fit.params, s.clip};
    nu.mw_comm = fit.ledger.totals();
    nu.ledger.merge(fit.ledger);
  }
  if (s.density_ratio) {
    auto ex = one_shot_moment_exchange(fd, s.ridge);
    nu.dw = GlobalPropensity{nu.local, std::move(ex.model), s.clip};
    nu.dw_comm = ex.ledger.totals();
    nu.ledger.merge(ex.ledger);
  }
  if (s.outcome_models) {
    auto om = fedavg_outcome_models(fd, s.outcome_fedavg, OutcomeKind::Linear, features);
    nu.mu1 = as_batch(om.treated);
    nu.mu0 = as_batch(om.control);
    nu.outcome_comm = om.ledger.totals();
    nu.ledger.merge(om.ledger);
  }
  return nu;
}

namespace {

GlobalPropensity oracle_gp(const ScenarioConfig& cfg) {
  auto gp = cfg.dgp == DgpKind::A ? oracle_global_propensity(cfg.dgp_a) : oracle_global_propensity(cfg.dgp_b);
  gp.clip = cfg.clip;
  return gp;
}

bool wants(const ScenarioConfig& cfg, const std::string& fragment) {
  for (const auto& e : cfg.estimators)
    if (e.find(fragment) != std::string::npos) return true;
  return false;
}

}  // namespace

FittedNuisances scenario_nuisances(const ScenarioConfig& cfg, const FederatedDataset& fd,
                                   std::uint64_t replication) {
  const auto oracle = oracle_gp(cfg);
  const bool linear_outcomes = cfg.outcome_model == OutcomeMode::Linear && wants(cfg, "AIPW");
  FittedNuisances nu;
  if (cfg.nuisance == NuisanceMode::Estimated) {
    EstimationSettings s;
    s.local_intercept = cfg.local_intercept;
    s.fedavg = cfg.fedavg;
    s.fedavg.seed = cfg.seed;
    s.fedavg.replication = replication;
    s.outcome_fedavg = cfg.outcome_fedavg;
    s.outcome_fedavg.seed = cfg.seed;
    s.outcome_fedavg.replication = replication;
    s.ridge = cfg.ridge;
    s.clip = cfg.clip;
    s.membership = wants(cfg, "-MW");
    s.density_ratio = wants(cfg, "-DW");
    s.outcome_models = linear_outcomes;
    nu = fit_nuisances(fd, s);
  } else {
    nu.local = oracle.local;
    nu.mw = oracle;
    nu.dw = oracle;
    if (linear_outcomes) {
      const auto st = federated_standardize(fd);
      FeatureMap features = st.map;
      features.intercept = true;
      FedAvgConfig oc = cfg.outcome_fedavg;
      oc.seed = cfg.seed;
      oc.replication = replication;
      auto om = fedavg_outcome_models(fd, oc, OutcomeKind::Linear, features);
      nu.mu1 = as_batch(om.treated);
      nu.mu0 = as_batch(om.control);
      nu.standardize_comm = st.ledger.totals();
      nu.outcome_comm = om.ledger.totals();
      nu.ledger.merge(st.ledger);
      nu.ledger.merge(om.ledger);
    }
  }
  nu.oracle_propensity = as_batch(oracle);
  if (cfg.outcome_model == OutcomeMode::Oracle) {
    const auto spec = outcome_spec(cfg);
    nu.mu1 = batched(spec.treated_mean);
    nu.mu0 = batched(spec.control_mean);
  }
  return nu;
}

EstimatorOutcome evaluate_estimator(const std::string& name, const FederatedDataset& fd,
                                    const FittedNuisances& nu, bool keep_terms) {
  EstimatorOutcome out;
  out.estimator = name;
  out.form = name.find("AIPW") != std::string::npos ? EstimatorForm::AIPW : EstimatorForm::IPW;
  const bool aipw = out.form == EstimatorForm::AIPW;
  const auto k = static_cast<std::uint64_t>(fd.num_sites());
  // Every site reports its partial sum and count to the server.
  const LedgerTotals final_round{k, 0, k, 0};
  try {
    const BatchFn mu1 = aipw ? nu.mu1 : BatchFn{};
    const BatchFn mu0 = aipw ? nu.mu0 : BatchFn{};
    if (aipw && !(mu1 && mu0)) fail(ErrorCode::InvalidArgument, name + " needs outcome models");
    EstimateReport r;
    std::vector<BatchFn> propensity;
    LedgerTotals comm = final_round;
    if (name.rfind("Fed-", 0) == 0) {
      const bool mw = name.size() >= 3 && name.compare(name.size() - 3, 3, "-MW") == 0;
      const auto& gp = mw ? nu.mw : nu.dw;
      if (!gp) fail(ErrorCode::InvalidArgument, name + ": weight model was not fitted");
      r = estimate_federated(fd, *gp, mu1, mu0, out.form);
      r.scheme = mw ? "MW" : "DW";
      for (std::size_t j = 0; j < fd.num_sites(); ++j)
        r.o_local.push_back(overlap_local(fd.sites[j], as_batch(gp->local[j])));
      propensity = {as_batch(*gp)};
      comm += nu.local_comm;
      comm += mw ? nu.mw_comm : nu.dw_comm;
      if (mw || aipw) comm += nu.standardize_comm;
    } else if (name.rfind("Meta-SW-", 0) == 0) {
      for (const auto& l : nu.local) propensity.push_back(as_batch(l));
      r = estimate_meta(fd, propensity, mu1, mu0, out.form);
      if (aipw) comm += nu.standardize_comm;
    } else if (name.rfind("Centralized-Oracle-", 0) == 0) {
      if (!nu.oracle_propensity) fail(ErrorCode::InvalidArgument, name + " needs the generating propensity");
      r = estimate_centralized(fd, NuisanceBundle{nu.oracle_propensity, mu1, mu0}, out.form);
      propensity = {nu.oracle_propensity};
      // Pooling ships every record: d covariates, w and y.
      comm = LedgerTotals{static_cast<std::uint64_t>(fd.size() * (fd.d + 2)), 0, k, 0};
    } else {
      fail(ErrorCode::ConfigError, "unknown estimator '" + name + "'");
    }
    if (aipw) comm += nu.outcome_comm;
    r.estimator = name;
    r.communication = comm;
    for (const auto& note : nu.notes) r.notes.push_back(note);
    if (keep_terms) out.terms = terms_by_site(fd, propensity, mu1, mu0, out.form);
    out.report = std::move(r);
  } catch (const Error& e) {
    out.error = e.code();
    out.message = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------

const EstimatorSummary& RunSummary::at(const std::string& estimator) const {
  for (const auto& e : estimators)
    if (e.estimator == estimator) return e;
  fail(ErrorCode::InvalidArgument, "no summary for estimator '" + estimator + "'");
}

std::string raw_csv_header(std::size_t num_sites) {
  return "replication,attempt,status," + report_csv_header(num_sites) + ",upload_floats";
}

std::string summary_csv_header() {
  return "scenario,dgp,regime,estimator,ok,undefined,failed,true_ate,true_ate_se,mean,bias,mc_variance,se,"
         "mean_var_plugin,coverage,mean_o_global,mean_upload_floats";
}

std::string summary_csv_row(const RunSummary& s, const EstimatorSummary& e) {
  std::ostringstream os;
  const auto num = [&](double v) { return e.ok > 0 ? format_double(v) : std::string(); };
  os << s.name << ',' << to_string(s.dgp) << ',' << to_string(s.regime) << ',' << e.estimator << ',' << e.ok << ','
     << e.undefined << ',' << e.failed << ',' << format_double(s.truth.value) << ',' << format_double(s.truth.se)
     << ',' << num(e.mean) << ',' << num(e.bias) << ',' << (e.ok > 1 ? format_double(e.mc_variance) : "") << ','
     << (e.ok > 1 ? format_double(e.se) : "") << ',' << num(e.mean_var_plugin) << ','
     << (e.ci_count > 0 ? format_double(e.coverage) : "") << ',' << num(e.mean_o_global) << ','
     << num(e.mean_upload_floats);
  return os.str();
}

namespace {

std::string error_row(const EstimatorOutcome& o, std::size_t num_sites) {
  // estimator,form then empty report fields.
  std::string row = o.estimator + "," + to_string(o.form);
  const std::size_t empty = 6 + num_sites + 1;
  for (std::size_t i = 0; i < empty; ++i) row += ',';
  return row + ",";
}

std::vector<std::string> raw_rows(const ReplicationRecord& rec, std::size_t num_sites) {
  std::vector<std::string> rows;
  if (rec.aborted) return rows;
  for (const auto& o : rec.outcomes) {
    std::string prefix = std::to_string(rec.replication) + "," + std::to_string(rec.attempt) + ",";
    if (o.report) {
      rows.push_back(prefix + "ok," + report_csv_row(*o.report, num_sites) + "," +
                     std::to_string(o.report->communication.upload_floats));
    } else {
      rows.push_back(prefix + std::string(to_string(*o.error)) + "," + error_row(o, num_sites));
    }
  }
  return rows;
}

bool needs_both_arms(const ScenarioConfig& cfg, std::size_t site) {
  const std::size_t control_only = cfg.dgp == DgpKind::A ? cfg.dgp_a.control_only_site : cfg.dgp_b.control_only_site;
  return !(cfg.regime == OverlapRegime::None && site == control_only);
}

struct ReplicationResult {
  ReplicationRecord record;
  std::vector<std::string> log;
  std::optional<ScoreSample> scores;
};

ReplicationResult run_replication(const ScenarioConfig& cfg, std::uint64_t rep, bool want_scores) {
  ReplicationResult res;
  auto& rec = res.record;
  rec.replication = rep;
  const std::string tag = "replication " + std::to_string(rep);

  FederatedDataset fd;
  bool have_data = false;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    rec.attempt = static_cast<std::uint64_t>(attempt);
    try {
      fd = generate(cfg, ReplicationKey{cfg.seed, rep, rec.attempt});
    } catch (const Error& e) {
      rec.aborted = true;
      rec.abort_reason = std::string(to_string(e.code())) + ": " + e.what();
      res.log.push_back(tag + " aborted: " + rec.abort_reason);
      return res;
    }
    std::string missing;
    for (std::size_t k = 0; k < fd.num_sites(); ++k) {
      const auto t = fd.sites[k].treated_count();
      if (needs_both_arms(cfg, k) && (t == 0 || t == fd.sites[k].size()))
        missing += (missing.empty() ? "" : ", ") + std::to_string(k + 1);
    }
    if (missing.empty()) {
      have_data = true;
      break;
    }
    res.log.push_back(tag + " attempt " + std::to_string(attempt) + ": site " + missing +
                      " drew a single treatment arm, regenerating");
  }
  if (!have_data) {
    rec.aborted = true;
    rec.abort_reason = "no attempt produced both arms at every site";
    res.log.push_back(tag + " aborted: " + rec.abort_reason);
    return res;
  }
  for (const auto& s : fd.sites) rec.treated_per_site.push_back(s.treated_count());

  FittedNuisances nu;
  try {
    nu = scenario_nuisances(cfg, fd, rep);
  } catch (const Error& e) {
    rec.aborted = true;
    rec.abort_reason = std::string(to_string(e.code())) + ": " + e.what();
    res.log.push_back(tag + " aborted while fitting nuisances: " + rec.abort_reason);
    return res;
  }

  // Overlap of the shared score against the weighted local overlaps.
  const auto& shared = nu.dw ? *nu.dw : *nu.mw;
  try {
    const auto global = as_batch(shared);
    rec.o_global = overlap_global(fd, global);
    const Vector rho = site_proportions(fd);
    double weighted = 0.0;
    for (std::size_t k = 0; k < fd.num_sites(); ++k) {
      const double o = overlap_local(fd.sites[k], as_batch(nu.local[k]));
      weighted = std::isinf(o) ? o : weighted + rho(static_cast<Eigen::Index>(k)) * o;
      if (std::isinf(weighted)) break;
    }
    rec.o_local_weighted = weighted;
    if (want_scores && fd.num_sites() > 1) {
      const auto& site = fd.sites[1];
      res.scores = ScoreSample{predict_local(nu.local[1], site.x), global(site.x), site.w};
    }
  } catch (const Error& e) {
    res.log.push_back(tag + ": overlap diagnostics unavailable: " + e.what());
    rec.o_global = std::numeric_limits<double>::quiet_NaN();
    rec.o_local_weighted = std::numeric_limits<double>::quiet_NaN();
  }

  const bool bootstrap = cfg.bootstrap_b > 0;
  for (std::size_t i = 0; i < cfg.estimators.size(); ++i) {
    auto out = evaluate_estimator(cfg.estimators[i], fd, nu, bootstrap);
    if (out.report && bootstrap) {
      RngHandle rng(cfg.seed, stream_id(StreamPurpose::Bootstrap, rep, i));
      out.report->ci = bootstrap_terms(out.terms, cfg.bootstrap_b, cfg.bootstrap_level, rng).interval;
    }
    out.terms.clear();
    if (out.error && *out.error != ErrorCode::MetaUndefined)
      res.log.push_back(tag + " " + out.estimator + " failed: " + out.message);
    rec.outcomes.push_back(std::move(out));
  }
  return res;
}

EstimatorSummary summarize_estimator(const std::string& name, const std::vector<ReplicationRecord>& records,
                                     double truth) {
  EstimatorSummary s;
  s.estimator = name;
  std::vector<double> ok_values;
  double var_plugin = 0.0, o_global = 0.0, upload = 0.0;
  int covered = 0, o_count = 0;
  for (const auto& rec : records) {
    if (rec.aborted) continue;
    const EstimatorOutcome* found = nullptr;
    for (const auto& o : rec.outcomes)
      if (o.estimator == name) found = &o;
    if (!found) continue;
    if (!found->report) {
      s.estimates.push_back(std::numeric_limits<double>::quiet_NaN());
      if (found->error == ErrorCode::MetaUndefined) ++s.undefined;
      else ++s.failed;
      continue;
    }
    const auto& r = *found->report;
    s.estimates.push_back(r.tau_hat);
    ok_values.push_back(r.tau_hat);
    var_plugin += r.var_plugin;
    upload += static_cast<double>(r.communication.upload_floats);
    if (!std::isnan(r.o_global)) {
      o_global += r.o_global;
      ++o_count;
    }
    if (r.ci) {
      ++s.ci_count;
      if (r.ci->lo <= truth && truth <= r.ci->hi) ++covered;
    }
  }
  s.ok = static_cast<int>(ok_values.size());
  if (s.ok > 0) {
    const auto m = summarize(ok_values);
    const double n = static_cast<double>(s.ok);
    s.mean = m.mean;
    s.bias = m.mean - truth;
    s.mc_variance = m.variance;
    s.se = m.se;
    s.mean_var_plugin = var_plugin / n;
    s.mean_o_global = o_count > 0 ? o_global / o_count : std::numeric_limits<double>::quiet_NaN();
    s.mean_upload_floats = upload / n;
  }
  if (s.ci_count > 0) s.coverage = static_cast<double>(covered) / static_cast<double>(s.ci_count);
  return s;
}

void write_lines(const fs::path& path, const std::string& header, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  out << header << '\n';
  for (const auto& l : lines) out << l << '\n';
  if (!out) fail(ErrorCode::IoError, "write failed for '" + path.string() + "'");
}

}  // namespace

RunSummary run_scenario(const ScenarioConfig& cfg, const RunOptions& opts) {
  check_config(cfg);
  RunSummary summary;
  summary.name = cfg.name;
  summary.dgp = cfg.dgp;
  summary.regime = cfg.regime;
  summary.replications = cfg.replications;
  summary.truth = scenario_true_ate(cfg);

  const auto m = static_cast<std::size_t>(cfg.replications);
  std::vector<ReplicationResult> results(m);
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (std::size_t i = next++; i < m; i = next++) {
      try {
        results[i] = run_replication(cfg, i + 1, i == 0);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(opts.jobs, cfg.replications));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  const std::size_t k = cfg.num_sites();
  std::vector<std::string> raw;
  for (auto& r : results) {
    for (auto& line : r.log) summary.log.push_back(std::move(line));
    if (r.record.aborted) ++summary.aborted;
    if (r.record.attempt > 0) ++summary.regenerated;
    if (r.scores) summary.scores = std::move(r.scores);
    for (auto& row : raw_rows(r.record, k)) raw.push_back(std::move(row));
    summary.records.push_back(std::move(r.record));
  }
  for (const auto& name : cfg.estimators)
    summary.estimators.push_back(summarize_estimator(name, summary.records, summary.truth.value));

  if (opts.write_files) {
    const fs::path dir = fs::path(cfg.output_dir) / cfg.name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::IoError, "cannot create '" + dir.string() + "': " + ec.message());
    summary.output_dir = dir.string();
    write_lines(dir / "raw.csv", raw_csv_header(k), raw);
    std::vector<std::string> rows;
    for (const auto& e : summary.estimators) rows.push_back(summary_csv_row(summary, e));
    write_lines(dir / "summary.csv", summary_csv_header(), rows);
    write_lines(dir / "run.log", "# " + cfg.name, summary.log);
    {
      std::ofstream out(dir / "config.json");
      out << config_to_json(cfg).dump(2) << '\n';
    }
    if (cfg.nuisance == NuisanceMode::Estimated || cfg.outcome_model == OutcomeMode::Linear) {
      // Ledger of the first usable replication.
      for (const auto& rec : summary.records) {
        if (rec.aborted) continue;
        const auto fd = generate(cfg, ReplicationKey{cfg.seed, rec.replication, rec.attempt});
        const auto nu = scenario_nuisances(cfg, fd, rec.replication);
        std::ofstream out(dir / "ledger.csv");
        nu.ledger.write_csv(out);
        break;
      }
    }
    emit_plotdata(summary, (dir / "raw.csv").string(), dir.string());
  }
  if (!opts.keep_records) summary.records.clear();
  return summary;
}

std::vector<RunSummary> run_matrix(const std::vector<ScenarioConfig>& configs, const RunOptions& opts) {
  if (configs.empty()) fail(ErrorCode::ConfigError, "scenario list is empty");
  for (const auto& c : configs) check_config(c);
  // Duplicate scenario names get a numbered directory so no run overwrites another.
  std::vector<ScenarioConfig> unique = configs;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    int copies = 0;
    for (std::size_t j = 0; j < i; ++j)
      if (configs[j].name == configs[i].name && configs[j].output_dir == configs[i].output_dir) ++copies;
    if (copies > 0) unique[i].name += "_" + std::to_string(copies + 1);
  }
  std::vector<RunSummary> out;
  for (const auto& c : unique) out.push_back(run_scenario(c, opts));
  return out;
}

void write_combined_summary(const std::vector<RunSummary>& runs, const std::string& path) {
  std::vector<std::string> rows;
  for (const auto& r : runs)
    for (const auto& e : r.estimators) rows.push_back(summary_csv_row(r, e));
  write_lines(path, summary_csv_header(), rows);
}

}  // namespace fedcausal

#include "fedcausal/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace fedcausal {

std::string to_string(EstimatorForm f) { return f == EstimatorForm::IPW ? "IPW" : "AIPW"; }

namespace {

void check_positivity(int w, double e) {
  if (w == 1 && !(e > 0.0))
    fail(ErrorCode::DivisionByZeroPropensity, "treated row with e(x)=" + format_double(e));
  if (w == 0 && !(e < 1.0))
    fail(ErrorCode::DivisionByZeroPropensity, "control row with e(x)=" + format_double(e));
}

}  // namespace

double ipw_term(int w, double y, double e) {
  check_positivity(w, e);
  return w == 1 ? y / e : -y / (1.0 - e);
}

double aipw_term(int w, double y, double e, double mu1, double mu0) {
  check_positivity(w, e);
  const double aug = w == 1 ? (y - mu1) / e : -(y - mu0) / (1.0 - e);
  return mu1 - mu0 + aug;
}

BatchFn as_batch(const GlobalPropensity& gp) {
  return [gp](const Covariates& x) { return global_propensity(gp, x); };
}

BatchFn as_batch(const LogisticParams& local) {
  return [local](const Covariates& x) { return predict_local(local, x); };
}

BatchFn as_batch(const OutcomeModel& model) {
  return [model](const Covariates& x) { return model.predict(x); };
}

std::string report_csv_header(std::size_t num_sites) {
  std::string h = "estimator,form,scheme,tau_hat,var_plugin,ci_lo,ci_hi,o_global";
  for (std::size_t k = 1; k <= num_sites; ++k) h += ",o_k_" + std::to_string(k);
  return h + ",failed_resamples";
}

std::string report_csv_row(const EstimateReport& r, std::size_t num_sites) {
  std::ostringstream os;
  os << r.estimator << ',' << to_string(r.form) << ',' << r.scheme << ',' << format_double(r.tau_hat) << ','
     << format_double(r.var_plugin) << ',';
  if (r.ci) os << format_double(r.ci->lo) << ',' << format_double(r.ci->hi);
  else os << ',';
  os << ',' << format_double(r.o_global);
  for (std::size_t k = 0; k < num_sites; ++k)
    os << ',' << (k < r.o_local.size() ? format_double(r.o_local[k]) : std::string());
  os << ',' << (r.ci ? r.ci->failed : 0);
  return os.str();
}

Vector site_terms(const SiteDataset& site, const Vector& e, const Vector* mu1, const Vector* mu0,
                  EstimatorForm form) {
  const Eigen::Index n = site.size();
  if (e.size() != n) fail(ErrorCode::DimensionMismatch, "propensity vector does not match site size");
  if (form == EstimatorForm::AIPW && (!mu1 || !mu0))
    fail(ErrorCode::InvalidArgument, "AIPW requires both outcome models");
  Vector t(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    try {
      t(i) = form == EstimatorForm::IPW ? ipw_term(site.w(i), site.y(i), e(i))
                                        : aipw_term(site.w(i), site.y(i), e(i), (*mu1)(i), (*mu0)(i));
    } catch (const Error& err) {
      fail(err.code(), "site " + std::to_string(site.site_id) + " row " + std::to_string(i) + ": " + err.what());
    }
  }
  return t;
}

namespace {

struct SiteEvaluation {
  Vector terms;
  Vector e;
};

SiteEvaluation evaluate_site(const SiteDataset& site, const BatchFn& propensity, const BatchFn& mu1,
                             const BatchFn& mu0, EstimatorForm form) {
  SiteEvaluation ev;
  ev.e = propensity(site.x);
  if (form == EstimatorForm::AIPW) {
    if (!mu1 || !mu0) fail(ErrorCode::InvalidArgument, "AIPW requires both outcome models");
    const Vector m1 = mu1(site.x), m0 = mu0(site.x);
    ev.terms = site_terms(site, ev.e, &m1, &m0, form);
  } else {
    ev.terms = site_terms(site, ev.e, nullptr, nullptr, form);
  }
  return ev;
}

double population_variance(const Vector& v) {
  if (v.size() == 0) return 0.0;
  const double m = v.mean();
  return (v.array() - m).square().mean();
}

}  // namespace

double overlap_of_scores(const Vector& e) {
  if (e.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    if (!(e(i) > 0.0 && e(i) < 1.0)) return std::numeric_limits<double>::infinity();
    acc += 1.0 / (e(i) * (1.0 - e(i)));
  }
  return acc / static_cast<double>(e.size());
}

double overlap_global(const FederatedDataset& fd, const BatchFn& e) {
  double acc = 0.0;
  for (const auto& s : fd.sites) {
    const double o = overlap_local(s, e);
    if (std::isinf(o)) return o;
    acc += o * static_cast<double>(s.size());
  }
  return acc / static_cast<double>(fd.size());
}

double overlap_local(const SiteDataset& site, const BatchFn& e_k) { return overlap_of_scores(e_k(site.x)); }

EstimateReport estimate_centralized(const FederatedDataset& fd, const NuisanceBundle& nb, EstimatorForm form) {
  require_valid(fd);
  Vector all(fd.size());
  Vector all_e(fd.size());
  Eigen::Index off = 0;
  for (const auto& s : fd.sites) {
    const auto ev = evaluate_site(s, nb.propensity, nb.mu1, nb.mu0, form);
    all.segment(off, s.size()) = ev.terms;
    all_e.segment(off, s.size()) = ev.e;
    off += s.size();
  }
  EstimateReport r;
  r.estimator = "Centralized-Oracle-" + to_string(form);
  r.form = form;
  r.scheme = "pooled";
  r.tau_hat = all.sum() / static_cast<double>(all.size());
  r.var_plugin = population_variance(all) / static_cast<double>(all.size());
  r.o_global = overlap_of_scores(all_e);
  return r;
}

EstimateReport estimate_meta(const FederatedDataset& fd, const std::vector<BatchFn>& local_propensities,
                             const BatchFn& mu1, const BatchFn& mu0, EstimatorForm form) {
  require_valid(fd);
  if (local_propensities.size() != fd.num_sites())
    fail(ErrorCode::DimensionMismatch, "need one local propensity per site");
  for (const auto& s : fd.sites) {
    const auto treated = s.treated_count();
    if (treated == 0 || treated == s.size())
      fail(ErrorCode::MetaUndefined, "site " + std::to_string(s.site_id) + " has a single treatment arm");
  }
  EstimateReport r;
  r.estimator = "Meta-SW-" + to_string(form);
  r.form = form;
  r.scheme = "local";
  // No shared score: the global overlap does not apply.
  r.o_global = std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(fd.size());
  for (std::size_t k = 0; k < fd.num_sites(); ++k) {
    const auto& s = fd.sites[k];
    const auto ev = evaluate_site(s, local_propensities[k], mu1, mu0, form);
    const double nk = static_cast<double>(s.size());
    const double tau_k = ev.terms.mean();
    const double v_k = population_variance(ev.terms);
    r.site_tau.push_back(tau_k);
    r.site_term_variance.push_back(v_k);
    r.o_local.push_back(overlap_of_scores(ev.e));
    r.tau_hat += (nk / n) * tau_k;
    r.var_plugin += (nk / n) * (nk / n) * v_k / nk;
  }
  return r;
}

EstimateReport estimate_federated(const FederatedDataset& fd, const NuisanceBundle& nb, EstimatorForm form) {
  require_valid(fd);
  EstimateReport r;
  r.estimator = "Fed-" + to_string(form);
  r.form = form;
  r.scheme = "global";
  const double n = static_cast<double>(fd.size());
  double sum_sq = 0.0, overlap_acc = 0.0;
  bool overlap_infinite = false;
  for (const auto& s : fd.sites) {
    const auto ev = evaluate_site(s, nb.propensity, nb.mu1, nb.mu0, form);
    const double nk = static_cast<double>(s.size());
    const double tau_k = ev.terms.mean();
    r.site_tau.push_back(tau_k);
    r.site_term_variance.push_back(population_variance(ev.terms));
    r.tau_hat += (nk / n) * tau_k;
    sum_sq += ev.terms.squaredNorm();
    const double o = overlap_of_scores(ev.e);
    if (std::isinf(o)) overlap_infinite = true;
    else overlap_acc += o * nk;
  }
  r.var_plugin = std::max(0.0, sum_sq / n - r.tau_hat * r.tau_hat) / n;
  r.o_global = overlap_infinite ? std::numeric_limits<double>::infinity() : overlap_acc / n;
  return r;
}

EstimateReport estimate_federated(const FederatedDataset& fd, const GlobalPropensity& gp, const BatchFn& mu1,
                                  const BatchFn& mu0, EstimatorForm form) {
  auto r = estimate_federated(fd, NuisanceBundle{as_batch(gp), mu1, mu0}, form);
  r.estimator += "-" + to_string(gp.scheme());
  r.scheme = to_string(gp.scheme());
  if (gp.clip > 0.0) r.notes.push_back("clip=" + format_double(gp.clip));
  return r;
}

double variance_ipw_plugin(const FederatedDataset& fd, const BatchFn& e) {
  require_valid(fd);
  const double n = static_cast<double>(fd.size());
  double tau = 0.0, second = 0.0;
  for (const auto& s : fd.sites) {
    const Vector es = e(s.x);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      check_positivity(s.w(i), es(i));
      const double treated = s.w(i) == 1 ? s.y(i) / es(i) : 0.0;
      const double control = s.w(i) == 0 ? s.y(i) / (1.0 - es(i)) : 0.0;
      tau += treated - control;
      second += treated * treated + control * control;
    }
  }
  tau /= n;
  return (second / n - tau * tau) / n;
}

double variance_aipw_plugin(const FederatedDataset& fd, const BatchFn& e, const BatchFn& mu1, const BatchFn& mu0) {
  require_valid(fd);
  const double n = static_cast<double>(fd.size());
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& s : fd.sites) {
    const auto ev = evaluate_site(s, e, mu1, mu0, EstimatorForm::AIPW);
    sum += ev.terms.sum();
    sum_sq += ev.terms.squaredNorm();
  }
  const double tau = sum / n;
  return (sum_sq / n - tau * tau) / n;
}

double variance_meta_decomposition(const std::vector<double>& site_variances, const Vector& proportions,
                                   const std::vector<double>& site_taus, double n) {
  const auto k = static_cast<std::size_t>(proportions.size());
  if (site_variances.size() != k || site_taus.size() != k)
    fail(ErrorCode::DimensionMismatch, "meta variance inputs differ in length");
  if (!(n > 0)) fail(ErrorCode::InvalidArgument, "n must be positive");
  double within = 0.0, mean_tau = 0.0, second = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double rho = proportions(static_cast<Eigen::Index>(j));
    within += rho * site_variances[j];
    mean_tau += rho * site_taus[j];
    second += rho * site_taus[j] * site_taus[j];
  }
  const double between = std::max(0.0, second - mean_tau * mean_tau);
  return within / n + between / n;
}

// ---------------------------------------------------------------------------

double empirical_quantile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorCode::InvalidArgument, "quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) fail(ErrorCode::InvalidArgument, "quantile level outside [0, 1]");
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double v_lo = values[lo];
  if (lo + 1 >= values.size()) return v_lo;
  const double v_hi = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo + 1), values.end());
  return v_lo + (h - static_cast<double>(lo)) * (v_hi - v_lo);
}

FederatedDataset resample_within_sites(const FederatedDataset& fd, RngHandle& rng) {
  FederatedDataset out;
  out.d = fd.d;
  out.sites.reserve(fd.num_sites());
  for (const auto& s : fd.sites) {
    SiteDataset r;
    r.site_id = s.site_id;
    r.x.resize(s.size(), s.dim());
    r.w.resize(s.size());
    r.y.resize(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      const Eigen::Index j = rng.index(s.size());
      r.x.row(i) = s.x.row(j);
      r.w(i) = s.w(j);
      r.y(i) = s.y(j);
    }
    out.sites.push_back(std::move(r));
  }
  return out;
}

BootstrapResult bootstrap_ci(const FederatedDataset& fd, const DatasetEstimator& estimator, int resamples,
                             double level, RngHandle& rng) {
  if (resamples < 2) fail(ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::InvalidArgument, "confidence level outside (0, 1)");
  BootstrapResult res;
  res.interval.level = level;
  res.interval.resamples = resamples;
  res.estimates.reserve(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    const auto boot = resample_within_sites(fd, rng);
    try {
      res.estimates.push_back(estimator(boot));
    } catch (const Error&) {
      ++res.interval.failed;
    }
  }
  if (res.interval.failed * 5 > resamples)
    fail(ErrorCode::TooManyFailedResamples,
         std::to_string(res.interval.failed) + " of " + std::to_string(resamples) + " resamples failed");
  const double alpha = 1.0 - level;
  res.interval.lo = empirical_quantile(res.estimates, alpha / 2.0);
  res.interval.hi = empirical_quantile(res.estimates, 1.0 - alpha / 2.0);
  return res;
}

std::vector<Vector> terms_by_site(const FederatedDataset& fd, const std::vector<BatchFn>& propensity,
                                  const BatchFn& mu1, const BatchFn& mu0, EstimatorForm form) {
  if (propensity.size() != 1 && propensity.size() != fd.num_sites())
    fail(ErrorCode::DimensionMismatch, "need one shared propensity or one per site");
  std::vector<Vector> out;
  out.reserve(fd.num_sites());
  for (std::size_t k = 0; k < fd.num_sites(); ++k) {
    const auto& e = propensity.size() == 1 ? propensity.front() : propensity[k];
    out.push_back(evaluate_site(fd.sites[k], e, mu1, mu0, form).terms);
  }
  return out;
}

BootstrapResult bootstrap_terms(const std::vector<Vector>& site_terms, int resamples, double level,
                                RngHandle& rng) {
  if (resamples < 2) fail(ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::InvalidArgument, "confidence level outside (0, 1)");
  double n = 0.0;
  for (const auto& t : site_terms) n += static_cast<double>(t.size());
  BootstrapResult res;
  res.interval.level = level;
  res.interval.resamples = resamples;
  res.estimates.reserve(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    double est = 0.0;
    for (const auto& t : site_terms) {
      const Eigen::Index nk = t.size();
      double sum = 0.0;
      for (Eigen::Index i = 0; i < nk; ++i) sum += t(rng.index(nk));
      est += (static_cast<double>(nk) / n) * (sum / static_cast<double>(nk));
    }
    res.estimates.push_back(est);
  }
  const double alpha = 1.0 - level;
  res.interval.lo = empirical_quantile(res.estimates, alpha / 2.0);
  res.interval.hi = empirical_quantile(res.estimates, 1.0 - alpha / 2.0);
  return res;
}

// ---------------------------------------------------------------------------

SampleSummary summarize(const std::vector<double>& values) {
  SampleSummary s;
  const auto m = static_cast<double>(values.size());
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= m;
  if (values.size() > 1) {
    for (double v : values) s.variance += (v - s.mean) * (v - s.mean);
    s.variance /= (m - 1.0);
  }
  s.se = std::sqrt(s.variance / m);
  return s;
}

VarianceDifference variance_difference_jackknife(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 3)
    fail(ErrorCode::InvalidArgument, "jackknife needs paired samples of size >= 3");
  const std::size_t m = a.size();
  VarianceDifference out;
  out.difference = summarize(a).variance - summarize(b).variance;

  std::vector<double> loo(m);
  std::vector<double> sa, sb;
  sa.reserve(m - 1);
  sb.reserve(m - 1);
  for (std::size_t i = 0; i < m; ++i) {
    sa.clear();
    sb.clear();
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      sa.push_back(a[j]);
      sb.push_back(b[j]);
    }
    loo[i] = summarize(sa).variance - summarize(sb).variance;
  }
  double mean = 0.0;
  for (double v : loo) mean += v;
  mean /= static_cast<double>(m);
  double acc = 0.0;
  for (double v : loo) acc += (v - mean) * (v - mean);
  out.jackknife_se = std::sqrt(static_cast<double>(m - 1) / static_cast<double>(m) * acc);
  return out;
}

}  // namespace fedcausal

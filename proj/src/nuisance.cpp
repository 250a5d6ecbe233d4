#include "fedcausal/nuisance.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace fedcausal {

Covariates FeatureMap::apply(const Covariates& x) const {
  const Eigen::Index d = x.cols();
  Covariates z(x.rows(), output_dim(d));
  if (shift.size() == 0) {
    z.leftCols(d) = x;
  } else {
    if (shift.size() != d || scale.size() != d)
      fail(ErrorCode::DimensionMismatch, "feature map built for a different dimension");
    z.leftCols(d) = (x.rowwise() - shift.transpose()).array().rowwise() / scale.transpose().array();
  }
  if (intercept) z.col(d).setOnes();
  return z;
}

Vector FeatureMap::apply(const ConstVectorRef& x) const {
  Covariates row = x.transpose();
  return apply(row).row(0).transpose();
}

std::string to_string(Degenerate d) {
  switch (d) {
    case Degenerate::Normal: return "normal";
    case Degenerate::AllControl: return "all_control";
    case Degenerate::AllTreated: return "all_treated";
  }
  return "unknown";
}

std::string to_string(WeightScheme s) { return s == WeightScheme::MW ? "MW" : "DW"; }

// ---------------------------------------------------------------------------

namespace {

Covariates design(const Covariates& x, bool intercept) {
  FeatureMap map;
  map.intercept = intercept;
  return map.apply(x);
}

Vector packed(const LogisticParams& p) {
  Vector theta(p.beta.size() + (p.has_intercept ? 1 : 0));
  theta.head(p.beta.size()) = p.beta;
  if (p.has_intercept) theta(p.beta.size()) = p.intercept;
  return theta;
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double mean_log_likelihood(const Covariates& z, const IntVector& w, const Vector& theta) {
  const Vector eta = z * theta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += (w(i) == 1 ? eta(i) : 0.0) - softplus(eta(i));
  return ll / static_cast<double>(eta.size());
}

Vector probabilities(const Covariates& z, const Vector& theta) {
  return (z * theta).unaryExpr([](double v) { return sigmoid(v); });
}

}  // namespace

LogisticParams fit_logistic_local(const SiteDataset& site, const LogisticFitOptions& opts) {
  const Eigen::Index n = site.size();
  if (n < 1) fail(ErrorCode::EmptySite, "cannot fit a propensity model on an empty site");
  LogisticParams out;
  out.has_intercept = opts.intercept;
  out.beta = Vector::Zero(site.dim());

  const Eigen::Index treated = site.treated_count();
  if (treated == 0 || treated == n) {
    out.degenerate = treated == 0 ? Degenerate::AllControl : Degenerate::AllTreated;
    out.diagnostics.converged = true;
    return out;
  }

  const Covariates z = design(site.x, opts.intercept);
  const Vector wd = site.w.cast<double>();
  Vector theta = Vector::Zero(z.cols());
  double ll = mean_log_likelihood(z, site.w, theta);
  auto& diag = out.diagnostics;

  for (diag.iterations = 0; diag.iterations < opts.max_iterations; ++diag.iterations) {
    const Vector prob = probabilities(z, theta);
    const Vector grad = z.transpose() * (wd - prob) / static_cast<double>(n);
    diag.gradient_norm = grad.norm();
    if (diag.gradient_norm < opts.tolerance) {
      diag.converged = true;
      break;
    }

    Vector step;
    if (!diag.gradient_descent_fallback) {
      const Vector s = prob.array() * (1.0 - prob.array());
      const Matrix hess = z.transpose() * s.asDiagonal() * z / static_cast<double>(n);
      Eigen::LDLT<Matrix> ldlt(hess);
      const double floor = 1e-14 * std::max(1.0, hess.diagonal().maxCoeff());
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
          ldlt.vectorD().minCoeff() <= floor) {
        diag.gradient_descent_fallback = true;  // SingularHessian
      } else {
        step = ldlt.solve(grad);
      }
    }
    if (diag.gradient_descent_fallback) step = grad;

    // Step halving keeps the likelihood monotone.
    double t = 1.0, ll_new = ll;
    Vector candidate;
    for (int half = 0; half < 60; ++half, t *= 0.5) {
      candidate = theta + t * step;
      ll_new = mean_log_likelihood(z, site.w, candidate);
      if (ll_new >= ll - 1e-15) break;
    }
    theta = candidate;
    ll = ll_new;
  }
  if (!diag.converged) {
    const Vector prob = probabilities(z, theta);
    diag.gradient_norm = (z.transpose() * (wd - prob) / static_cast<double>(n)).norm();
    diag.converged = diag.gradient_norm < opts.tolerance;
  }

  out.beta = theta.head(site.dim());
  if (opts.intercept) out.intercept = theta(site.dim());
  return out;
}

double predict_local(const LogisticParams& params, const ConstVectorRef& x) {
  if (x.size() != params.beta.size())
    fail(ErrorCode::DimensionMismatch, "predict_local: dim(x)=" + std::to_string(x.size()) +
                                           " model dim=" + std::to_string(params.beta.size()));
  switch (params.degenerate) {
    case Degenerate::AllControl: return 0.0;
    case Degenerate::AllTreated: return 1.0;
    case Degenerate::Normal: break;
  }
  return sigmoid(x.dot(params.beta) + (params.has_intercept ? params.intercept : 0.0));
}

Vector predict_local(const LogisticParams& params, const Covariates& x) {
  if (x.cols() != params.beta.size())
    fail(ErrorCode::DimensionMismatch, "predict_local: covariate block has wrong dimension");
  switch (params.degenerate) {
    case Degenerate::AllControl: return Vector::Zero(x.rows());
    case Degenerate::AllTreated: return Vector::Ones(x.rows());
    case Degenerate::Normal: break;
  }
  const double b = params.has_intercept ? params.intercept : 0.0;
  return ((x * params.beta).array() + b).matrix().unaryExpr([](double v) { return sigmoid(v); });
}

double logistic_mean_log_likelihood(const Covariates& x, const IntVector& w, const LogisticParams& p) {
  return mean_log_likelihood(design(x, p.has_intercept), w, packed(p));
}

Vector logistic_mean_gradient(const Covariates& x, const IntVector& w, const LogisticParams& p) {
  const Covariates z = design(x, p.has_intercept);
  const Vector prob = probabilities(z, packed(p));
  return z.transpose() * (w.cast<double>() - prob) / static_cast<double>(x.rows());
}

// ---------------------------------------------------------------------------

GaussianMoments fit_gaussian_moments(const SiteDataset& site, std::optional<double> ridge) {
  const Eigen::Index n = site.size();
  if (n < 2) fail(ErrorCode::InsufficientData, "site " + std::to_string(site.site_id) +
                                                   " needs at least 2 rows for moments");
  GaussianMoments m;
  m.count = n;
  m.mean = site.x.colwise().mean().transpose();
  const Covariates centered = site.x.rowwise() - m.mean.transpose();
  m.covariance = centered.transpose() * centered / static_cast<double>(n);
  m.covariance = 0.5 * (m.covariance + m.covariance.transpose());
  const double r = ridge ? *ridge : 1e-8 * m.covariance.trace() / static_cast<double>(site.dim());
  if (r < 0) fail(ErrorCode::InvalidArgument, "ridge must be nonnegative");
  m.covariance.diagonal().array() += r;
  return m;
}

GaussianDensity::GaussianDensity(const GaussianMoments& m) : mean_(m.mean) {
  Eigen::LLT<Matrix> llt(m.covariance);
  if (llt.info() != Eigen::Success) fail(ErrorCode::SingularCovariance, "covariance is not positive definite");
  lower_ = llt.matrixL();
  const auto d = static_cast<double>(mean_.size());
  log_norm_ = -0.5 * d * std::log(2.0 * std::numbers::pi) - lower_.diagonal().array().log().sum();
  if (!std::isfinite(log_norm_)) fail(ErrorCode::SingularCovariance, "covariance determinant is zero");
}

double GaussianDensity::log_pdf(const ConstVectorRef& x) const {
  if (x.size() != mean_.size()) fail(ErrorCode::DimensionMismatch, "gaussian density dimension mismatch");
  const Vector u = lower_.triangularView<Eigen::Lower>().solve(x - mean_);
  return log_norm_ - 0.5 * u.squaredNorm();
}

Vector GaussianDensity::log_pdf(const Covariates& x) const {
  if (x.cols() != mean_.size()) fail(ErrorCode::DimensionMismatch, "gaussian density dimension mismatch");
  Matrix centered = (x.rowwise() - mean_.transpose()).transpose();
  lower_.triangularView<Eigen::Lower>().solveInPlace(centered);
  return (log_norm_ - 0.5 * centered.colwise().squaredNorm().array()).matrix().transpose();
}

double gaussian_density(const GaussianMoments& m, const ConstVectorRef& x) {
  return std::exp(GaussianDensity(m).log_pdf(x));
}

namespace {

std::vector<GaussianDensity> densities(const std::vector<GaussianMoments>& moments) {
  std::vector<GaussianDensity> out;
  out.reserve(moments.size());
  for (const auto& m : moments) out.emplace_back(m);
  return out;
}

void check_proportions(const std::vector<GaussianMoments>& moments, const Vector& proportions) {
  if (static_cast<std::size_t>(proportions.size()) != moments.size() || moments.empty())
    fail(ErrorCode::DimensionMismatch, "need one proportion per site");
}

}  // namespace

Matrix density_ratio_weights(const std::vector<GaussianMoments>& moments, const Vector& proportions,
                             const Covariates& x) {
  check_proportions(moments, proportions);
  const auto dens = densities(moments);
  const auto k_sites = static_cast<Eigen::Index>(moments.size());
  Matrix logw(x.rows(), k_sites);
  for (Eigen::Index k = 0; k < k_sites; ++k)
    logw.col(k) = dens[static_cast<std::size_t>(k)].log_pdf(x).array() + std::log(proportions(k));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto row = logw.row(i);
    const double top = row.maxCoeff();
    if (!(std::exp(top) > 0.0))
      fail(ErrorCode::AllDensitiesZero, "row " + std::to_string(i) + " has zero density at every site");
    row.array() -= top;
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return logw;
}

Vector density_ratio_weights(const std::vector<GaussianMoments>& moments, const Vector& proportions,
                             const ConstVectorRef& x) {
  Covariates row = x.transpose();
  return density_ratio_weights(moments, proportions, row).row(0).transpose();
}

// ---------------------------------------------------------------------------

Matrix membership_weights(const MembershipParams& params, const Covariates& x) {
  const Covariates z = params.features.apply(x);
  if (z.cols() != params.theta.rows())
    fail(ErrorCode::DimensionMismatch, "membership model expects " +
                                           std::to_string(params.theta.rows()) + " features");
  Matrix logits = z * params.theta;
  softmax_rows(logits);
  return logits;
}

Vector membership_weights(const MembershipParams& params, const ConstVectorRef& x) {
  Covariates row = x.transpose();
  return membership_weights(params, row).row(0).transpose();
}

// ---------------------------------------------------------------------------

Matrix local_scores(const std::vector<LogisticParams>& local, const Covariates& x) {
  Matrix s(x.rows(), static_cast<Eigen::Index>(local.size()));
  for (std::size_t k = 0; k < local.size(); ++k)
    s.col(static_cast<Eigen::Index>(k)) = predict_local(local[k], x);
  return s;
}

Matrix federation_weights(const GlobalPropensity& gp, const Covariates& x) {
  Matrix w = std::visit(
      [&](const auto& model) -> Matrix {
        using T = std::decay_t<decltype(model)>;
        if constexpr (std::is_same_v<T, MembershipParams>)
          return membership_weights(model, x);
        else
          return density_ratio_weights(model.moments, model.proportions, x);
      },
      gp.weights);
  if (static_cast<std::size_t>(w.cols()) != gp.local.size())
    fail(ErrorCode::DimensionMismatch, "weight model and local models disagree on K");
  return w;
}

Vector global_propensity(const GlobalPropensity& gp, const Covariates& x) {
  if (gp.clip < 0.0 || gp.clip >= 0.5) fail(ErrorCode::InvalidArgument, "clip must lie in [0, 0.5)");
  const Matrix w = federation_weights(gp, x);
  const Matrix s = local_scores(gp.local, x);
  Vector e = w.cwiseProduct(s).rowwise().sum();
  if (gp.clip > 0.0) e = e.cwiseMax(gp.clip).cwiseMin(1.0 - gp.clip);
  else e = e.cwiseMax(0.0).cwiseMin(1.0);
  return e;
}

double global_propensity(const GlobalPropensity& gp, const ConstVectorRef& x) {
  Covariates row = x.transpose();
  return global_propensity(gp, row)(0);
}

// ---------------------------------------------------------------------------

std::vector<LogisticParams> oracle_local_models(const std::vector<Vector>& gammas, OverlapRegime regime,
                                                std::size_t control_only_site) {
  std::vector<LogisticParams> out;
  for (std::size_t k = 0; k < gammas.size(); ++k) {
    LogisticParams p;
    p.beta = gammas[k];
    p.has_intercept = false;
    p.diagnostics.converged = true;
    if (regime == OverlapRegime::None && k == control_only_site) {
      p.degenerate = Degenerate::AllControl;
      p.beta.setZero();
    }
    out.push_back(std::move(p));
  }
  return out;
}

GlobalPropensity oracle_global_propensity(const DgpAParams& p) {
  check_params(p);
  DensityRatioModel dw;
  double n = 0.0;
  for (auto s : p.sizes) n += static_cast<double>(s);
  dw.proportions.resize(static_cast<Eigen::Index>(p.num_sites()));
  for (std::size_t k = 0; k < p.num_sites(); ++k) {
    dw.moments.push_back(GaussianMoments{p.means[k], p.covariances[k], p.sizes[k]});
    dw.proportions(static_cast<Eigen::Index>(k)) = static_cast<double>(p.sizes[k]) / n;
  }
  GlobalPropensity gp;
  gp.local = oracle_local_models(p.gammas, p.regime, p.control_only_site);
  gp.weights = std::move(dw);
  return gp;
}

GlobalPropensity oracle_global_propensity(const DgpBParams& p) {
  check_params(p);
  GlobalPropensity gp;
  gp.local = oracle_local_models(p.gammas, p.regime, p.control_only_site);
  gp.weights = MembershipParams{p.theta, FeatureMap{}};
  return gp;
}

}  // namespace fedcausal

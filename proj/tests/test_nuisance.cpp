#include "helpers.hpp"
#include "oracles.hpp"

#include "fedcausal/nuisance.hpp"

#include <cmath>

using namespace fedcausal;
using testing::code_of;

namespace {

SiteDataset logistic_site(const Vector& gamma, Eigen::Index n, std::uint64_t seed, double intercept = 0.0) {
  RngHandle rng(seed, 1);
  const auto d = gamma.size();
  SiteDataset s;
  s.x.resize(n, d);
  s.w.resize(n);
  s.y = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) s.x(i, j) = rng.normal();
    s.w(i) = rng.bernoulli(sigmoid(s.x.row(i).dot(gamma) + intercept)) ? 1 : 0;
  }
  return s;
}

LogisticParams constant_model(Eigen::Index d, double p) {
  LogisticParams m;
  m.beta = Vector::Zero(d);
  m.has_intercept = true;
  m.intercept = std::log(p / (1 - p));
  return m;
}

}  // namespace

TEST_CASE("single-arm sites are degenerate") {
  SiteDataset s = logistic_site(Vector::Ones(3), 50, 1);
  s.w.setZero();
  const auto p = fit_logistic_local(s);
  CHECK(p.degenerate == Degenerate::AllControl);
  CHECK(predict_local(p, Vector(Vector::Ones(3))) == 0.0);
  CHECK((predict_local(p, s.x).array() == 0.0).all());
  s.w.setOnes();
  const auto q = fit_logistic_local(s);
  CHECK(q.degenerate == Degenerate::AllTreated);
  CHECK(predict_local(q, Vector(Vector::Zero(3))) == 1.0);
}

TEST_CASE("logistic fit recovers generating coefficients within 3 SE") {
  Vector gamma(4);
  gamma << 0.5, -0.25, 0.8, 0.0;
  const auto s = logistic_site(gamma, 100000, 7);
  LogisticFitOptions opts;
  opts.intercept = false;
  const auto p = fit_logistic_local(s, opts);
  CHECK(p.diagnostics.converged);
  CHECK(p.diagnostics.gradient_norm < opts.tolerance);
  // Standard errors from the Fisher information at the generating values.
  Matrix info = Matrix::Zero(4, 4);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const Vector x = s.x.row(i).transpose();
    const double e = sigmoid(x.dot(gamma));
    info += e * (1 - e) * x * x.transpose();
  }
  const Vector se = info.inverse().diagonal().cwiseSqrt();
  for (Eigen::Index j = 0; j < 4; ++j) CHECK(std::abs(p.beta(j) - gamma(j)) < 3 * se(j));
}

TEST_CASE("no signal gives a flat fit") {
  const auto s = logistic_site(Vector::Zero(3), 40000, 8);
  const auto p = fit_logistic_local(s);
  CHECK(p.has_intercept);
  CHECK(std::abs(p.intercept) < 4.0 * 2.0 / std::sqrt(40000.0));
  for (Eigen::Index j = 0; j < 3; ++j) CHECK(std::abs(p.beta(j)) < 4.0 * 2.0 / std::sqrt(40000.0));
  CHECK(predict_local(p, Vector(Vector::Zero(3))) == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("analytic gradient matches finite differences") {
  Vector gamma(3);
  gamma << 0.4, -0.7, 0.2;
  const auto s = logistic_site(gamma, 500, 9, 0.3);
  RngHandle rng(10, 10);
  for (int trial = 0; trial < 5; ++trial) {
    LogisticParams p;
    p.beta = Vector(3);
    for (int j = 0; j < 3; ++j) p.beta(j) = rng.normal();
    p.has_intercept = true;
    p.intercept = rng.normal();
    const Vector g = logistic_mean_gradient(s.x, s.w, p);
    REQUIRE(g.size() == 4);
    for (int j = 0; j < 4; ++j) {
      const double h = 1e-6;
      auto plus = p, minus = p;
      if (j < 3) {
        plus.beta(j) += h;
        minus.beta(j) -= h;
      } else {
        plus.intercept += h;
        minus.intercept -= h;
      }
      const double fd = (logistic_mean_log_likelihood(s.x, s.w, plus) -
                         logistic_mean_log_likelihood(s.x, s.w, minus)) / (2 * h);
      CHECK(std::abs(fd - g(j)) <= 1e-6 * std::max(1.0, std::abs(g(j))));
    }
  }
}

TEST_CASE("fitted gradient vanishes at the optimum") {
  Vector gamma(3);
  gamma << 1.0, -0.5, 0.25;
  const auto s = logistic_site(gamma, 3000, 11, -0.4);
  const auto p = fit_logistic_local(s);
  CHECK(logistic_mean_gradient(s.x, s.w, p).norm() < 1e-8);
}

TEST_CASE("predict_local arithmetic") {
  LogisticParams p;
  p.beta = Vector::Zero(2);
  CHECK(predict_local(p, Vector(Vector::Ones(2))) == 0.5);
  p.beta << std::log(99.0), 0.0;
  Vector x(2);
  x << 1.0, 5.0;
  CHECK(predict_local(p, x) == doctest::Approx(0.99).epsilon(1e-14));
  CHECK(code_of([&] { predict_local(p, Vector(Vector::Ones(3))); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("Gaussian moments") {
  SUBCASE("identical rows leave only the ridge") {
    Covariates x(2, 3);
    x << 1, 2, 3, 1, 2, 3;
    const auto s = testing::make_site(1, x, IntVector::Zero(2), Vector::Zero(2));
    const auto m = fit_gaussian_moments(s, 1e-6);
    CHECK((m.covariance - 1e-6 * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-22);
    CHECK(m.count == 2);
  }
  SUBCASE("tabulated site 1 law, mean within 4 SE") {
    MultivariateNormal mvn(Vector::Ones(10), Matrix::Identity(10, 10) + 0.5 * Matrix::Ones(10, 10));
    RngHandle rng(12, 1);
    const Covariates x = mvn.sample(100000, rng);
    const auto s = testing::make_site(1, x, IntVector::Zero(100000), Vector::Zero(100000));
    const auto m = fit_gaussian_moments(s, 0.0);
    const double se = std::sqrt(1.5 / 1e5);
    for (Eigen::Index j = 0; j < 10; ++j) CHECK(std::abs(m.mean(j) - 1.0) < 4 * se);
    CHECK(m.covariance(0, 0) == doctest::Approx(1.5).epsilon(0.03));
  }
  SUBCASE("1/n normalization and default ridge") {
    Covariates x(4, 1);
    x << 0, 1, 2, 3;
    const auto s = testing::make_site(1, x, IntVector::Zero(4), Vector::Zero(4));
    const auto plain = fit_gaussian_moments(s, 0.0);
    CHECK(plain.covariance(0, 0) == doctest::Approx(1.25).epsilon(1e-14));
    const auto dflt = fit_gaussian_moments(s);
    CHECK(dflt.covariance(0, 0) == doctest::Approx(1.25 * (1 + 1e-8)).epsilon(1e-14));
  }
  SUBCASE("one row") {
    const auto s = testing::make_site(1, Covariates::Zero(1, 2), IntVector::Zero(1), Vector::Zero(1));
    CHECK(code_of([&] { fit_gaussian_moments(s); }) == ErrorCode::InsufficientData);
  }
}

TEST_CASE("Gaussian density values") {
  GaussianMoments m1{Vector::Zero(1), Matrix::Identity(1, 1), 1};
  CHECK(gaussian_density(m1, Vector::Zero(1)) == doctest::Approx(0.3989422804014327).epsilon(1e-14));
  GaussianMoments m2{Vector::Zero(2), Matrix::Identity(2, 2), 1};
  CHECK(gaussian_density(m2, Vector::Zero(2)) == doctest::Approx(1.0 / (2 * oracle::kPi)).epsilon(1e-14));

  GaussianMoments m3{Vector::Constant(1, 0.7), Matrix::Constant(1, 1, 2.3), 1};
  const double mass = oracle::trapezoid(
      [&](double t) { return gaussian_density(m3, Vector::Constant(1, t)); }, -20.0, 20.0, 40000);
  CHECK(std::abs(mass - 1.0) < 1e-4);

  const auto p = dgp_a_table_params(OverlapRegime::Good);
  GaussianMoments m10{p.means[2], p.covariances[2], 1};
  GaussianDensity dens(m10);
  RngHandle rng(13, 1);
  Covariates pts(20, 10);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = 3.0 + rng.normal();
  const Vector batch = dens.log_pdf(pts);
  for (Eigen::Index i = 0; i < 20; ++i) {
    const double want = oracle::normal_pdf(p.means[2], p.covariances[2], pts.row(i).transpose());
    CHECK(std::exp(batch(i)) == doctest::Approx(want).epsilon(1e-10));
    CHECK(dens.log_pdf(Vector(pts.row(i).transpose())) == doctest::Approx(batch(i)).epsilon(1e-13));
  }

  GaussianMoments singular{Vector::Zero(2), Matrix::Zero(2, 2), 1};
  CHECK(code_of([&] { GaussianDensity{singular}; }) == ErrorCode::SingularCovariance);
}

TEST_CASE("density ratio weights") {
  SUBCASE("identical sites") {
    std::vector<GaussianMoments> ms(4, GaussianMoments{Vector::Zero(2), Matrix::Identity(2, 2), 10});
    const Vector rho = Vector::Constant(4, 0.25);
    Vector x(2);
    x << 0.3, -1.2;
    const Vector w = density_ratio_weights(ms, rho, x);
    for (Eigen::Index k = 0; k < 4; ++k) CHECK(w(k) == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("density ratio three to one") {
    std::vector<GaussianMoments> ms = {{Vector::Constant(1, 0.0), Matrix::Identity(1, 1), 5},
                                       {Vector::Constant(1, 1.0), Matrix::Identity(1, 1), 5}};
    const Vector x = Vector::Constant(1, 0.5 - std::log(3.0));
    const Vector w = density_ratio_weights(ms, Vector::Constant(2, 0.5), x);
    CHECK(w(0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(w(1) == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("tabulated DGP A at mu_1 against direct pdf evaluation") {
    const auto p = dgp_a_table_params(OverlapRegime::Good);
    std::vector<GaussianMoments> ms;
    for (std::size_t k = 0; k < 3; ++k) ms.push_back({p.means[k], p.covariances[k], 2000});
    const Vector rho = Vector::Constant(3, 1.0 / 3.0);
    const Vector w = density_ratio_weights(ms, rho, p.means[0]);
    const Vector want = oracle::density_weights(p.means, p.covariances, rho, p.means[0]);
    for (Eigen::Index k = 0; k < 3; ++k) CHECK(w(k) == doctest::Approx(want(k)).epsilon(1e-10));
    CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("far tail of every site") {
    std::vector<GaussianMoments> ms(2, GaussianMoments{Vector::Zero(10), Matrix::Identity(10, 10), 10});
    CHECK(code_of([&] { density_ratio_weights(ms, Vector::Constant(2, 0.5), Vector(Vector::Constant(10, 1e3))); }) ==
          ErrorCode::AllDensitiesZero);
  }
}

TEST_CASE("membership weights") {
  MembershipParams zero{Matrix::Zero(3, 4), {}};
  const Vector w = membership_weights(zero, Vector(Vector::Ones(3)));
  for (Eigen::Index k = 0; k < 4; ++k) CHECK(w(k) == doctest::Approx(0.25).epsilon(1e-15));

  RngHandle rng(14, 1);
  Matrix theta(3, 4);
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta.data()[i] = rng.normal();
  Matrix shifted = theta;
  Vector c(3);
  c << 5.0, -2.0, 0.5;
  shifted.colwise() += c;
  Vector x(3);
  x << 0.2, -1.0, 2.0;
  const Vector a = membership_weights(MembershipParams{theta, {}}, x);
  const Vector b = membership_weights(MembershipParams{shifted, {}}, x);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a - oracle::softmax(theta.transpose() * x)).cwiseAbs().maxCoeff() < 1e-14);

  const auto table = dgp_b_table_params(OverlapRegime::Good);
  const Vector at_zero = membership_weights(MembershipParams{table.theta, {}}, Vector(Vector::Zero(10)));
  for (Eigen::Index k = 0; k < 3; ++k) CHECK(at_zero(k) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(code_of([&] { membership_weights(zero, Vector(Vector::Ones(2))); }) == ErrorCode::DimensionMismatch);

  // Large logits stay finite.
  const Vector big = membership_weights(MembershipParams{Matrix::Constant(1, 2, 1000.0), {}}, Vector(Vector::Ones(1)));
  CHECK(big.allFinite());
}

TEST_CASE("global propensity") {
  SUBCASE("equal weights over 0.99 and 0.01") {
    GlobalPropensity gp;
    gp.local = {constant_model(1, 0.99), constant_model(1, 0.01)};
    gp.weights = MembershipParams{Matrix::Zero(1, 2), {}};
    Covariates x(5, 1);
    x << -3, -1, 0, 1, 3;
    const Vector e = global_propensity(gp, x);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(e(i) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("one site") {
    GlobalPropensity gp;
    LogisticParams m;
    m.beta = Vector::Constant(2, 0.7);
    gp.local = {m};
    gp.weights = MembershipParams{Matrix::Zero(2, 1), {}};
    Vector x(2);
    x << 0.4, -1.1;
    CHECK(global_propensity(gp, x) == doctest::Approx(predict_local(m, x)).epsilon(1e-15));
  }
  SUBCASE("all local scores equal") {
    const auto p = dgp_a_table_params(OverlapRegime::Good);
    GlobalPropensity gp = oracle_global_propensity(p);
    gp.local = {constant_model(10, 0.3), constant_model(10, 0.3), constant_model(10, 0.3)};
    CHECK(global_propensity(gp, p.means[1]) == doctest::Approx(0.3).epsilon(1e-12));
  }
  SUBCASE("simplex, convexity and clipping on random points") {
    const auto pa = dgp_a_table_params(OverlapRegime::Poor);
    const auto pb = dgp_b_table_params(OverlapRegime::Poor);
    RngHandle rng(15, 1);
    Covariates x(200, 10);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 1.5 + 1.5 * rng.normal();
    for (auto gp : {oracle_global_propensity(pa), oracle_global_propensity(pb)}) {
      const Matrix w = federation_weights(gp, x);
      const Matrix loc = local_scores(gp.local, x);
      const Vector e = global_propensity(gp, x);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        CHECK((w.row(i).array() >= 0).all());
        CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-12);
        CHECK(e(i) >= loc.row(i).minCoeff() - 1e-15);
        CHECK(e(i) <= loc.row(i).maxCoeff() + 1e-15);
      }
      gp.clip = 0.1;
      const Vector c = global_propensity(gp, x);
      CHECK((c.array() >= 0.1).all());
      CHECK((c.array() <= 0.9).all());
      gp.clip = 0.5;
      CHECK(code_of([&] { global_propensity(gp, x); }) == ErrorCode::InvalidArgument);
    }
  }
}

TEST_CASE("oracle global score equals P(W = 1 | x) under DGP B") {
  // Pointwise: draw H from the membership law, then W from the local law.
  const auto p = dgp_b_table_params(OverlapRegime::Poor);
  const auto gp = oracle_global_propensity(p);
  RngHandle rng(16, 1);
  const MultivariateNormal comp(p.component_means[1], p.component_covariances[1]);
  const Covariates pts = comp.sample(60, rng);
  const std::size_t draws = 20000;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const Vector x = pts.row(i).transpose();
    const Vector member = oracle::softmax(p.theta.transpose() * x);
    std::size_t treated = 0;
    for (std::size_t r = 0; r < draws; ++r) {
      const double u = rng.uniform();
      const std::size_t h = u < member(0) ? 0 : (u < member(0) + member(1) ? 1 : 2);
      treated += rng.bernoulli(oracle_local_propensity(p.gammas, p.regime, p.control_only_site, h, x)) ? 1 : 0;
    }
    const double e = global_propensity(gp, x);
    const double se = std::sqrt(std::max(e * (1 - e), 1e-12) / draws);
    CHECK(std::abs(static_cast<double>(treated) / draws - e) < 4 * se + 1e-12);
  }
}

TEST_CASE("oracle DW weights are the DGP A membership posterior") {
  const auto p = dgp_a_table_params(OverlapRegime::Good);
  const auto gp = oracle_global_propensity(p);
  CHECK(gp.scheme() == WeightScheme::DW);
  RngHandle rng(17, 1);
  Covariates x(10, 10);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 2.0 + rng.normal();
  const Matrix w = federation_weights(gp, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector want = oracle::density_weights(p.means, p.covariances, Vector::Constant(3, 1.0 / 3), x.row(i).transpose());
    CHECK((w.row(i).transpose() - want).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("feature map") {
  FeatureMap f;
  Covariates x(2, 2);
  x << 1, 2, 3, 4;
  CHECK(f.apply(x) == x);
  f.shift = Vector::Constant(2, 1.0);
  f.scale = Vector::Constant(2, 2.0);
  f.intercept = true;
  const Covariates z = f.apply(x);
  REQUIRE(z.cols() == 3);
  CHECK(z(1, 0) == 1.0);
  CHECK(z(1, 1) == 1.5);
  CHECK(z(0, 2) == 1.0);
  CHECK(f.output_dim(2) == 3);
}

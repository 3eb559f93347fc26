#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace funcdiff;
using testutil::random_function;
using testutil::mean_se;
using testutil::rel_diff;

// ---------------------------------------------------------------------------
// Forward process

TEST(TransitionSample, ZeroTimeKeepsX0) {
  Grid g(16);
  CovOperator C = rbf_cov(g, 0.1);
  GridFunction x0 = random_function(g, 1);
  Rng rng(3);
  NoisingPair p = transition_sample(x0, 0.0, C, rng);
  EXPECT_EQ(p.xt.values(), x0.values());
}

TEST(TransitionSample, DefiningIdentity) {
  Grid g(16);
  CovOperator C = brownian_cov(g);
  Rng rng(4);
  for (double t : {1e-3, 0.3, 2.0}) {
    NoisingPair p = transition_sample(random_function(g, 2), t, C, rng);
    Vector recon = std::exp(-0.5 * t) * p.x0.values() + std::sqrt(1.0 - std::exp(-t)) * p.xi.values();
    EXPECT_LT((recon - p.xt.values()).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(TransitionSample, NegativeTimeThrows) {
  Grid g(4);
  Rng rng(1);
  EXPECT_THROW(transition_sample(GridFunction(g), -0.1, brownian_cov(g), rng), std::invalid_argument);
}

TEST(TransitionSample, LongTimeIsStationary) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.1);
  GridFunction x0 = GridFunction::constant(g, 5.0);
  Rng rng(17);
  std::vector<double> n2, c1;
  for (int i = 0; i < 10000; ++i) {
    NoisingPair p = transition_sample(x0, 50.0, C, rng);
    n2.push_back(l2_inner(p.xt, p.xt));
    c1.push_back(l2_inner(p.xt, C.eigenfunction(0)));
  }
  auto a = testutil::mean_se(n2), b = testutil::mean_se(c1);
  EXPECT_LT(std::abs(a.mean - C.trace()), 3.0 * a.se);
  EXPECT_LT(std::abs(b.mean), 3.0 * b.se);
}

TEST(TransitionSample, Reproducible) {
  Grid g(8);
  CovOperator C = rbf_cov(g, 0.1);
  Rng a(5), b(5);
  EXPECT_EQ(transition_sample(GridFunction(g), 1.0, C, a).xt.values(),
            transition_sample(GridFunction(g), 1.0, C, b).xt.values());
}

TEST(MarginalGaussian, StationaryFamilyAndTimeZero) {
  Grid g(16);
  CovOperator C = rbf_cov(g, 0.1);
  GridFunction m0 = random_function(g, 3);
  for (double t : {0.1, 1.0, 7.0})
    EXPECT_LT(rel_diff(marginal_gaussian(m0, C, t, C).cov.kernel_matrix(), C.kernel_matrix()), 1e-12);
  GaussianMeasure z = marginal_gaussian(m0, brownian_cov(g), 0.0, C);
  EXPECT_EQ(z.mean.values(), m0.values());
  EXPECT_EQ(z.cov.kind(), "brownian");
}

TEST(MarginalGaussian, MatchesMonteCarlo) {
  Grid g(32);
  CovOperator C = brownian_cov(g), S0 = rbf_cov(g, 0.2, 2.0);
  GridFunction m0 = GridFunction::from(g, [](double t) { return std::sin(3.0 * t); });
  const double t = 0.7;
  GaussianMeasure exact = marginal_gaussian(m0, S0, t, C);
  Matrix X0 = sample_gaussian_batch(S0, 10000, 1);
  X0.colwise() += m0.values();
  Matrix Xt(32, 10000);
  for (Eigen::Index j = 0; j < 10000; ++j) {
    Rng r = Rng::stream(2, "mc", static_cast<std::uint64_t>(j));
    Xt.col(j) = transition_sample(GridFunction(g, X0.col(j)), t, C, r).xt.values();
  }
  Vector mean = Xt.rowwise().mean();
  Matrix Xc = Xt.colwise() - mean;
  Matrix K = Xc * Xc.transpose() / 9999.0;
  const Matrix Kx = exact.cov.kernel_matrix();
  const double op_err = Eigen::JacobiSVD<Matrix>(K - Kx).singularValues()[0];
  const double op_norm = Eigen::JacobiSVD<Matrix>(Kx).singularValues()[0];
  EXPECT_LT(op_err / op_norm, 0.10);
  EXPECT_LT(rel_diff(mean, exact.mean.values()), 0.05);
}

TEST(MarginalGaussian, SemigroupProperty) {
  Grid g(16);
  CovOperator C = brownian_cov(g), S0 = rbf_cov(g, 0.1, 3.0);
  GridFunction m0 = random_function(g, 5);
  GaussianMeasure a = marginal_gaussian(marginal_gaussian(m0, S0, 0.4, C), 0.9, C);
  GaussianMeasure b = marginal_gaussian(m0, S0, 1.3, C);
  EXPECT_LT((a.mean.values() - b.mean.values()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((a.cov.kernel_matrix() - b.cov.kernel_matrix()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(MarginalGaussian, VarianceInterpolatesMonotonically) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.1);
  CovOperator S0 = C.scaled(4.0);
  Vector prev = S0.eigenvalues();
  for (double t : {0.1, 0.5, 1.0, 2.0, 5.0}) {
    Vector ev = marginal_gaussian(GridFunction(g), S0, t, C).cov.eigenvalues();
    for (Eigen::Index i = 0; i < 5; ++i) {
      EXPECT_LE(ev[i], prev[i] + 1e-12);
      EXPECT_GE(ev[i], C.eigenvalues()[i] - 1e-12);
    }
    prev = ev;
  }
}

TEST(SampleTime, StaysInRange) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double t = sample_time(rng);
    EXPECT_GE(t, 1e-3);
    EXPECT_LE(t, 10.0);
  }
}

// ---------------------------------------------------------------------------
// Gaussian oracle

TEST(GaussianScore, StationaryIsMinusX) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.05);
  ScoreFn s = stationary_score_fn(C);
  for (double t : {1e-3, 0.5, 3.0}) {
    GridFunction x = random_function(g, 7);
    EXPECT_LT((s(t, x).values() + x.values()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(GaussianScore, ScaledTargetClosedForm) {
  Grid g(16);
  CovOperator C = brownian_cov(g);
  GaussianMeasure target = GaussianMeasure::centered(C.scaled(4.0));
  GaussianScoreOracle o(target, C);
  EXPECT_TRUE(o.spectral());
  for (double t : {0.2, 1.0, 4.0}) {
    GridFunction x = random_function(g, 8);
    const double e = std::exp(-t);
    Vector expect = -x.values() / (4.0 * e + 1.0 - e);
    EXPECT_LT(rel_diff(gaussian_score(target, C, t, x).values(), expect), 1e-10);
    // Dense solve as an independent check.
    Matrix Kt = e * target.cov.kernel_matrix() + (1.0 - e) * C.kernel_matrix();
    Vector dense = -C.kernel_matrix() * Kt.ldlt().solve(x.values());
    EXPECT_LT(rel_diff(dense, expect), 1e-8);
  }
}

namespace {

// Central-difference C grad_H log p at x, where log p is an explicit
// function of grid values. C grad_H = K grad_Euclid.
Vector fd_drift(const std::function<double(const Vector&)>& logp, const Matrix& KC, const Vector& x, double h) {
  Vector grad(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector a = x, b = x;
    a[i] += h;
    b[i] -= h;
    grad[i] = (logp(a) - logp(b)) / (2.0 * h);
  }
  return KC * grad;
}

}  // namespace

TEST(GaussianScore, FiniteDifferenceOracle) {
  Grid g(8);
  CovOperator C = brownian_cov(g);
  GaussianMeasure target(GridFunction::from(g, [](double t) { return std::cos(2.0 * t); }), rbf_cov(g, 0.3, 0.5));
  GaussianScoreOracle o(target, C);
  EXPECT_FALSE(o.spectral());
  for (double t : {0.1, 0.8}) {
    GaussianMeasure pt = marginal_gaussian(target, t, C);
    const Matrix Kt = pt.cov.kernel_matrix();
    auto logp = [&](const Vector& v) { return gaussian_log_density(pt.mean.values(), Kt, v); };
    GridFunction x = random_function(g, 9);
    Vector fd = fd_drift(logp, C.kernel_matrix(), x.values(), 1e-5);
    EXPECT_LT(rel_diff(gaussian_score(target, C, t, x).values(), fd), 1e-4);
  }
}

TEST(GaussianScore, AffineFormMatchesEvaluation) {
  Grid g(12);
  CovOperator C = brownian_cov(g);
  GaussianMeasure target(random_function(g, 1), rbf_cov(g, 0.2));
  ScoreFn s = gaussian_score_fn(target, C);
  ASSERT_TRUE(s.has_affine());
  Matrix X(12, 3);
  for (int j = 0; j < 3; ++j) X.col(j) = random_function(g, 10 + j).values();
  AffineDrift a = s.affine(0.6);
  Matrix expect = a.A * X;
  expect.colwise() += a.b;
  EXPECT_LT(rel_diff(s.evaluate(0.6, X), expect), 1e-10);
}

TEST(GaussianScore, NonPositiveTimeThrows) {
  Grid g(4);
  EXPECT_THROW(gaussian_score(GaussianMeasure::centered(brownian_cov(g)), brownian_cov(g), 0.0, GridFunction(g)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Mixture oracle

TEST(MixtureScore, SingleComponentMatchesGaussian) {
  Grid g(8);
  CovOperator C = brownian_cov(g);
  GaussianMeasure comp(random_function(g, 2), rbf_cov(g, 0.3));
  MixtureMeasure mix({1.0}, {comp});
  GridFunction x = random_function(g, 3);
  MixtureScoreOracle o(mix, C);
  EXPECT_LT(rel_diff(Vector(o.evaluate(0.5, x.values()).col(0)), gaussian_score(comp, C, 0.5, x).values()), 1e-10);
}

TEST(MixtureScore, SymmetricComponentsAtOrigin) {
  Grid g(8);
  CovOperator C = brownian_cov(g);
  GridFunction m = GridFunction::from(g, [](double t) { return 1.0 + t; });
  GaussianMeasure plus(m, rbf_cov(g, 0.3, 0.2)), minus(-1.0 * m, rbf_cov(g, 0.3, 0.2));
  MixtureMeasure mix({0.5, 0.5}, {plus, minus});
  GridFunction zero(g);
  Vector expect = 0.5 * (gaussian_score(plus, C, 0.4, zero).values() + gaussian_score(minus, C, 0.4, zero).values());
  EXPECT_LT((mixture_score(mix, C, 0.4, zero).values() - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MixtureScore, FiniteDifferenceOracle1D) {
  Grid g(1);
  CovOperator C = identity_cov(g, 1.0);
  MixtureMeasure mix({0.3, 0.7}, {GaussianMeasure(GridFunction::constant(g, -2.0), identity_cov(g, 0.25)),
                                   GaussianMeasure(GridFunction::constant(g, 1.5), identity_cov(g, 0.5))});
  MixtureScoreOracle o(mix, C);
  for (double t : {0.05, 0.3, 1.5}) {
    for (double xv : {-2.5, -0.3, 0.4, 2.0}) {
      Vector x = Vector::Constant(1, xv);
      Vector fd = fd_drift([&](const Vector& v) { return o.log_density(t, v); }, C.kernel_matrix(), x, 1e-5);
      EXPECT_LT(rel_diff(Vector(o.evaluate(t, x).col(0)), fd), 1e-4) << "t=" << t << " x=" << xv;
    }
  }
}

TEST(MixtureScore, UnderflowIsReported) {
  Grid g(1);
  CovOperator C = identity_cov(g, 1.0);
  MixtureMeasure mix({0.5, 0.5}, {GaussianMeasure(GridFunction::constant(g, -1.0), identity_cov(g, 0.1)),
                                  GaussianMeasure(GridFunction::constant(g, 1.0), identity_cov(g, 0.1))});
  MixtureScoreOracle o(mix, C);
  EXPECT_THROW(o.evaluate(0.5, Matrix::Constant(1, 1, 1e200)), NumericalError);
}

// ---------------------------------------------------------------------------
// Parameterizations and denoising

TEST(Parameterization, StationaryRelativeIsZero) {
  Grid g(16);
  CovOperator C = rbf_cov(g, 0.1);
  ScoreFn rel = to_relative(stationary_score_fn(C));
  EXPECT_EQ(rel.parameterization(), Parameterization::relative);
  GridFunction x = random_function(g, 3);
  EXPECT_LT(rel(0.7, x).values().cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Parameterization, RoundTripIsIdentity) {
  Grid g(16);
  CovOperator C = brownian_cov(g);
  ScoreFn s = gaussian_score_fn(GaussianMeasure(random_function(g, 1), rbf_cov(g, 0.2)), C);
  ScoreFn back = to_absolute(to_relative(s));
  GridFunction x = random_function(g, 2);
  EXPECT_LT((back(0.4, x).values() - s(0.4, x).values()).cwiseAbs().maxCoeff(), 1e-12);
  AffineDrift a = back.affine(0.4), b = s.affine(0.4);
  EXPECT_LT((a.A - b.A).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Parameterization, RelativeDriftVanishesAtLargeTime) {
  Grid g(16);
  CovOperator C = brownian_cov(g);
  ScoreFn rel = to_relative(gaussian_score_fn(GaussianMeasure::centered(C.scaled(4.0)), C));
  GridFunction x = random_function(g, 5);
  EXPECT_LT(l2_norm(rel(30.0, x)), 1e-10 * l2_norm(x));
  EXPECT_GT(l2_norm(rel(0.5, x)), 0.1 * l2_norm(x));
}

TEST(DenoiseMean, StationaryIsContraction) {
  Grid g(16);
  CovOperator C = rbf_cov(g, 0.1);
  ScoreFn s = stationary_score_fn(C);
  GridFunction x = random_function(g, 4);
  for (double t : {0.1, 1.0, 5.0})
    EXPECT_LT(rel_diff(denoise_mean(s, t, x).values(), std::exp(-0.5 * t) * x.values()), 1e-10);
  EXPECT_LT(rel_diff(denoise_mean(s, 1e-9, x).values(), x.values()), 1e-6);
  // The relative parameterization gives the same posterior mean.
  EXPECT_LT(rel_diff(denoise_mean(to_relative(s), 1.0, x).values(), std::exp(-0.5) * x.values()), 1e-10);
}

TEST(DenoiseMean, MatchesJointGaussianConditioning) {
  Grid g(16);
  CovOperator C = brownian_cov(g);
  GaussianMeasure target(random_function(g, 6), rbf_cov(g, 0.15, 2.0));
  ScoreFn s = gaussian_score_fn(target, C);
  const double t = 0.8, a = std::exp(-0.5 * t);
  const Matrix S0 = target.cov.kernel_matrix();
  const Matrix Kt = a * a * S0 + (1.0 - a * a) * C.kernel_matrix();
  GridFunction x = random_function(g, 7);
  const Vector& m0 = target.mean.values();
  Vector expect = m0 + a * S0 * Kt.ldlt().solve(x.values() - a * m0);
  EXPECT_LT(rel_diff(denoise_mean(s, t, x).values(), expect), 1e-8);
}

// ---------------------------------------------------------------------------
// Martingale property and moment bounds

TEST(Martingale, EqualTimesGiveZero) {
  Grid g(1);
  MartingaleReport r = martingale_check(GaussianMeasure::centered(identity_cov(g)), identity_cov(g), 0.5, 0.5, 100, 1);
  EXPECT_EQ(r.deviation, 0.0);
}

TEST(Martingale, StationaryGaussian) {
  Grid g(1);
  CovOperator C = brownian_cov(g);
  MartingaleReport r = martingale_check(GaussianMeasure::centered(C), C, 0.3, 0.8, 20000, 5, 500);
  EXPECT_LT(std::abs(r.deviation), 3.0 * r.stderr_);
  EXPECT_GE(r.min_ess, 50.0);
  auto j = to_json(r);
  EXPECT_EQ(j.at("n_mc"), 20000);
}

TEST(Martingale, TwoComponentMixture) {
  Grid g(1);
  CovOperator C = identity_cov(g, 1.0);
  MixtureMeasure mix({0.4, 0.6}, {GaussianMeasure(GridFunction::constant(g, -1.5), identity_cov(g, 0.2)),
                                  GaussianMeasure(GridFunction::constant(g, 1.0), identity_cov(g, 0.3))});
  MartingaleReport r = martingale_check(mix, C, 0.3, 0.8, 100000, 11);
  EXPECT_LT(std::abs(r.deviation), 3.0 * r.stderr_);
}

// The outer points share one pool, so an iid standard error over them is too
// small. The reported one has to cover the spread across independent seeds.
TEST(Martingale, StderrCoversSeedToSeedSpread) {
  Grid g(1);
  CovOperator C = identity_cov(g, 1.0);
  MixtureMeasure mix({0.4, 0.6}, {GaussianMeasure(GridFunction::constant(g, -1.5), identity_cov(g, 0.2)),
                                  GaussianMeasure(GridFunction::constant(g, 1.0), identity_cov(g, 0.3))});
  std::vector<double> dev;
  double se = 0.0;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    MartingaleReport r = martingale_check(mix, C, 0.3, 0.8, 100000, seed, 200);
    dev.push_back(r.deviation);
    se += r.stderr_ / 8.0;
  }
  EXPECT_LT(mean_se(dev).se * std::sqrt(8.0), 1.5 * se);
}

TEST(Martingale, TinyPoolIsUnreliable) {
  Grid g(1);
  CovOperator C = identity_cov(g, 1.0);
  EXPECT_THROW(martingale_check(GaussianMeasure::centered(C), C, 0.3, 0.30001, 400, 1), UnreliableEstimateError);
}

TEST(ScoreMoments, StationaryEqualsTrace) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.05);
  MixtureMeasure target(GaussianMeasure::centered(C));
  ScoreFn s = stationary_score_fn(C);
  double sup = 0.0;
  for (double t : {0.01, 0.1, 1.0, 5.0}) {
    const double m = score_second_moment(s, target, C, t, 20000, 3);
    EXPECT_NEAR(m, C.trace(), 0.05 * C.trace());
    sup = std::max(sup, m);
  }
  EXPECT_TRUE(std::isfinite(sup));
}

TEST(ScoreMoments, DiscountedMomentIsNonincreasing) {
  Grid g(1);
  CovOperator C = identity_cov(g, 1.0);
  MixtureMeasure mix({0.5, 0.5}, {GaussianMeasure(GridFunction::constant(g, -1.0), identity_cov(g, 0.1)),
                                  GaussianMeasure(GridFunction::constant(g, 1.0), identity_cov(g, 0.1))});
  ScoreFn s = mixture_score_fn(mix, C);
  double prev = std::numeric_limits<double>::infinity();
  for (double t : {0.1, 0.3, 0.6, 1.0, 2.0}) {
    const double m = std::exp(-t) * score_second_moment(s, mix, C, t, 20000, 8);
    EXPECT_LT(m, prev);
    prev = m;
  }
}

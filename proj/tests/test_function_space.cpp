#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace funcdiff;
using testutil::random_function;
using testutil::rel_diff;

TEST(Grid, PointsAreUniformOnUnitInterval) {
  Grid g(4);
  EXPECT_DOUBLE_EQ(g.point(0), 0.25);
  EXPECT_DOUBLE_EQ(g.point(3), 1.0);
  Vector p = g.points();
  for (Eigen::Index i = 1; i < p.size(); ++i) EXPECT_NEAR(p[i] - p[i - 1], 0.25, 1e-15);
  EXPECT_EQ(g.nearest_index(1.0), 3u);
  EXPECT_EQ(g.nearest_index(0.0), 0u);
  EXPECT_EQ(g.nearest_index(0.49), 1u);
  EXPECT_THROW(Grid(0), DimensionError);
}

TEST(GridFunction, RejectsBadValues) {
  Grid g(3);
  EXPECT_THROW(GridFunction(g, Vector::Zero(4)), DimensionError);
  Vector v = Vector::Zero(3);
  v[1] = std::nan("");
  EXPECT_THROW(GridFunction(g, v), NumericalError);
}

TEST(GridFunction, SerializationRoundTripsExactly) {
  GridFunction f = random_function(Grid(17), 3);
  GridFunction a = from_csv_row(to_csv_row(f));
  GridFunction b = grid_function_from_json(nlohmann::json::parse(to_json(f).dump()));
  EXPECT_EQ(a.values(), f.values());
  EXPECT_EQ(b.values(), f.values());
}

TEST(L2Inner, Constants) {
  for (std::size_t D : {2u, 7u, 64u}) {
    Grid g(D);
    EXPECT_NEAR(l2_inner(GridFunction::constant(g, 1.0), GridFunction::constant(g, 1.0)), 1.0, 1e-14);
    EXPECT_NEAR(l2_inner(GridFunction::constant(g, 1.0), GridFunction::constant(g, -1.0)), -1.0, 1e-14);
  }
}

TEST(L2Inner, SineSquaredIntegratesToHalf) {
  GridFunction f = GridFunction::from(Grid(256), [](double t) { return std::sin(2.0 * M_PI * t); });
  EXPECT_NEAR(l2_inner(f, f), 0.5, 1e-3);
}

TEST(L2Inner, GridMismatchThrows) {
  EXPECT_THROW(l2_inner(GridFunction(Grid(3)), GridFunction(Grid(4))), DimensionError);
}

TEST(CmInner, IdentitySpectrumGivesL2) {
  Grid g(16);
  CovOperator C = identity_cov(g);
  for (int k = 0; k < 5; ++k) {
    GridFunction f = random_function(g, 10 + k), h = random_function(g, 20 + k);
    EXPECT_NEAR(cm_inner(f, h, C), l2_inner(f, h), 1e-12);
  }
}

TEST(CmInner, InverseEigenvalueOnEigenfunction) {
  Grid g(8);
  CovOperator base = rbf_cov(g, 0.2);
  Vector ev(8);
  ev << 0.25, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.001;
  CovOperator C = CovOperator::from_spectrum(g, ev, base.basis(), "custom", {});
  GridFunction e1 = C.eigenfunction(0);
  EXPECT_NEAR(l2_norm(e1), 1.0, 1e-12);
  EXPECT_NEAR(cm_inner(e1, e1, C), 4.0, 1e-10);
}

TEST(CmInner, MatchesDenseSolve) {
  Grid g(32);
  CovOperator C = brownian_cov(g);
  const Matrix M = C.operator_matrix();
  for (int k = 0; k < 5; ++k) {
    GridFunction f = random_function(g, 100 + k), h = random_function(g, 200 + k);
    const double dense = g.weight() * f.values().dot(M.fullPivLu().solve(h.values()));
    EXPECT_NEAR(cm_inner(f, h, C), dense, 1e-8 * std::abs(dense) + 1e-10);
  }
}

TEST(CmInner, ZeroRankThrows) {
  Grid g(4);
  CovOperator C = CovOperator::from_spectrum(g, Vector::Zero(4), identity_cov(g).basis(), "zero", {});
  GridFunction f = random_function(g, 1);
  EXPECT_THROW(cm_inner(f, f, C), SingularOperatorError);
  EXPECT_THROW(C.apply_inv(f), SingularOperatorError);
}

TEST(CmInner, InverseOfApplyIsL2) {
  Grid g(24);
  CovOperator C = brownian_cov(g);
  for (int k = 0; k < 5; ++k) {
    GridFunction f = random_function(g, 300 + k), h = random_function(g, 400 + k);
    EXPECT_NEAR(cm_inner(f, C.apply(h), C), l2_inner(f, h), 1e-8);
  }
}

TEST(Project, FullRankIsIdentity) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.1);
  GridFunction f = random_function(g, 5);
  EXPECT_LT((project(f, C, 32).values() - f.values()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Project, OrthogonalEigenfunctionVanishes) {
  Grid g(32);
  CovOperator C = brownian_cov(g);
  EXPECT_LT(project(C.eigenfunction(1), C, 1).values().cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Project, NormMonotoneIdempotentContraction) {
  Grid g(64);
  CovOperator C = rbf_cov(g, 0.05);
  GridFunction f = random_function(g, 9);
  double prev = 0.0;
  for (Eigen::Index d = 1; d <= 64; ++d) {
    GridFunction p = project(f, C, d);
    const double n2 = l2_inner(p, p);
    EXPECT_GE(n2, prev - 1e-12);
    EXPECT_LE(n2, l2_inner(f, f) + 1e-12);
    EXPECT_LT((project(p, C, d).values() - p.values()).norm(), 1e-10);
    prev = n2;
  }
  // Exact identity on the span of the first d eigenfunctions.
  GridFunction in_span = 2.0 * C.eigenfunction(0) - 0.5 * C.eigenfunction(2);
  EXPECT_LT((project(in_span, C, 3).values() - in_span.values()).norm(), 1e-10);
}

TEST(Project, OutOfRangeThrows) {
  Grid g(8);
  CovOperator C = brownian_cov(g);
  GridFunction f(g);
  EXPECT_THROW(project(f, C, 0), std::out_of_range);
  EXPECT_THROW(project(f, C, 9), std::out_of_range);
}

TEST(Parseval, HoldsForEveryBasis) {
  Grid g(48);
  for (const CovOperator& C : {rbf_cov(g, 0.05), brownian_cov(g), identity_cov(g), rbf_cov(g, 1e3)}) {
    GridFunction f = random_function(g, 77);
    EXPECT_NEAR(C.coefficients(f).squaredNorm(), l2_inner(f, f), 1e-8);
  }
}

TEST(InnerProductKind, WeightMatrixReproducesNorms) {
  Grid g(16);
  CovOperator C = brownian_cov(g);
  GridFunction f = random_function(g, 4);
  const Matrix W = InnerProductKind::cameron_martin(C).weight_matrix(g);
  EXPECT_NEAR(g.weight() * f.values().dot(W * f.values()), cm_inner(f, f, C), 1e-8 * cm_inner(f, f, C));
  const Matrix I = InnerProductKind::l2().weight_matrix(g);
  EXPECT_NEAR(g.weight() * f.values().dot(I * f.values()), l2_inner(f, f), 1e-12);
}

// ---------------------------------------------------------------------------
// Covariance operators

TEST(RbfCov, HugeLengthscaleIsRankOne) {
  CovOperator C = rbf_cov(Grid(64), 1e3, 2.0);
  EXPECT_NEAR(C.eigenvalues()[0], 2.0, 1e-5);
  EXPECT_LT(C.eigenvalues().tail(63).maxCoeff(), 1e-5);
}

TEST(RbfCov, TraceAndDecay) {
  CovOperator C = rbf_cov(Grid(256), 1.0 / 20.0, 1.0);
  EXPECT_NEAR(C.trace(), 1.0, 1e-6);
  // Regression fixture for the computed spectrum; the ratio drops below 1e-2
  // only past the 20th mode at this lengthscale.
  EXPECT_NEAR(C.eigenvalues()[9] / C.eigenvalues()[0], 0.338223, 1e-5);
  EXPECT_GT(C.eigenvalues()[19] / C.eigenvalues()[0], 1e-2);
  EXPECT_LT(C.eigenvalues()[24] / C.eigenvalues()[0], 1e-2);
}

TEST(RbfCov, RejectsNonPositiveParameters) {
  EXPECT_THROW(rbf_cov(Grid(8), 0.0), std::invalid_argument);
  EXPECT_THROW(rbf_cov(Grid(8), 0.1, -1.0), std::invalid_argument);
}

TEST(CovOperator, InvariantsHold) {
  Grid g(64);
  for (const CovOperator& C : {rbf_cov(g, 0.05), brownian_cov(g), white_noise_cov(g)}) {
    const Vector& ev = C.eigenvalues();
    for (Eigen::Index i = 1; i < ev.size(); ++i) EXPECT_GE(ev[i - 1], ev[i]);
    EXPECT_GE(ev.minCoeff(), 0.0);
    const Matrix gram = g.weight() * C.basis().transpose() * C.basis();
    EXPECT_LT((gram - Matrix::Identity(64, 64)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(C.trace(), ev.sum(), 1e-14);
  }
}

TEST(BrownianCov, KernelMatrixOnThreePoints) {
  CovOperator C = brownian_cov(Grid(3));
  Matrix expect(3, 3);
  expect << 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3, 2.0 / 3, 1.0 / 3, 2.0 / 3, 1.0;
  EXPECT_LT((C.kernel_matrix() - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BrownianCov, Trace) {
  const double D = 256.0;
  CovOperator C = brownian_cov(Grid(256));
  EXPECT_NEAR(C.trace(), (D + 1.0) / (2.0 * D), 1e-12);
  EXPECT_NEAR(C.trace(), 0.5020, 1e-4);
}

TEST(CovOperator, SpectralReassemblyMatchesKernel) {
  Grid g(64);
  Matrix K(64, 64);
  for (Eigen::Index i = 0; i < 64; ++i)
    for (Eigen::Index j = 0; j < 64; ++j) {
      const double d = g.point(static_cast<std::size_t>(i)) - g.point(static_cast<std::size_t>(j));
      K(i, j) = std::exp(-d * d / (2.0 * 0.1 * 0.1));
    }
  CovOperator C = rbf_cov(g, 0.1);
  EXPECT_LT(rel_diff(C.kernel_matrix(), K), 1e-6);
}

TEST(FunctionalCalculus, SqrtInverseEigen) {
  Grid g(32);
  CovOperator C = brownian_cov(g);
  GridFunction f = random_function(g, 8);
  EXPECT_LT(rel_diff(C.apply_sqrt(C.apply_sqrt(f)).values(), C.apply(f).values()), 1e-8);
  EXPECT_LT(rel_diff(C.apply_inv(C.apply(f)).values(), f.values()), 1e-8);
  GridFunction e1 = C.eigenfunction(0);
  EXPECT_LT(rel_diff(C.apply(e1).values(), C.eigenvalues()[0] * e1.values()), 1e-10);
  Matrix S = C.sqrt_matrix();
  EXPECT_LT(rel_diff(Matrix(S * S), C.operator_matrix()), 1e-10);
}

TEST(FunctionalCalculus, InverseDropsDiscardedModes) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.2).with_rank_tol(1e-6);
  const Eigen::Index r = C.retained_rank();
  ASSERT_LT(r, 32);
  GridFunction f = random_function(g, 12);
  GridFunction expect = project(f, C, r);
  EXPECT_LT(rel_diff(C.apply_inv(C.apply(f)).values(), expect.values()), 1e-6);
}

TEST(EmpiricalCov, IdenticalSamplesGiveEpsSpectrum) {
  Grid g(16);
  GridFunction f = random_function(g, 1);
  for (std::size_t n : {4u, 40u}) {
    std::vector<GridFunction> xs(n, f);
    CovOperator C = empirical_cov(xs, 0.05);
    EXPECT_LT((C.eigenvalues().array() - 0.05).abs().maxCoeff(), 1e-12);
  }
}

TEST(EmpiricalCov, EpsShiftsEveryEigenvalue) {
  Grid g(16);
  for (std::size_t n : {8u, 200u}) {
    auto xs = from_columns(g, sample_gaussian_batch(rbf_cov(g, 0.1), n, 5));
    CovOperator a = empirical_cov(xs, 0.0), b = empirical_cov(xs, 0.05);
    EXPECT_LT(((b.eigenvalues() - a.eigenvalues()).array() - 0.05).abs().maxCoeff(), 1e-10);
  }
}

TEST(EmpiricalCov, SnapshotMatchesDirect) {
  Grid g(32);
  auto xs = from_columns(g, sample_gaussian_batch(brownian_cov(g), 12, 6));
  CovOperator snap = empirical_cov(xs, 0.0);
  Matrix X = as_columns(xs);
  X.colwise() -= X.rowwise().mean();
  Matrix K = X * X.transpose() / 12.0;
  EXPECT_LT(rel_diff(snap.kernel_matrix(), K), 1e-10);
  const Matrix gram = g.weight() * snap.basis().transpose() * snap.basis();
  EXPECT_LT((gram - Matrix::Identity(32, 32)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(EmpiricalCov, TopEigenvaluesConcentrate) {
  Grid g(64);
  CovOperator C = rbf_cov(g, 1.0 / 20.0);
  CovOperator E = empirical_cov(from_columns(g, sample_gaussian_batch(C, 5000, 11)), 0.0);
  for (Eigen::Index i = 0; i < 5; ++i)
    EXPECT_LT(std::abs(E.eigenvalues()[i] / C.eigenvalues()[i] - 1.0), 0.10) << "i=" << i;
}

TEST(EmpiricalCov, ConvergesWithSampleSize) {
  Grid g(32);
  CovOperator C = rbf_cov(g, 0.1);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t n : {500u, 5000u, 50000u}) {
    CovOperator E = empirical_cov(from_columns(g, sample_gaussian_batch(C, n, 21)), 0.0);
    const double err = (E.operator_matrix() - C.operator_matrix()).norm();
    EXPECT_LT(err, prev);
    prev = err;
  }
}

TEST(EmpiricalCov, RejectsBadInput) {
  Grid g(4);
  EXPECT_THROW(empirical_cov({GridFunction(g)}, 0.0), std::invalid_argument);
  EXPECT_THROW(empirical_cov({GridFunction(g), GridFunction(g)}, -1.0), std::invalid_argument);
}

TEST(SampleGaussian, ZeroSpectrumReturnsMean) {
  Grid g(8);
  CovOperator C = CovOperator::from_spectrum(g, Vector::Zero(8), identity_cov(g).basis(), "zero", {});
  GridFunction m = random_function(g, 2);
  EXPECT_EQ(sample_gaussian(C, m, 42).values(), m.values());
}

TEST(SampleGaussian, SecondMomentIsTrace) {
  Grid g(64);
  for (const CovOperator& C : {brownian_cov(g), rbf_cov(g, 0.05)}) {
    Matrix X = sample_gaussian_batch(C, 10000, 3);
    std::vector<double> n2(10000);
    for (Eigen::Index j = 0; j < X.cols(); ++j) n2[static_cast<std::size_t>(j)] = g.weight() * X.col(j).squaredNorm();
    auto ms = testutil::mean_se(n2);
    EXPECT_LT(std::abs(ms.mean - C.trace()), 3.0 * ms.se);
  }
}

TEST(SampleGaussian, DeterministicForSeed) {
  CovOperator C = rbf_cov(Grid(16), 0.1);
  EXPECT_EQ(sample_gaussian(C, std::nullopt, 9).values(), sample_gaussian(C, std::nullopt, 9).values());
  EXPECT_NE(sample_gaussian(C, std::nullopt, 9).values(), sample_gaussian(C, std::nullopt, 10).values());
  EXPECT_EQ(sample_gaussian_batch(C, 5, 1), sample_gaussian_batch(C, 5, 1));
}

TEST(CovOperator, JsonRoundTrip) {
  Grid g(16);
  CovOperator r = rbf_cov(g, 0.07, 1.5);
  CovOperator r2 = cov_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(r2.kind(), "rbf");
  EXPECT_LT(rel_diff(r2.kernel_matrix(), r.kernel_matrix()), 1e-14);
  CovOperator e = empirical_cov(from_columns(g, sample_gaussian_batch(r, 50, 2)), 0.01);
  CovOperator e2 = cov_from_json(nlohmann::json::parse(to_json(e).dump()));
  EXPECT_EQ(e2.eigenvalues(), e.eigenvalues());
  EXPECT_EQ(e2.basis(), e.basis());
}

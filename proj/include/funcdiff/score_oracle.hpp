#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/forward_process.hpp"
#include "funcdiff/measures.hpp"
#include "funcdiff/score_fn.hpp"

namespace funcdiff {

namespace detail {

inline double offdiag_ratio(const Matrix& P) {
  const double diag = P.diagonal().cwiseAbs().maxCoeff();
  Matrix off = P;
  off.diagonal().setZero();
  const double o = off.cwiseAbs().maxCoeff();
  return diag > 0.0 ? o / diag : (o > 0.0 ? 1.0 : 0.0);
}

/// Cholesky of a symmetric matrix, throwing on (numerical) singularity.
inline Eigen::LLT<Matrix> checked_llt(const Matrix& K, const char* where) {
  Eigen::LLT<Matrix> llt(0.5 * (K + K.transpose()));
  if (llt.info() != Eigen::Success) throw SingularOperatorError(std::string(where) + ": covariance is singular");
  const Vector d = Matrix(llt.matrixL()).diagonal();
  if (d.minCoeff() <= 1e-12 * d.maxCoeff())
    throw SingularOperatorError(std::string(where) + ": covariance is singular beyond tolerance");
  return llt;
}

}  // namespace detail

/// Closed-form reverse drift for a Gaussian data law N(m0, S0) under the OU
/// noising with covariance C: s(t, x) = -C S_t^{-1} (x - m_t).
///
/// Uses a shared eigenbasis when S0 and C are simultaneously diagonal in one
/// of the two stored bases; otherwise a dense Cholesky solve.
class GaussianScoreOracle {
 public:
  GaussianScoreOracle(GaussianMeasure target, CovOperator C) : target_(std::move(target)), C_(std::move(C)) {
    require_same_grid(target_.grid(), C_.grid(), "GaussianScoreOracle");
    const double w = C_.grid().weight();
    const Matrix& Bc = C_.basis();
    Matrix P = w * Bc.transpose() * target_.cov.operator_matrix() * Bc;
    if (detail::offdiag_ratio(P) < 1e-9) {
      basis_ = Bc;
      c_ = C_.eigenvalues();
      sigma_ = P.diagonal();
      spectral_ = true;
      return;
    }
    const Matrix& Bs = target_.cov.basis();
    Matrix Q = w * Bs.transpose() * C_.operator_matrix() * Bs;
    if (detail::offdiag_ratio(Q) < 1e-9) {
      basis_ = Bs;
      c_ = Q.diagonal();
      sigma_ = target_.cov.eigenvalues();
      spectral_ = true;
      return;
    }
    KC_ = C_.kernel_matrix();
    KS0_ = target_.cov.kernel_matrix();
  }

  bool spectral() const { return spectral_; }
  const GaussianMeasure& target() const { return target_; }
  const CovOperator& noise() const { return C_; }

  /// Drift as A x + b.
  AffineDrift affine(double t) const {
    check_time(t);
    const double e = std::exp(-t), one_minus = -std::expm1(-t);
    const Vector mt = std::exp(-0.5 * t) * target_.mean.values();
    Matrix A;
    if (spectral_) {
      Vector gain = spectral_gain(e, one_minus);
      const double w = C_.grid().weight();
      A = -w * basis_ * gain.asDiagonal() * basis_.transpose();
    } else {
      Matrix Kt = e * KS0_ + one_minus * KC_;
      auto llt = detail::checked_llt(Kt, "gaussian_score");
      A = -KC_ * llt.solve(Matrix::Identity(Kt.rows(), Kt.cols()));
    }
    Vector b = -A * mt;
    return {std::move(A), std::move(b)};
  }

  Matrix evaluate(double t, const Matrix& X) const {
    check_time(t);
    const double e = std::exp(-t), one_minus = -std::expm1(-t);
    Matrix R = X;
    R.colwise() -= std::exp(-0.5 * t) * target_.mean.values();
    if (spectral_) {
      const double w = C_.grid().weight();
      Matrix a = w * basis_.transpose() * R;
      Vector gain = spectral_gain(e, one_minus);
      return -(basis_ * (gain.asDiagonal() * a));
    }
    Matrix Kt = e * KS0_ + one_minus * KC_;
    auto llt = detail::checked_llt(Kt, "gaussian_score");
    return -KC_ * llt.solve(R);
  }

  ScoreFn score_fn() const {
    auto self = std::make_shared<GaussianScoreOracle>(*this);
    return ScoreFn(
        C_.grid(), Parameterization::absolute, Provenance::oracle,
        [self](double t, const Matrix& X) { return self->evaluate(t, X); },
        [self](double t) { return self->affine(t); });
  }

 private:
  static void check_time(double t) {
    if (!(t > 0.0)) throw std::invalid_argument("gaussian_score: t must be positive");
  }

  // c_i / (e^{-t} sigma_i + (1 - e^{-t}) c_i) on modes where S_t is retained.
  Vector spectral_gain(double e, double one_minus) const {
    Vector den = e * sigma_ + one_minus * c_;
    const double top = den.maxCoeff();
    if (!(top > 0.0)) throw SingularOperatorError("gaussian_score: S_t vanishes");
    const double cut = C_.rank_tol() * top;
    Vector g(den.size());
    for (Eigen::Index i = 0; i < den.size(); ++i) g[i] = den[i] > cut ? c_[i] / den[i] : 0.0;
    return g;
  }

  GaussianMeasure target_;
  CovOperator C_;
  bool spectral_ = false;
  Matrix basis_;
  Vector c_, sigma_;
  Matrix KC_, KS0_;
};

inline GridFunction gaussian_score(const GaussianMeasure& target, const CovOperator& C, double t,
                                   const GridFunction& x) {
  GaussianScoreOracle o(target, C);
  return GridFunction(x.grid(), o.evaluate(t, x.values()).col(0));
}

inline ScoreFn gaussian_score_fn(const GaussianMeasure& target, const CovOperator& C) {
  return GaussianScoreOracle(target, C).score_fn();
}

/// Stationary oracle s(t, x) = -x for the target N(0, C).
inline ScoreFn stationary_score_fn(const CovOperator& C) {
  return gaussian_score_fn(GaussianMeasure::centered(C), C);
}

/// Log density (w.r.t. Lebesgue measure on grid values) of N(mean, K) with K
/// the Euclidean covariance.
inline double gaussian_log_density(const Vector& mean, const Matrix& K, const Vector& x) {
  auto llt = detail::checked_llt(K, "gaussian_log_density");
  Vector r = x - mean;
  Vector z = llt.matrixL().solve(r);
  const double logdet = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * z.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

/// Reverse drift of a Gaussian mixture data law: responsibility-weighted
/// component drifts, responsibilities from log-sum-exp of the component
/// marginal log-likelihoods at time t.
class MixtureScoreOracle {
 public:
  MixtureScoreOracle(MixtureMeasure target, CovOperator C) : target_(std::move(target)), C_(std::move(C)) {
    require_same_grid(target_.grid(), C_.grid(), "MixtureScoreOracle");
    KC_ = C_.kernel_matrix();
  }

  const MixtureMeasure& target() const { return target_; }

  Matrix evaluate(double t, const Matrix& X) const {
    if (!(t > 0.0)) throw std::invalid_argument("mixture_score: t must be positive");
    const std::size_t K = target_.components.size();
    const double e = std::exp(-t), one_minus = -std::expm1(-t), mf = std::exp(-0.5 * t);
    const Eigen::Index n = X.cols();
    Matrix logw(static_cast<Eigen::Index>(K), n);
    std::vector<Matrix> scores(K);
    for (std::size_t k = 0; k < K; ++k) {
      const auto& comp = target_.components[k];
      Matrix Kt = e * comp.cov.kernel_matrix() + one_minus * KC_;
      auto llt = detail::checked_llt(Kt, "mixture_score");
      const double logdet = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
      Matrix R = X;
      R.colwise() -= mf * comp.mean.values();
      Matrix sol = llt.solve(R);
      scores[k] = -KC_ * sol;
      for (Eigen::Index j = 0; j < n; ++j)
        logw(static_cast<Eigen::Index>(k), j) =
            std::log(target_.weights[k]) - 0.5 * R.col(j).dot(sol.col(j)) - 0.5 * logdet;
    }
    Matrix out = Matrix::Zero(X.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double mx = logw.col(j).maxCoeff();
      if (!std::isfinite(mx)) throw NumericalError("mixture_score: all responsibilities underflow");
      Vector w = (logw.col(j).array() - mx).exp();
      const double z = w.sum();
      if (!(z > 0.0) || !std::isfinite(z)) throw NumericalError("mixture_score: responsibilities are not finite");
      for (std::size_t k = 0; k < K; ++k) out.col(j) += (w[static_cast<Eigen::Index>(k)] / z) * scores[k].col(j);
    }
    return out;
  }

  /// log p_t(x) of the noised mixture.
  double log_density(double t, const Vector& x) const {
    const double e = std::exp(-t), one_minus = -std::expm1(-t), mf = std::exp(-0.5 * t);
    std::vector<double> terms;
    for (std::size_t k = 0; k < target_.components.size(); ++k) {
      const auto& comp = target_.components[k];
      Matrix Kt = e * comp.cov.kernel_matrix() + one_minus * KC_;
      terms.push_back(std::log(target_.weights[k]) + gaussian_log_density(mf * comp.mean.values(), Kt, x));
    }
    const double mx = *std::max_element(terms.begin(), terms.end());
    double acc = 0.0;
    for (double v : terms) acc += std::exp(v - mx);
    return mx + std::log(acc);
  }

  ScoreFn score_fn() const {
    auto self = std::make_shared<MixtureScoreOracle>(*this);
    return ScoreFn(C_.grid(), Parameterization::absolute, Provenance::oracle,
                   [self](double t, const Matrix& X) { return self->evaluate(t, X); });
  }

 private:
  MixtureMeasure target_;
  CovOperator C_;
  Matrix KC_;
};

inline GridFunction mixture_score(const MixtureMeasure& target, const CovOperator& C, double t,
                                  const GridFunction& x) {
  MixtureScoreOracle o(target, C);
  return GridFunction(x.grid(), o.evaluate(t, x.values()).col(0));
}

inline ScoreFn mixture_score_fn(const MixtureMeasure& target, const CovOperator& C) {
  if (target.components.size() == 1) return gaussian_score_fn(target.components.front(), C);
  return MixtureScoreOracle(target, C).score_fn();
}

// ---------------------------------------------------------------------------
// Reverse-time martingale check.

struct MartingaleReport {
  double s = 0.0;
  double t = 0.0;
  std::size_t n_mc = 0;
  double deviation = 0.0;
  double stderr_ = 0.0;
  double min_ess = 0.0;
  std::size_t n_outer = 0;
};

inline nlohmann::json to_json(const MartingaleReport& r) {
  return {{"s", r.s}, {"t", r.t}, {"n_mc", r.n_mc}, {"deviation", r.deviation}, {"stderr", r.stderr_},
          {"min_ess", r.min_ess}, {"n_outer", r.n_outer}};
}

/// Monte-Carlo test of s(t, X_t) = e^{(t-s)/2} E[s(s, X_s) | X_t].
///
/// Paired forward draws (X_s, X_t) are split into outer points (first
/// n_outer pairs, their X_t is conditioned on) and an inner pool (remaining
/// X_s). The conditional expectation is a self-normalized average over the
/// pool weighted by the exact transition density p_{t|s}. The pool is split
/// in two halves giving independent residuals r1, r2 per outer point; the mean
/// of <r1, r2>_{L2} estimates E||residual||^2. Its standard error comes from
/// a delete-a-group jackknife over outer points and pool together.
inline MartingaleReport martingale_check(const MixtureMeasure& target, const CovOperator& C, double s, double t,
                                         std::size_t n_mc, std::uint64_t seed, std::size_t n_outer = 1000) {
  if (!(s > 0.0) || s > t) throw std::invalid_argument("martingale_check: need 0 < s <= t");
  MartingaleReport rep;
  rep.s = s;
  rep.t = t;
  rep.n_mc = n_mc;
  if (s == t) return rep;
  n_outer = std::min(n_outer, n_mc / 4);
  if (n_outer < 2) throw UnreliableEstimateError("martingale_check: n_mc too small");
  rep.n_outer = n_outer;
  const Grid grid = C.grid();
  const Eigen::Index D = grid.dim();
  const double w = grid.weight();

  Matrix X0 = sample_measure(target, n_mc, seed, "martingale_x0");
  Matrix Xs(D, static_cast<Eigen::Index>(n_mc)), Xt(D, static_cast<Eigen::Index>(n_mc));
  const double a_s = std::exp(-0.5 * s), b_s = std::sqrt(-std::expm1(-s));
  const double dt = t - s, a_d = std::exp(-0.5 * dt), var_d = -std::expm1(-dt), b_d = std::sqrt(var_d);
  for (std::size_t j = 0; j < n_mc; ++j) {
    Rng r = Rng::stream(seed, "martingale_pair", j);
    const auto jj = static_cast<Eigen::Index>(j);
    Xs.col(jj) = a_s * X0.col(jj) + b_s * C.synthesize(r.normal_vector(D));
    Xt.col(jj) = a_d * Xs.col(jj) + b_d * C.synthesize(r.normal_vector(D));
  }
  const ScoreFn score = mixture_score_fn(target, C);
  const auto pool = static_cast<Eigen::Index>(n_mc - n_outer);
  const auto outer = static_cast<Eigen::Index>(n_outer);
  Matrix pool_xs = Xs.rightCols(pool);
  Matrix pool_scores = score.evaluate(s, pool_xs);
  Matrix outer_xt = Xt.leftCols(outer);
  Matrix outer_scores = score.evaluate(t, outer_xt);

  // Mahalanobis distances in the Cameron-Martin norm via C's eigenbasis.
  const Eigen::Index r = C.retained_rank();
  if (r == 0) throw SingularOperatorError("martingale_check: C has zero retained rank");
  Vector inv_sqrt = C.eigenvalues().head(r).cwiseSqrt().cwiseInverse();
  Matrix pool_coef = (inv_sqrt.asDiagonal() * (w * C.basis().leftCols(r).transpose() * pool_xs)) * a_d;
  Matrix outer_coef = inv_sqrt.asDiagonal() * (w * C.basis().leftCols(r).transpose() * outer_xt);

  // All pairs are dealt into G groups (outer point i -> i mod G, pool entry
  // j -> (j / 4) mod G). Dropping one group from both sides gives a
  // delete-a-group jackknife replicate; this captures the correlation that
  // the shared pool induces between outer points.
  const int G = static_cast<int>(std::min<std::size_t>(10, n_outer));
  std::vector<double> prod_full(n_outer);
  Matrix prod_drop(G, outer);  // (k, i): product with group k removed from the pool
  double min_ess = std::numeric_limits<double>::infinity();
  const double scale = std::exp(0.5 * dt);
  Vector logk(pool);
  // Quarter q = 2 * sub + half. Each half estimate is jackknifed over its two
  // quarters; otherwise the O(1/pool) bias of self-normalization, shared by
  // both halves, would survive in <r1, r2> as a positive offset.
  std::vector<Matrix> est(static_cast<std::size_t>(G), Matrix::Zero(D, 4));
  Matrix sw(G, 4);
  for (Eigen::Index i = 0; i < outer; ++i) {
    logk = -(pool_coef.colwise() - outer_coef.col(i)).colwise().squaredNorm().transpose() / (2.0 * var_d);
    for (auto& e : est) e.setZero();
    sw.setZero();
    double sw2[2] = {0, 0};
    const double mx = logk.maxCoeff();
    for (Eigen::Index j = 0; j < pool; ++j) {
      const double wt = std::exp(logk[j] - mx);
      const auto q = static_cast<Eigen::Index>(j & 3);
      const auto k = static_cast<std::size_t>((j >> 2) % G);
      est[k].col(q) += wt * pool_scores.col(j);
      sw(static_cast<Eigen::Index>(k), q) += wt;
      sw2[q & 1] += wt * wt;
    }
    Matrix est_tot = Matrix::Zero(D, 4);
    for (const auto& e : est) est_tot += e;
    const Eigen::RowVectorXd sw_tot = sw.colwise().sum();
    for (int h = 0; h < 2; ++h) {
      const double swh = sw_tot[h] + sw_tot[h + 2];
      min_ess = std::min(min_ess, swh * swh / sw2[h]);
    }
    auto product = [&](const Matrix& E, const Eigen::RowVectorXd& W) {
      Vector res[2];
      for (int h = 0; h < 2; ++h) {
        if (!(W[h] > 0.0) || !(W[h + 2] > 0.0)) throw UnreliableEstimateError("martingale_check: zero importance weight");
        const Vector full = (E.col(h) + E.col(h + 2)) / (W[h] + W[h + 2]);
        const Vector jack = 2.0 * full - 0.5 * (E.col(h) / W[h] + E.col(h + 2) / W[h + 2]);
        res[h] = scale * jack - outer_scores.col(i);
      }
      return w * res[0].dot(res[1]);
    };
    prod_full[static_cast<std::size_t>(i)] = product(est_tot, sw_tot);
    for (int k = 0; k < G; ++k)
      prod_drop(k, i) = product(est_tot - est[static_cast<std::size_t>(k)], sw_tot - sw.row(k));
  }
  rep.min_ess = min_ess;
  if (min_ess < 50.0) throw UnreliableEstimateError("martingale_check: effective sample size below 50");
  double mean = 0.0;
  for (double p : prod_full) mean += p;
  mean /= static_cast<double>(n_outer);
  std::vector<double> rep_mean(static_cast<std::size_t>(G), 0.0);
  for (int k = 0; k < G; ++k) {
    double acc = 0.0;
    std::size_t cnt = 0;
    for (Eigen::Index i = 0; i < outer; ++i) {
      if (i % G == k) continue;
      acc += prod_drop(k, i);
      ++cnt;
    }
    rep_mean[static_cast<std::size_t>(k)] = acc / static_cast<double>(cnt);
  }
  double bar = 0.0;
  for (double m : rep_mean) bar += m / G;
  double var = 0.0;
  for (double m : rep_mean) var += (m - bar) * (m - bar);
  rep.deviation = mean;
  rep.stderr_ = std::sqrt(var * (G - 1.0) / G);
  return rep;
}

inline MartingaleReport martingale_check(const GaussianMeasure& target, const CovOperator& C, double s, double t,
                                         std::size_t n_mc, std::uint64_t seed, std::size_t n_outer = 1000) {
  return martingale_check(MixtureMeasure(target), C, s, t, n_mc, seed, n_outer);
}

/// Monte-Carlo E||s(t, X_t)||^2_{L2} under the data law pushed to time t.
inline double score_second_moment(const ScoreFn& score, const MixtureMeasure& target, const CovOperator& C,
                                  double t, std::size_t n, std::uint64_t seed) {
  Matrix X0 = sample_measure(target, n, seed, "moment_x0");
  Matrix noise = sample_gaussian_batch(C, n, seed, "moment_noise");
  Matrix Xt = std::exp(-0.5 * t) * X0 + std::sqrt(-std::expm1(-t)) * noise;
  Matrix S = to_absolute(score).evaluate(t, Xt);
  return C.grid().weight() * S.colwise().squaredNorm().mean();
}

}  // namespace funcdiff

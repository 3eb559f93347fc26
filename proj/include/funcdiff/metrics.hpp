#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/covariance.hpp"
#include "funcdiff/measures.hpp"

namespace funcdiff {

namespace detail {

/// Symmetric PSD square root with round-off eigenvalues clamped at zero.
inline Matrix psd_sqrt(const Matrix& M) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (M + M.transpose()));
  Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Bures-Wasserstein distance in the 1/D-weighted L2 geometry:
/// ||m_a - m_b||^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}).
inline double w2_gaussian(const GaussianMeasure& a, const GaussianMeasure& b) {
  require_same_grid(a.grid(), b.grid(), "w2_gaussian");
  const double mean_term = l2_inner(a.mean - b.mean, a.mean - b.mean);
  // The trace term equals min over orthogonal U of ||S_a^{1/2} - S_b^{1/2} U||_F^2,
  // attained at the polar factor of S_a^{1/2} S_b^{1/2}. Evaluating the residual
  // directly avoids the cancellation in the trace formula, so a = b gives ~eps.
  const Matrix ra = a.cov.sqrt_matrix(), rb = b.cov.sqrt_matrix();
  Eigen::BDCSVD<Matrix> svd(ra * rb, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Matrix U = svd.matrixV() * svd.matrixU().transpose();
  return std::sqrt(mean_term + (ra - rb * U).squaredNorm());
}

/// Empirical mean and covariance (1/(N-1) normalization) of columns.
inline GaussianMeasure fit_gaussian(const Grid& grid, const Matrix& X) {
  if (X.cols() < 2) throw std::invalid_argument("fit_gaussian: need at least 2 samples");
  if (X.rows() != grid.dim()) throw DimensionError("fit_gaussian: row count does not match grid");
  Vector mean = X.rowwise().mean();
  Matrix Xc = X.colwise() - mean;
  Matrix K = Xc * Xc.transpose() / static_cast<double>(X.cols() - 1);
  return GaussianMeasure(GridFunction(grid, mean),
                         CovOperator::from_kernel_matrix(grid, K, "fitted", {{"n_samples", X.cols()}}));
}

inline GaussianMeasure fit_gaussian(const std::vector<GridFunction>& xs) {
  if (xs.empty()) throw std::invalid_argument("fit_gaussian: empty sample set");
  return fit_gaussian(xs.front().grid(), as_columns(xs));
}

/// Exact squared 1D W2 between two empirical measures via the quantile
/// coupling (sizes may differ).
inline double w2_squared_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("w2_squared_1d: empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na, next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    const double d = a[i] - b[j];
    acc += (next - u) * d * d;
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return acc;
}

struct SlicedW2 {
  double value = 0.0;
  double stderr_ = 0.0;
  std::size_t n_proj = 0;
};

/// Sliced W2: directions drawn from N(0, Id_D) and L2-normalized; per
/// direction exact 1D W2^2; the average is square-rooted. stderr is the
/// projection-resampling standard error propagated through the square root.
inline SlicedW2 sliced_w2(const Matrix& xs, const Matrix& ys, std::size_t n_proj, std::uint64_t seed) {
  if (xs.cols() == 0 || ys.cols() == 0) throw std::invalid_argument("sliced_w2: empty sample set");
  if (xs.rows() != ys.rows()) throw DimensionError("sliced_w2: dimension mismatch");
  if (n_proj == 0) throw std::invalid_argument("sliced_w2: need at least one projection");
  const Eigen::Index D = xs.rows();
  const double w = 1.0 / static_cast<double>(D);
  std::vector<double> vals(n_proj);
  Rng rng = Rng::stream(seed, "sliced_w2");
  for (std::size_t p = 0; p < n_proj; ++p) {
    Vector v = rng.normal_vector(D);
    v /= std::sqrt(w * v.squaredNorm());
    Vector px = w * (xs.transpose() * v);
    Vector py = w * (ys.transpose() * v);
    vals[p] = w2_squared_1d(std::vector<double>(px.data(), px.data() + px.size()),
                            std::vector<double>(py.data(), py.data() + py.size()));
  }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(n_proj);
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var = n_proj > 1 ? var / static_cast<double>(n_proj - 1) : 0.0;
  SlicedW2 r;
  r.n_proj = n_proj;
  r.value = std::sqrt(std::max(mean, 0.0));
  const double se2 = std::sqrt(var / static_cast<double>(n_proj));
  r.stderr_ = r.value > 0.0 ? se2 / (2.0 * r.value) : 0.0;
  return r;
}

/// Sum of squared increments over the grid.
inline double quadratic_variation(const GridFunction& f) {
  if (f.size() < 2) throw DimensionError("quadratic_variation: need at least 2 grid points");
  const Vector& v = f.values();
  const Eigen::Index n = v.size();
  return (v.tail(n - 1) - v.head(n - 1)).squaredNorm();
}

inline std::vector<double> quadratic_variations(const Matrix& X) {
  if (X.rows() < 2) throw DimensionError("quadratic_variation: need at least 2 grid points");
  std::vector<double> out(static_cast<std::size_t>(X.cols()));
  const Eigen::Index n = X.rows();
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    out[static_cast<std::size_t>(j)] = (X.col(j).tail(n - 1) - X.col(j).head(n - 1)).squaredNorm();
  return out;
}

struct SpectrumReport {
  std::vector<double> empirical;
  std::vector<double> target;
  std::vector<double> rel_error;
};

inline nlohmann::json to_json(const SpectrumReport& r) {
  return {{"empirical", r.empirical}, {"target", r.target}, {"rel_error", r.rel_error}};
}

/// Top-k eigenvalues of the samples' empirical covariance against C_target's.
inline SpectrumReport spectrum_compare(const std::vector<GridFunction>& samples, const CovOperator& target,
                                       std::size_t k) {
  if (samples.size() < 2) throw std::invalid_argument("spectrum_compare: need at least 2 samples");
  if (static_cast<Eigen::Index>(k) > target.dim()) throw std::out_of_range("spectrum_compare: k exceeds D");
  SpectrumReport r;
  if (k == 0) return r;
  CovOperator emp = empirical_cov(samples, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    r.empirical.push_back(emp.eigenvalues()[ii]);
    r.target.push_back(target.eigenvalues()[ii]);
    const double t = target.eigenvalues()[ii];
    r.rel_error.push_back(t > 0.0 ? std::abs(emp.eigenvalues()[ii] - t) / t : std::abs(emp.eigenvalues()[ii]));
  }
  return r;
}

struct TwoSampleTest {
  double statistic = 0.0;  // standardized U
  double p_value = 1.0;
};

/// Mann-Whitney U test (two-sided, normal approximation with tie correction).
inline TwoSampleTest mann_whitney(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney: empty sample");
  struct Item {
    double v;
    int g;
  };
  std::vector<Item> all;
  all.reserve(a.size() + b.size());
  for (double v : a) all.push_back({v, 0});
  for (double v : b) all.push_back({v, 1});
  std::sort(all.begin(), all.end(), [](const Item& x, const Item& y) { return x.v < y.v; });
  const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size()), n = n1 + n2;
  double rank_a = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].g == 0) rank_a += avg;
    i = j;
  }
  const double u = rank_a - n1 * (n1 + 1.0) / 2.0;
  const double mu = n1 * n2 / 2.0;
  const double sigma = std::sqrt(n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0))));
  TwoSampleTest r;
  if (!(sigma > 0.0)) return r;
  r.statistic = (u - mu) / sigma;
  r.p_value = std::erfc(std::abs(r.statistic) / std::sqrt(2.0));
  return r;
}

/// Overlap coefficient sum_i min(p_i, q_i) of two samples histogrammed on a
/// shared set of bins over [lo, hi].
inline double overlap_coefficient(const std::vector<double>& a, const std::vector<double>& b, double lo, double hi,
                                  std::size_t bins) {
  if (a.empty() || b.empty() || bins == 0 || !(hi > lo)) throw std::invalid_argument("overlap_coefficient: bad input");
  auto hist = [&](const std::vector<double>& xs) {
    std::vector<double> h(bins, 0.0);
    for (double x : xs) {
      auto k = static_cast<long>(std::floor((x - lo) / (hi - lo) * static_cast<double>(bins)));
      if (k < 0 || k >= static_cast<long>(bins)) continue;  // mass outside the range counts as non-overlapping
      h[static_cast<std::size_t>(k)] += 1.0 / static_cast<double>(xs.size());
    }
    return h;
  };
  auto ha = hist(a), hb = hist(b);
  double ovl = 0.0;
  for (std::size_t i = 0; i < bins; ++i) ovl += std::min(ha[i], hb[i]);
  return ovl;
}

}  // namespace funcdiff

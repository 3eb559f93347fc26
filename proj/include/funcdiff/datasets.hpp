#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/covariance.hpp"

namespace funcdiff {

/// i.i.d. draws from N(0, rbf_cov(grid, lengthscale, 1)); column j uses
/// stream (seed, "gp_rbf", j).
inline Matrix gen_gp_rbf(std::size_t n, std::size_t D, double lengthscale, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_gp_rbf: n must be positive");
  return sample_gaussian_batch(rbf_cov(Grid(D), lengthscale, 1.0), n, seed, "gp_rbf");
}

/// Langevin dynamics dX = -V'(X) dt + sigma dB in V(x) = a (x-1)^2 (x+1)^2.
struct DoubleWellSpec {
  double a = 2.5;
  double diffusion = std::sqrt(2.0);
  std::size_t n_points = 256;
  std::size_t substeps = 10;

  double potential(double x) const {
    const double q = x * x - 1.0;
    return a * q * q;
  }
  // V'(x) = 4 a x (x^2 - 1).
  double potential_grad(double x) const { return 4.0 * a * x * (x * x - 1.0); }
  double drift(double x) const { return -potential_grad(x); }

  void validate() const {
    if (n_points < 1) throw std::invalid_argument("DoubleWellSpec: n_points must be positive");
    if (substeps < 1) throw std::invalid_argument("DoubleWellSpec: substeps must be positive");
    if (!(a > 0.0) || !(diffusion >= 0.0)) throw std::invalid_argument("DoubleWellSpec: need a > 0, diffusion >= 0");
  }
};

inline nlohmann::json to_json(const DoubleWellSpec& s) {
  return {{"a", s.a}, {"diffusion", s.diffusion}, {"n_points", s.n_points}, {"substeps", s.substeps}};
}

/// Initial condition: a draw from exp(-V)/Z, or a fixed value.
struct PathInit {
  bool stationary = true;
  double x0 = 0.0;
  static PathInit stationary_law() { return {true, 0.0}; }
  static PathInit fixed(double x) { return {false, x}; }
};

namespace detail {

inline double normal_pdf(double x, double m, double s) {
  const double z = (x - m) / s;
  return std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * M_PI));
}

/// Proposal q = (N(-1, 0.3^2) + N(1, 0.3^2)) / 2 and the envelope constant
/// M >= sup exp(-V)/q (grid search on [-4, 4] with a 10% margin).
struct StationarySampler {
  const DoubleWellSpec& spec;
  double envelope;
  static constexpr double kSigma = 0.3;

  explicit StationarySampler(const DoubleWellSpec& s) : spec(s) {
    double sup = 0.0;
    for (int i = 0; i <= 8000; ++i) {
      const double x = -4.0 + 8.0 * i / 8000.0;
      sup = std::max(sup, std::exp(-spec.potential(x)) / proposal(x));
    }
    envelope = 1.1 * sup;
  }
  double proposal(double x) const { return 0.5 * (normal_pdf(x, -1.0, kSigma) + normal_pdf(x, 1.0, kSigma)); }

  double draw(Rng& rng) const {
    for (int tries = 0; tries < 100000; ++tries) {
      const double x = (rng.uniform() < 0.5 ? -1.0 : 1.0) + kSigma * rng.normal();
      if (rng.uniform() * envelope * proposal(x) <= std::exp(-spec.potential(x))) return x;
    }
    throw NumericalError("double well: rejection sampler failed to accept");
  }
};

}  // namespace detail

/// Draws x ~ exp(-V)/Z by rejection from the two-bump proposal.
inline double sample_stationary(const DoubleWellSpec& spec, Rng& rng) {
  return detail::StationarySampler(spec).draw(rng);
}

/// Euler-Maruyama paths recorded at the grid points t_i = (i+1)/D; the
/// process starts at t = 0 and takes `substeps` steps per grid cell.
/// Column j uses stream (seed, "double_well", j).
inline Matrix gen_double_well_paths(std::size_t n, const DoubleWellSpec& spec, PathInit init, std::uint64_t seed) {
  spec.validate();
  const auto D = static_cast<Eigen::Index>(spec.n_points);
  Matrix out(D, static_cast<Eigen::Index>(n));
  const double h = 1.0 / static_cast<double>(spec.n_points) / static_cast<double>(spec.substeps);
  const double sq = spec.diffusion * std::sqrt(h);
  const detail::StationarySampler stationary(spec);
  parallel_chunks(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j) {
      Rng rng = Rng::stream(seed, "double_well", j);
      double x = init.stationary ? stationary.draw(rng) : init.x0;
      for (Eigen::Index i = 0; i < D; ++i) {
        for (std::size_t k = 0; k < spec.substeps; ++k) {
          x += spec.drift(x) * h;
          if (sq > 0.0) x += sq * rng.normal();
        }
        if (!std::isfinite(x)) {
          std::ostringstream os;
          os << "double well: path " << j << " diverged at grid point " << i;
          throw NumericalError(os.str());
        }
        out(i, static_cast<Eigen::Index>(j)) = x;
      }
    }
  });
  return out;
}

struct Band {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double x) const { return x > lo && x < hi; }
  static Band all() { return {}; }
};

/// Paths with X(t_1) in start and X(1) in end; the brute-force bridge law.
inline Matrix bridge_reference(const Matrix& paths, Band start, Band end) {
  if (!(start.lo <= start.hi) || !(end.lo <= end.hi)) throw std::invalid_argument("bridge_reference: bad band");
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < paths.cols(); ++j)
    if (start.contains(paths(0, j)) && end.contains(paths(paths.rows() - 1, j))) keep.push_back(j);
  Matrix out(paths.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = paths.col(keep[k]);
  return out;
}

}  // namespace funcdiff

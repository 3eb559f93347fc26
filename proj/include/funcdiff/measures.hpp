#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "funcdiff/covariance.hpp"

namespace funcdiff {

struct GaussianMeasure {
  GridFunction mean;
  CovOperator cov;

  GaussianMeasure(GridFunction m, CovOperator c) : mean(std::move(m)), cov(std::move(c)) {
    require_same_grid(mean.grid(), cov.grid(), "GaussianMeasure");
  }

  static GaussianMeasure centered(CovOperator c) {
    GridFunction zero(c.grid());
    return GaussianMeasure(std::move(zero), std::move(c));
  }

  const Grid& grid() const { return mean.grid(); }
};

/// Finite Gaussian mixture; weights are normalized on construction.
struct MixtureMeasure {
  std::vector<double> weights;
  std::vector<GaussianMeasure> components;

  MixtureMeasure(std::vector<double> w, std::vector<GaussianMeasure> comps)
      : weights(std::move(w)), components(std::move(comps)) {
    if (weights.empty() || weights.size() != components.size())
      throw std::invalid_argument("MixtureMeasure: weights and components must match and be nonempty");
    double total = 0.0;
    for (double x : weights) {
      if (!(x > 0.0)) throw std::invalid_argument("MixtureMeasure: weights must be positive");
      total += x;
    }
    for (double& x : weights) x /= total;
    for (const auto& c : components) require_same_grid(components.front().grid(), c.grid(), "MixtureMeasure");
  }

  explicit MixtureMeasure(GaussianMeasure g) : MixtureMeasure({1.0}, {std::move(g)}) {}

  const Grid& grid() const { return components.front().grid(); }
};

/// Draws from a Gaussian measure; column j uses stream (seed, tag, j).
inline Matrix sample_measure(const GaussianMeasure& g, std::size_t n, std::uint64_t seed,
                             std::string_view tag = "measure") {
  Matrix x = sample_gaussian_batch(g.cov, n, seed, tag);
  x.colwise() += g.mean.values();
  return x;
}

inline Matrix sample_measure(const MixtureMeasure& m, std::size_t n, std::uint64_t seed,
                             std::string_view tag = "measure") {
  const Grid grid = m.grid();
  Matrix out(grid.dim(), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    Rng r = Rng::stream(seed, tag, j);
    double u = r.uniform(), acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < m.weights.size(); ++k) {
      acc += m.weights[k];
      if (u < acc) break;
    }
    const auto& comp = m.components[k];
    out.col(static_cast<Eigen::Index>(j)) = comp.cov.synthesize(r.normal_vector(grid.dim())) + comp.mean.values();
  }
  return out;
}

}  // namespace funcdiff

#pragma once

#include <cmath>

#include "funcdiff/measures.hpp"

namespace funcdiff {

/// x_t = e^{-t/2} x0 + sqrt(1 - e^{-t}) xi, with xi ~ N(0, C) kept explicitly.
struct NoisingPair {
  double t;
  GridFunction x0;
  GridFunction xt;
  GridFunction xi;
};

inline double ou_mean_factor(double t) { return std::exp(-0.5 * t); }
inline double ou_noise_factor(double t) { return std::sqrt(-std::expm1(-t)); }

/// Exact draw from the OU transition kernel N(e^{-t/2} x0, (1 - e^{-t}) C).
inline NoisingPair transition_sample(const GridFunction& x0, double t, const CovOperator& C, Rng& rng) {
  if (!(t >= 0.0)) throw std::invalid_argument("transition_sample: t must be nonnegative");
  require_same_grid(x0.grid(), C.grid(), "transition_sample");
  GridFunction xi = sample_gaussian(C, std::nullopt, rng);
  Vector xt = ou_mean_factor(t) * x0.values() + ou_noise_factor(t) * xi.values();
  return {t, x0, GridFunction(x0.grid(), std::move(xt)), std::move(xi)};
}

/// Exact marginal p_t when the data law is N(m0, S0):
/// mean e^{-t/2} m0, covariance e^{-t} S0 + (1 - e^{-t}) C.
inline GaussianMeasure marginal_gaussian(const GridFunction& m0, const CovOperator& S0, double t,
                                         const CovOperator& C) {
  require_same_grid(S0.grid(), C.grid(), "marginal_gaussian");
  require_same_grid(m0.grid(), C.grid(), "marginal_gaussian");
  if (!(t >= 0.0)) throw std::invalid_argument("marginal_gaussian: t must be nonnegative");
  if (t == 0.0) return GaussianMeasure(m0, S0);
  const double a = std::exp(-t);
  Matrix k = a * S0.kernel_matrix() + (1.0 - a) * C.kernel_matrix();
  return GaussianMeasure(ou_mean_factor(t) * m0,
                         CovOperator::from_kernel_matrix(C.grid(), k, "ou_marginal",
                                                         {{"t", t}}, C.rank_tol()));
}

inline GaussianMeasure marginal_gaussian(const GaussianMeasure& data, double t, const CovOperator& C) {
  return marginal_gaussian(data.mean, data.cov, t, C);
}

/// Training-time draw t = t_min + (T - t_min) u.
inline double sample_time(Rng& rng, double t_min = 1e-3, double T = 10.0) {
  return t_min + (T - t_min) * rng.uniform();
}

}  // namespace funcdiff

#pragma once

#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/measures.hpp"
#include "funcdiff/score_fn.hpp"

namespace funcdiff {

enum class Variant { classical, relative };

inline const char* to_string(Variant v) { return v == Variant::classical ? "classical" : "relative"; }
inline Variant parse_variant(const std::string& s) {
  if (s == "classical") return Variant::classical;
  if (s == "relative") return Variant::relative;
  throw ConfigError("unknown sampler variant '" + s + "'");
}

/// Drift parameterization each variant integrates.
inline Parameterization drift_parameterization(Variant v) {
  return v == Variant::classical ? Parameterization::absolute : Parameterization::relative;
}

/// Reverse-time knots T = u_0 > u_1 > ... > u_N = t_min.
struct SDESchedule {
  std::vector<double> knots;
  bool last_step_denoise = true;
  Variant variant = Variant::classical;

  static SDESchedule uniform(double T, double t_min, std::size_t n_steps, Variant v = Variant::classical,
                             bool denoise = true) {
    check(T, t_min, n_steps);
    SDESchedule s;
    s.variant = v;
    s.last_step_denoise = denoise;
    s.knots.resize(n_steps + 1);
    for (std::size_t k = 0; k <= n_steps; ++k)
      s.knots[k] = T + (t_min - T) * static_cast<double>(k) / static_cast<double>(n_steps);
    s.knots.back() = t_min;
    return s;
  }

  /// Knots uniform in log t, denser near t_min.
  static SDESchedule geometric(double T, double t_min, std::size_t n_steps, Variant v = Variant::classical,
                               bool denoise = true) {
    check(T, t_min, n_steps);
    SDESchedule s;
    s.variant = v;
    s.last_step_denoise = denoise;
    s.knots.resize(n_steps + 1);
    const double lt = std::log(T), lm = std::log(t_min);
    for (std::size_t k = 0; k <= n_steps; ++k)
      s.knots[k] = std::exp(lt + (lm - lt) * static_cast<double>(k) / static_cast<double>(n_steps));
    s.knots.front() = T;
    s.knots.back() = t_min;
    return s;
  }

  std::size_t n_steps() const { return knots.size() - 1; }
  double horizon() const { return knots.front(); }
  double t_min() const { return knots.back(); }

  void validate() const {
    if (knots.size() < 2) throw std::invalid_argument("SDESchedule: need at least two knots");
    if (!(knots.back() > 0.0)) throw std::invalid_argument("SDESchedule: t_min must be positive");
    for (std::size_t k = 0; k + 1 < knots.size(); ++k)
      if (!(knots[k] > knots[k + 1])) throw std::invalid_argument("SDESchedule: knots must strictly decrease");
  }

 private:
  static void check(double T, double t_min, std::size_t n) {
    if (n < 1) throw std::invalid_argument("SDESchedule: need at least one step");
    if (!(t_min > 0.0) || !(T > t_min)) throw std::invalid_argument("SDESchedule: need T > t_min > 0");
  }
};

inline nlohmann::json to_json(const SDESchedule& s) {
  return {{"T", s.horizon()}, {"t_min", s.t_min()}, {"n_steps", s.n_steps()},
          {"last_step_denoise", s.last_step_denoise}, {"variant", to_string(s.variant)}};
}

/// Coefficients of one exponential-integrator step of length delta:
/// y' = lin * y + gain * drift + sqrt(noise_var) * sqrt(C) xi.
struct StepCoefficients {
  double lin, gain, noise_var;
};

inline StepCoefficients step_coefficients(Variant v, double delta) {
  if (v == Variant::classical) {
    const double em1 = std::expm1(0.5 * delta);  // e^{delta/2} - 1
    return {1.0 + em1, 2.0 * em1, std::expm1(delta)};
  }
  const double om = -std::expm1(-0.5 * delta);  // 1 - e^{-delta/2}
  return {1.0 - om, 2.0 * om, -std::expm1(-delta)};
}

namespace detail {

inline void check_finite(const Matrix& m, const char* what, std::size_t step, double u) {
  if (!m.allFinite()) {
    std::ostringstream os;
    os << "reverse sampler: non-finite " << what << " at step " << step << " (u = " << u << ")";
    throw NumericalError(os.str());
  }
}

inline void check_drift(const ScoreFn& drift, Variant v) {
  if (drift.parameterization() != drift_parameterization(v))
    throw std::invalid_argument(std::string("reverse sampler: ") + to_string(v) + " variant needs a " +
                                to_string(drift_parameterization(v)) + " drift");
}

}  // namespace detail

/// One exponential-integrator step for a batch (columns). xi holds standard
/// normal KL coefficients, one column per trajectory.
inline Matrix exp_step(const Matrix& Y, double u_k, double u_next, const ScoreFn& drift, const CovOperator& C,
                       Variant v, const Matrix& xi, std::size_t step_index = 0) {
  if (!(u_k > u_next)) throw std::invalid_argument("exp_step: need u_k > u_next");
  detail::check_drift(drift, v);
  const StepCoefficients c = step_coefficients(v, u_k - u_next);
  Matrix b = drift.evaluate(u_k, Y);
  detail::check_finite(b, "drift", step_index, u_k);
  Matrix out = c.lin * Y + c.gain * b + std::sqrt(c.noise_var) * C.synthesize(xi);
  detail::check_finite(out, "state", step_index, u_k);
  return out;
}

inline GridFunction exp_step(const GridFunction& y, double u_k, double u_next, const ScoreFn& drift,
                             const CovOperator& C, Variant v, Rng& rng) {
  Matrix xi = rng.normal_vector(C.dim());
  return GridFunction(y.grid(), exp_step(Matrix(y.values()), u_k, u_next, drift, C, v, xi).col(0));
}

/// x -> L x + c.
struct AffineMap {
  Matrix L;
  Vector c;
};

/// Optional state transform applied at knot k before the integrator step
/// (and before the final denoising). `affine` must describe the same map
/// when exact law propagation is requested.
struct StateHook {
  std::function<void(std::size_t, double, Matrix&)> apply;
  std::function<std::optional<AffineMap>(std::size_t, double)> affine;
};

using Observer = std::function<void(std::size_t, double, const Matrix&)>;

/// Reverse-SDE sampling: Y_0 ~ N(0, C), exponential-integrator steps over the
/// knots, then (if enabled) the final noise-free denoising step at
/// u_{N-1}. Trajectory j draws from stream (seed, "trajectory", j).
inline Matrix sample_batch(const ScoreFn& drift, const CovOperator& C, const SDESchedule& sched,
                           std::size_t n_samples, std::uint64_t seed, const StateHook& hook = {},
                           const Observer& observer = {}) {
  sched.validate();
  detail::check_drift(drift, sched.variant);
  require_same_grid(drift.grid(), C.grid(), "sample");
  const Eigen::Index D = C.dim();
  Matrix out(D, static_cast<Eigen::Index>(n_samples));
  if (n_samples == 0) return out;
  const std::size_t N = sched.n_steps();
  const std::size_t last = sched.last_step_denoise ? N - 1 : N;

  auto body = [&](std::size_t b, std::size_t e) {
    const auto n = static_cast<Eigen::Index>(e - b);
    std::vector<Rng> streams;
    streams.reserve(e - b);
    for (std::size_t j = b; j < e; ++j) streams.push_back(Rng::stream(seed, "trajectory", j));
    Matrix xi(D, n);
    auto draw = [&] {
      for (Eigen::Index j = 0; j < n; ++j) xi.col(j) = streams[static_cast<std::size_t>(j)].normal_vector(D);
    };
    draw();
    Matrix Y = C.synthesize(xi);
    for (std::size_t k = 0; k < last; ++k) {
      if (observer) observer(k, sched.knots[k], Y);
      if (hook.apply) hook.apply(k, sched.knots[k], Y);
      draw();
      Y = exp_step(Y, sched.knots[k], sched.knots[k + 1], drift, C, sched.variant, xi, k);
    }
    if (sched.last_step_denoise) {
      const double u = sched.knots[N - 1];
      if (hook.apply) hook.apply(N - 1, u, Y);
      Y = denoise_mean(drift, u, Y);
      detail::check_finite(Y, "denoised state", N - 1, u);
    }
    if (observer) observer(N, sched.knots[N], Y);
    out.middleCols(static_cast<Eigen::Index>(b), n) = Y;
  };
  // Observers see the whole batch, so observed runs stay on one chunk.
  if (observer)
    body(0, n_samples);
  else
    parallel_chunks(n_samples, body);
  return out;
}

inline std::vector<GridFunction> sample(const ScoreFn& drift, const CovOperator& C, const SDESchedule& sched,
                                        std::size_t n_samples, std::uint64_t seed) {
  return from_columns(C.grid(), sample_batch(drift, C, sched, n_samples, seed));
}

/// Exact law of the discretized sampler output for an affine drift.
///
/// Every step is affine in the state plus independent Gaussian noise, so
/// starting from N(0, C) the output is Gaussian; its mean and covariance are
/// propagated in closed form. This is the distribution sample_batch draws
/// from, without Monte-Carlo error.
inline GaussianMeasure propagate_law(const ScoreFn& drift, const CovOperator& C, const SDESchedule& sched,
                                     const StateHook& hook = {}) {
  sched.validate();
  detail::check_drift(drift, sched.variant);
  if (!drift.has_affine()) throw std::invalid_argument("propagate_law: drift has no affine form");
  const Eigen::Index D = C.dim();
  const Matrix KC = C.kernel_matrix();
  Vector mu = Vector::Zero(D);
  Matrix P = KC;
  const std::size_t N = sched.n_steps();
  const std::size_t last = sched.last_step_denoise ? N - 1 : N;
  auto apply_hook = [&](std::size_t k, double u) {
    if (!hook.affine) return;
    auto m = hook.affine(k, u);
    if (!m) return;
    mu = m->L * mu + m->c;
    P = m->L * P * m->L.transpose();
  };
  for (std::size_t k = 0; k < last; ++k) {
    const double u = sched.knots[k];
    apply_hook(k, u);
    const StepCoefficients c = step_coefficients(sched.variant, u - sched.knots[k + 1]);
    AffineDrift a = drift.affine(u);
    Matrix G = c.gain * a.A;
    G.diagonal().array() += c.lin;
    mu = G * mu + c.gain * a.b;
    P = G * P * G.transpose() + c.noise_var * KC;
  }
  if (sched.last_step_denoise) {
    const double u = sched.knots[N - 1];
    apply_hook(N - 1, u);
    AffineDrift a = to_absolute(drift).affine(u);
    const double ef = std::exp(0.5 * u), om = -std::expm1(-u);
    Matrix H = ef * om * a.A;
    H.diagonal().array() += ef;
    mu = H * mu + ef * om * a.b;
    P = H * P * H.transpose();
  }
  return GaussianMeasure(GridFunction(C.grid(), mu),
                         CovOperator::from_kernel_matrix(C.grid(), P, "sampler_law",
                                                         {{"n_steps", N}, {"variant", to_string(sched.variant)}}));
}

}  // namespace funcdiff

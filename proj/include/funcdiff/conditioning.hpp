#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "funcdiff/measures.hpp"
#include "funcdiff/reverse_sampler.hpp"

namespace funcdiff {

/// Linear observation Y = A X0 + xi, xi ~ N(0, noise_cov). A acts on grid
/// values (an "eval" row is a unit vector at the observed grid point).
struct ObservationOp {
  Matrix A;
  Vector y;
  Matrix noise_cov;

  ObservationOp(Matrix a, Vector obs, std::optional<Matrix> noise = std::nullopt)
      : A(std::move(a)), y(std::move(obs)) {
    const Eigen::Index d = A.rows();
    noise_cov = noise ? *noise : Matrix::Zero(d, d);
    validate();
  }

  Eigen::Index n_obs() const { return A.rows(); }
  bool noiseless() const { return noise_cov.isZero(0.0); }

  void validate() const {
    const Eigen::Index d = A.rows();
    if (d < 1) throw DimensionError("ObservationOp: need at least one row");
    if (d > A.cols()) throw DimensionError("ObservationOp: more rows than grid points");
    if (y.size() != d) throw DimensionError("ObservationOp: y length does not match rows of A");
    if (noise_cov.rows() != d || noise_cov.cols() != d) throw DimensionError("ObservationOp: noise_cov shape");
    if (!A.allFinite() || !y.allFinite() || !noise_cov.allFinite())
      throw NumericalError("ObservationOp: non-finite entries");
    Eigen::JacobiSVD<Matrix> svd(A);
    const Vector sv = svd.singularValues();
    if (!(sv[sv.size() - 1] > 1e-10 * sv[0])) throw SingularOperatorError("ObservationOp: A is rank-deficient");
    if ((noise_cov - noise_cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + noise_cov.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("ObservationOp: noise_cov must be symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(noise_cov);
    if (es.eigenvalues().minCoeff() < -1e-12 * (1.0 + es.eigenvalues().cwiseAbs().maxCoeff()))
      throw std::invalid_argument("ObservationOp: noise_cov must be positive semidefinite");
  }

  /// Rows from an observation file:
  /// {"rows": [{"kind": "eval", "at": t} | {"kind": "dense", "coeffs": [...]}],
  ///  "y": [...], "noise_std": sigma}.
  static ObservationOp from_json(const nlohmann::json& j, const Grid& grid) {
    const auto& rows = j.at("rows");
    const auto d = static_cast<Eigen::Index>(rows.size());
    Matrix A = Matrix::Zero(d, grid.dim());
    for (Eigen::Index i = 0; i < d; ++i) {
      const auto& r = rows.at(static_cast<std::size_t>(i));
      const auto kind = r.at("kind").get<std::string>();
      if (kind == "eval") {
        A(i, static_cast<Eigen::Index>(grid.nearest_index(r.at("at").get<double>()))) = 1.0;
      } else if (kind == "dense") {
        auto c = r.at("coeffs").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(c.size()) != grid.dim())
          throw DimensionError("ObservationOp: dense row length does not match grid");
        A.row(i) = Eigen::Map<Vector>(c.data(), grid.dim()).transpose();
      } else {
        throw ConfigError("ObservationOp: unknown row kind '" + kind + "'");
      }
    }
    auto yv = j.at("y").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(yv.size()) != d) throw DimensionError("ObservationOp: y length");
    const double sigma = j.value("noise_std", 0.0);
    if (sigma < 0.0) throw ConfigError("ObservationOp: noise_std must be nonnegative");
    Matrix noise = Matrix::Identity(d, d) * sigma * sigma;
    return ObservationOp(std::move(A), Eigen::Map<Vector>(yv.data(), d), noise);
  }

  /// Two-row endpoint observation (first and last grid points).
  static ObservationOp endpoints(const Grid& grid, double start, double end, double noise_std) {
    Matrix A = Matrix::Zero(2, grid.dim());
    A(0, 0) = 1.0;
    A(1, grid.dim() - 1) = 1.0;
    Vector y(2);
    y << start, end;
    return ObservationOp(std::move(A), std::move(y), Matrix::Identity(2, 2) * noise_std * noise_std);
  }
};

/// Affine projection x -> x + G (y - A x), G = K A^T (A K A^T + C_xi)^{-1}.
/// K = I gives the L2 (H-norm) projection, K = kernel of C gives the
/// Cameron-Martin (U-norm) projection. With C_xi = 0 this is the exact
/// minimizer of ||x' - x|| subject to A x' = y.
class Projector {
 public:
  Projector(const ObservationOp& obs, const Matrix& K) : y_(obs.y), A_(obs.A) {
    if (K.rows() != obs.A.cols()) throw DimensionError("Projector: covariance does not match observation");
    Matrix KAt = K * obs.A.transpose();
    Matrix S = obs.A * KAt + obs.noise_cov;
    Eigen::LDLT<Matrix> ldlt(0.5 * (S + S.transpose()));
    const Vector dg = ldlt.vectorD();
    if (ldlt.info() != Eigen::Success || !(dg.cwiseAbs().minCoeff() > 1e-12 * std::max(1.0, dg.cwiseAbs().maxCoeff())))
      throw SingularOperatorError("Projector: A K A^T + C_xi is singular");
    gain_ = ldlt.solve(KAt.transpose()).transpose();
  }

  static Projector h_norm(const ObservationOp& obs) {
    return Projector(obs, Matrix::Identity(obs.A.cols(), obs.A.cols()));
  }
  static Projector u_norm(const ObservationOp& obs, const CovOperator& C) {
    require_same_grid(Grid(static_cast<std::size_t>(obs.A.cols())), C.grid(), "u_projection");
    return Projector(obs, C.kernel_matrix());
  }

  /// In-place mix X <- lambda X + (1 - lambda) proj(X) on every column.
  void mix(Matrix& X, double lambda) const {
    Matrix R = (-(A_ * X)).colwise() + y_;
    X.noalias() += (1.0 - lambda) * gain_ * R;
  }

  Matrix project(const Matrix& X) const {
    Matrix out = X;
    mix(out, 0.0);
    return out;
  }

  AffineMap mix_map(double lambda) const {
    const Eigen::Index D = A_.cols();
    Matrix L = Matrix::Identity(D, D) - (1.0 - lambda) * gain_ * A_;
    return {std::move(L), (1.0 - lambda) * gain_ * y_};
  }

  const Matrix& gain() const { return gain_; }

 private:
  Vector y_;
  Matrix A_;
  Matrix gain_;
};

inline GridFunction h_projection(const GridFunction& x, const ObservationOp& obs) {
  return GridFunction(x.grid(), Projector::h_norm(obs).project(x.values()).col(0));
}

inline GridFunction u_projection(const GridFunction& x, const ObservationOp& obs, const CovOperator& C) {
  return GridFunction(x.grid(), Projector::u_norm(obs, C).project(x.values()).col(0));
}

enum class ProjectionKind { H, U };

inline const char* to_string(ProjectionKind p) { return p == ProjectionKind::H ? "H" : "U"; }

struct GuidanceConfig {
  ProjectionKind projection = ProjectionKind::U;
  std::optional<CovOperator> cov;  // required for U
  double lambda = 0.2;
  std::size_t apply_every = 1;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("GuidanceConfig: lambda must lie in [0,1]");
    if (apply_every < 1) throw std::invalid_argument("GuidanceConfig: apply_every must be >= 1");
    if (projection == ProjectionKind::U && !cov) throw std::invalid_argument("GuidanceConfig: U projection needs C");
  }

  Projector projector(const ObservationOp& obs) const {
    return projection == ProjectionKind::H ? Projector::h_norm(obs) : Projector::u_norm(obs, *cov);
  }
};

namespace detail {

inline StateHook guidance_hook(const ObservationOp& obs, const GuidanceConfig& g) {
  g.validate();
  if (g.lambda == 1.0) return {};
  auto proj = std::make_shared<Projector>(g.projector(obs));
  const double lambda = g.lambda;
  const std::size_t every = g.apply_every;
  StateHook hook;
  hook.apply = [proj, lambda, every](std::size_t k, double, Matrix& Y) {
    if (k % every == 0) proj->mix(Y, lambda);
  };
  hook.affine = [proj, lambda, every](std::size_t k, double) -> std::optional<AffineMap> {
    if (k % every != 0) return std::nullopt;
    return proj->mix_map(lambda);
  };
  return hook;
}

}  // namespace detail

/// Reverse sampling with projection mixing X <- lambda X + (1 - lambda) X_hat
/// applied before the integrator step at every apply_every-th knot (and
/// before the final denoising). lambda = 1 reproduces sample_batch exactly.
inline Matrix guided_sample(const ScoreFn& drift, const CovOperator& C, const SDESchedule& sched,
                            const ObservationOp& obs, const GuidanceConfig& g, std::size_t n_samples,
                            std::uint64_t seed) {
  if (obs.A.cols() != C.dim()) throw DimensionError("guided_sample: observation does not match grid");
  return sample_batch(drift, C, sched, n_samples, seed, detail::guidance_hook(obs, g));
}

/// Exact output law of guided_sample for an affine drift.
inline GaussianMeasure guided_law(const ScoreFn& drift, const CovOperator& C, const SDESchedule& sched,
                                  const ObservationOp& obs, const GuidanceConfig& g) {
  return propagate_law(drift, C, sched, detail::guidance_hook(obs, g));
}

/// Exact posterior of a linear-Gaussian model.
inline GaussianMeasure gaussian_posterior(const GaussianMeasure& prior, const ObservationOp& obs) {
  if (obs.A.cols() != prior.grid().dim()) throw DimensionError("gaussian_posterior: observation does not match grid");
  const Matrix K = prior.cov.kernel_matrix();
  Matrix KAt = K * obs.A.transpose();
  Matrix S = obs.A * KAt + obs.noise_cov;
  Eigen::LDLT<Matrix> ldlt(0.5 * (S + S.transpose()));
  const Vector dg = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !(dg.cwiseAbs().minCoeff() > 1e-14 * std::max(1.0, dg.cwiseAbs().maxCoeff())))
    throw SingularOperatorError("gaussian_posterior: innovation covariance is singular");
  Vector innov = obs.y - obs.A * prior.mean.values();
  Vector mean = prior.mean.values() + KAt * ldlt.solve(innov);
  Matrix Kpost = K - KAt * ldlt.solve(KAt.transpose());
  return GaussianMeasure(GridFunction(prior.grid(), mean),
                         CovOperator::from_kernel_matrix(prior.grid(), Kpost, "posterior", nlohmann::json::object(),
                                                         prior.cov.rank_tol()));
}

}  // namespace funcdiff

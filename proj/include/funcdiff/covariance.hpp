#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/grid.hpp"

namespace funcdiff {

/// Trace-class covariance operator stored spectrally.
///
/// The operator acts on grid values as the matrix M = K/D, where K is the
/// kernel (Euclidean covariance) matrix. Its eigenfunctions are the columns of
/// basis(); they are orthonormal in the 1/D-weighted L2 inner product, i.e.
/// basis = sqrt(D) * Q for the Euclidean-orthonormal eigenvectors Q of M.
/// Eigenvalues are sorted descending and clamped at zero.
class CovOperator {
 public:
  static constexpr double kDefaultRankTol = 1e-12;

  /// Eigendecomposes the symmetrized kernel matrix K (Euclidean covariance).
  static CovOperator from_kernel_matrix(const Grid& grid, const Matrix& kernel, std::string kind,
                                        nlohmann::json params, double rank_tol = kDefaultRankTol) {
    if (kernel.rows() != grid.dim() || kernel.cols() != grid.dim())
      throw DimensionError("CovOperator: kernel matrix does not match grid");
    Matrix op = 0.5 * (kernel + kernel.transpose()) * grid.weight();
    Eigen::SelfAdjointEigenSolver<Matrix> es(op);
    if (es.info() != Eigen::Success) throw NumericalError("CovOperator: eigendecomposition failed");
    const Eigen::Index n = grid.dim();
    Vector vals(n);
    Matrix basis(n, n);
    const double scale = std::sqrt(static_cast<double>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      // Eigen sorts ascending.
      vals[i] = std::max(es.eigenvalues()[n - 1 - i], 0.0);
      basis.col(i) = es.eigenvectors().col(n - 1 - i) * scale;
    }
    return CovOperator(grid, std::move(vals), std::move(basis), std::move(kind), std::move(params), rank_tol);
  }

  /// Builds from a given spectrum; basis columns must be L2-orthonormal.
  static CovOperator from_spectrum(const Grid& grid, Vector eigenvalues, Matrix basis, std::string kind,
                                   nlohmann::json params, double rank_tol = kDefaultRankTol) {
    const Eigen::Index n = grid.dim();
    if (eigenvalues.size() != n || basis.rows() != n || basis.cols() != n)
      throw DimensionError("CovOperator: spectrum does not match grid");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return eigenvalues[a] > eigenvalues[b]; });
    Vector vals(n);
    Matrix b(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      vals[i] = std::max(eigenvalues[order[static_cast<std::size_t>(i)]], 0.0);
      b.col(i) = basis.col(order[static_cast<std::size_t>(i)]);
    }
    return CovOperator(grid, std::move(vals), std::move(b), std::move(kind), std::move(params), rank_tol);
  }

  const Grid& grid() const { return grid_; }
  Eigen::Index dim() const { return grid_.dim(); }
  const Vector& eigenvalues() const { return eigenvalues_; }
  const Matrix& basis() const { return basis_; }
  GridFunction eigenfunction(Eigen::Index i) const { return GridFunction(grid_, basis_.col(i)); }
  double trace() const { return eigenvalues_.sum(); }
  double rank_tol() const { return rank_tol_; }
  const std::string& kind() const { return kind_; }
  const nlohmann::json& params() const { return params_; }

  /// Number of eigenvalues with c_i >= rank_tol * c_1.
  Eigen::Index retained_rank() const {
    if (eigenvalues_.size() == 0 || eigenvalues_[0] <= 0.0) return 0;
    const double cut = rank_tol_ * eigenvalues_[0];
    Eigen::Index r = 0;
    while (r < eigenvalues_.size() && eigenvalues_[r] >= cut && eigenvalues_[r] > 0.0) ++r;
    return r;
  }

  /// Coefficients <f, e_i> for each column of X.
  Matrix coefficients(const Matrix& X) const {
    check_rows(X, "coefficients");
    return grid_.weight() * basis_.transpose() * X;
  }
  Vector coefficients(const GridFunction& f) const {
    require_same_grid(grid_, f.grid(), "CovOperator::coefficients");
    return grid_.weight() * basis_.transpose() * f.values();
  }

  /// sum_i phi(c_i) <x, e_i> e_i for every column.
  template <class Phi>
  Matrix apply_fn(const Matrix& X, Phi&& phi) const {
    Matrix c = coefficients(X);
    for (Eigen::Index i = 0; i < c.rows(); ++i) c.row(i) *= phi(eigenvalues_[i]);
    return basis_ * c;
  }

  Matrix apply(const Matrix& X) const {
    return apply_fn(X, [](double c) { return c; });
  }
  Matrix apply_sqrt(const Matrix& X) const {
    return apply_fn(X, [](double c) { return std::sqrt(c); });
  }
  /// Regularized inverse on the retained span; other components are dropped.
  Matrix apply_inv(const Matrix& X) const {
    const Eigen::Index r = retained_rank();
    if (r == 0) throw SingularOperatorError("apply_inv: operator has zero retained rank");
    Matrix c = coefficients(X);
    for (Eigen::Index i = 0; i < c.rows(); ++i) c.row(i) *= (i < r ? 1.0 / eigenvalues_[i] : 0.0);
    return basis_ * c;
  }

  GridFunction apply(const GridFunction& f) const { return GridFunction(grid_, apply(as_matrix(f))); }
  GridFunction apply_sqrt(const GridFunction& f) const { return GridFunction(grid_, apply_sqrt(as_matrix(f))); }
  GridFunction apply_inv(const GridFunction& f) const { return GridFunction(grid_, apply_inv(as_matrix(f))); }

  /// Operator matrix M (acts on grid values).
  Matrix operator_matrix() const {
    const double w = grid_.weight();
    return w * basis_ * eigenvalues_.asDiagonal() * basis_.transpose();
  }
  /// Euclidean covariance of KL samples, K = D * M.
  Matrix kernel_matrix() const { return basis_ * eigenvalues_.asDiagonal() * basis_.transpose(); }

  /// Matrix of M^{1/2}.
  Matrix sqrt_matrix() const {
    return grid_.weight() * basis_ * eigenvalues_.cwiseSqrt().asDiagonal() * basis_.transpose();
  }

  /// Karhunen-Loeve synthesis: columns of xi are standard normal coefficient
  /// vectors; returns sum_i sqrt(c_i) xi_i e_i per column.
  Matrix synthesize(const Matrix& xi) const {
    check_rows(xi, "synthesize");
    return basis_ * (eigenvalues_.cwiseSqrt().asDiagonal() * xi);
  }

  CovOperator scaled(double a) const {
    if (a < 0) throw std::invalid_argument("CovOperator::scaled: negative factor");
    return CovOperator(grid_, eigenvalues_ * a, basis_, kind_ + "_scaled",
                       nlohmann::json{{"base", params_}, {"base_kind", kind_}, {"factor", a}}, rank_tol_);
  }

  CovOperator with_rank_tol(double tol) const {
    CovOperator c = *this;
    c.rank_tol_ = tol;
    return c;
  }

 private:
  CovOperator(Grid grid, Vector vals, Matrix basis, std::string kind, nlohmann::json params, double rank_tol)
      : grid_(grid),
        eigenvalues_(std::move(vals)),
        basis_(std::move(basis)),
        rank_tol_(rank_tol),
        kind_(std::move(kind)),
        params_(std::move(params)) {}

  void check_rows(const Matrix& X, const char* where) const {
    if (X.rows() != grid_.dim()) throw DimensionError(std::string("CovOperator::") + where + ": row mismatch");
  }
  static Matrix as_matrix(const GridFunction& f) { return f.values(); }

  Grid grid_;
  Vector eigenvalues_;
  Matrix basis_;
  double rank_tol_;
  std::string kind_;
  nlohmann::json params_;
};

// ---------------------------------------------------------------------------
// Constructors

inline CovOperator rbf_cov(const Grid& grid, double lengthscale, double variance = 1.0) {
  if (!(lengthscale > 0.0) || !(variance > 0.0))
    throw std::invalid_argument("rbf_cov: lengthscale and variance must be positive");
  const Eigen::Index n = grid.dim();
  Matrix k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d = grid.point(static_cast<std::size_t>(i)) - grid.point(static_cast<std::size_t>(j));
      k(i, j) = variance * std::exp(-d * d / (2.0 * lengthscale * lengthscale));
    }
  return CovOperator::from_kernel_matrix(grid, k, "rbf", {{"lengthscale", lengthscale}, {"variance", variance}});
}

/// Brownian motion covariance min(s,t).
inline CovOperator brownian_cov(const Grid& grid) {
  const Eigen::Index n = grid.dim();
  Matrix k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      k(i, j) = std::min(grid.point(static_cast<std::size_t>(i)), grid.point(static_cast<std::size_t>(j)));
  return CovOperator::from_kernel_matrix(grid, k, "brownian", nlohmann::json::object());
}

/// eigenvalue * Id on the discretized L2 space (every eigenvalue equal).
inline CovOperator identity_cov(const Grid& grid, double eigenvalue = 1.0) {
  if (!(eigenvalue > 0.0)) throw std::invalid_argument("identity_cov: eigenvalue must be positive");
  const Eigen::Index n = grid.dim();
  Matrix basis = Matrix::Identity(n, n) * std::sqrt(static_cast<double>(n));
  return CovOperator::from_spectrum(grid, Vector::Constant(n, eigenvalue), std::move(basis), "identity",
                                    {{"eigenvalue", eigenvalue}});
}

/// White noise with the given pointwise variance: the D x D identity matrix of
/// the classical finite-dimensional formulation (operator eigenvalue var/D).
inline CovOperator white_noise_cov(const Grid& grid, double pointwise_variance = 1.0) {
  CovOperator c = identity_cov(grid, pointwise_variance * grid.weight());
  return CovOperator::from_spectrum(grid, c.eigenvalues(), c.basis(), "white",
                                    {{"pointwise_variance", pointwise_variance}});
}

/// Centered second-moment operator of the samples plus eps * Id.
///
/// Uses the snapshot (Gram-matrix) method when there are fewer samples than
/// grid points.
inline CovOperator empirical_cov(const std::vector<GridFunction>& samples, double eps) {
  if (samples.size() < 2) throw std::invalid_argument("empirical_cov: need at least 2 samples");
  if (eps < 0.0) throw std::invalid_argument("empirical_cov: eps must be nonnegative");
  const Grid grid = samples.front().grid();
  const Eigen::Index n = grid.dim();
  const auto count = static_cast<Eigen::Index>(samples.size());
  Matrix X = as_columns(samples);
  Vector mean = X.rowwise().mean();
  X.colwise() -= mean;
  nlohmann::json params{{"n_samples", samples.size()}, {"eps", eps}};
  const double w = grid.weight();
  if (count < n) {
    // Gram matrix G = (w/N) X^T X shares its nonzero spectrum with the operator.
    Matrix gram = (w / static_cast<double>(count)) * (X.transpose() * X);
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (gram + gram.transpose()));
    if (es.info() != Eigen::Success) throw NumericalError("empirical_cov: eigendecomposition failed");
    Matrix basis = Matrix::Zero(n, n);
    Vector vals = Vector::Zero(n);
    Eigen::Index filled = 0;
    const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
    for (Eigen::Index i = count - 1; i >= 0; --i) {
      const double lam = es.eigenvalues()[i];
      if (!(lam > 1e-14 * top) || lam <= 0.0) continue;
      Vector v = X * es.eigenvectors().col(i);
      const double nrm = std::sqrt(w * v.squaredNorm());
      if (!(nrm > 0.0)) continue;
      basis.col(filled) = v / nrm;
      vals[filled] = lam;
      ++filled;
    }
    // Complete to an L2-orthonormal basis with Householder QR.
    if (filled < n) {
      const double s = std::sqrt(static_cast<double>(n));
      Matrix qfull;
      if (filled > 0) {
        Eigen::HouseholderQR<Matrix> qr(basis.leftCols(filled) / s);
        qfull = qr.householderQ() * Matrix::Identity(n, n);
      } else {
        qfull = Matrix::Identity(n, n);
      }
      for (Eigen::Index i = filled; i < n; ++i) basis.col(i) = qfull.col(i) * s;
    }
    vals.array() += eps;
    return CovOperator::from_spectrum(grid, std::move(vals), std::move(basis), "empirical", params);
  }
  Matrix k = (X * X.transpose()) / static_cast<double>(count);
  k.diagonal().array() += eps * static_cast<double>(n);  // eps on the operator = eps*D on K
  return CovOperator::from_kernel_matrix(grid, k, "empirical", params);
}

/// Karhunen-Loeve draw mean + sum sqrt(c_i) xi_i e_i.
inline GridFunction sample_gaussian(const CovOperator& cov, const std::optional<GridFunction>& mean, Rng& rng) {
  Vector xi = rng.normal_vector(cov.dim());
  Vector x = cov.synthesize(xi);
  if (mean) {
    require_same_grid(cov.grid(), mean->grid(), "sample_gaussian");
    x += mean->values();
  }
  return GridFunction(cov.grid(), std::move(x));
}

inline GridFunction sample_gaussian(const CovOperator& cov, const std::optional<GridFunction>& mean,
                                    std::uint64_t seed) {
  Rng rng(seed);
  return sample_gaussian(cov, mean, rng);
}

/// n draws; column j uses the stream (seed, tag, j).
inline Matrix sample_gaussian_batch(const CovOperator& cov, std::size_t n, std::uint64_t seed,
                                    std::string_view tag = "kl") {
  Matrix xi(cov.dim(), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    Rng r = Rng::stream(seed, tag, j);
    xi.col(static_cast<Eigen::Index>(j)) = r.normal_vector(cov.dim());
  }
  return cov.synthesize(xi);
}

// ---------------------------------------------------------------------------
// Operator checkpoints: {kind, params, eigenvalues, eigenfunctions}.

inline nlohmann::json to_json(const CovOperator& c) {
  nlohmann::json ef = nlohmann::json::array();
  for (Eigen::Index i = 0; i < c.dim(); ++i) {
    const auto col = c.basis().col(i);
    ef.push_back(std::vector<double>(col.data(), col.data() + col.size()));
  }
  return {{"kind", c.kind()},
          {"params", c.params()},
          {"n_points", c.grid().size()},
          {"rank_tol", c.rank_tol()},
          {"eigenvalues", std::vector<double>(c.eigenvalues().data(), c.eigenvalues().data() + c.dim())},
          {"eigenfunctions", ef}};
}

/// Rebuilds parametric kernels from {kind, params}; other kinds from the
/// stored spectrum.
inline CovOperator cov_from_json(const nlohmann::json& j) {
  const Grid grid(j.at("n_points").get<std::size_t>());
  const auto kind = j.at("kind").get<std::string>();
  const auto& p = j.at("params");
  double tol = j.value("rank_tol", CovOperator::kDefaultRankTol);
  if (kind == "rbf")
    return rbf_cov(grid, p.at("lengthscale").get<double>(), p.at("variance").get<double>()).with_rank_tol(tol);
  if (kind == "brownian") return brownian_cov(grid).with_rank_tol(tol);
  if (kind == "identity") return identity_cov(grid, p.at("eigenvalue").get<double>()).with_rank_tol(tol);
  if (kind == "white") return white_noise_cov(grid, p.at("pointwise_variance").get<double>()).with_rank_tol(tol);
  if (!j.contains("eigenvalues") || !j.contains("eigenfunctions"))
    throw ConfigError("cov_from_json: kind '" + kind + "' needs a stored spectrum");
  auto ev = j.at("eigenvalues").get<std::vector<double>>();
  const auto n = grid.dim();
  if (static_cast<Eigen::Index>(ev.size()) != n) throw DimensionError("cov_from_json: eigenvalue count");
  Matrix basis(n, n);
  const auto& ef = j.at("eigenfunctions");
  if (static_cast<Eigen::Index>(ef.size()) != n) throw DimensionError("cov_from_json: eigenfunction count");
  for (Eigen::Index i = 0; i < n; ++i) {
    auto col = ef.at(static_cast<std::size_t>(i)).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(col.size()) != n) throw DimensionError("cov_from_json: eigenfunction length");
    basis.col(i) = Eigen::Map<Vector>(col.data(), n);
  }
  return CovOperator::from_spectrum(grid, Eigen::Map<Vector>(ev.data(), n), std::move(basis), kind, p, tol);
}

}  // namespace funcdiff

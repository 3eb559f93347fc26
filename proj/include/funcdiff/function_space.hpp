#pragma once

#include "funcdiff/covariance.hpp"
#include "funcdiff/grid.hpp"

namespace funcdiff {

/// Cameron-Martin inner product <f, C^{-1} g> over the retained eigenpairs.
inline double cm_inner(const GridFunction& f, const GridFunction& g, const CovOperator& C) {
  require_same_grid(f.grid(), g.grid(), "cm_inner");
  require_same_grid(f.grid(), C.grid(), "cm_inner");
  const Eigen::Index r = C.retained_rank();
  if (r == 0) throw SingularOperatorError("cm_inner: operator has zero retained rank");
  const Vector a = C.coefficients(f);
  const Vector b = C.coefficients(g);
  return (a.head(r).array() * b.head(r).array() / C.eigenvalues().head(r).array()).sum();
}

inline double cm_norm(const GridFunction& f, const CovOperator& C) { return std::sqrt(cm_inner(f, f, C)); }

/// Orthogonal projection onto span{e_1..e_d} of C's eigenbasis.
inline GridFunction project(const GridFunction& f, const CovOperator& C, Eigen::Index d) {
  require_same_grid(f.grid(), C.grid(), "project");
  if (d < 1 || d > C.dim()) throw std::out_of_range("project: d must lie in [1, D]");
  const Vector a = C.coefficients(f);
  return GridFunction(f.grid(), C.basis().leftCols(d) * a.head(d));
}

/// Which inner product a loss or projection is measured in.
struct InnerProductKind {
  enum class Tag { L2, CameronMartin } tag = Tag::L2;
  std::optional<CovOperator> cov;

  static InnerProductKind l2() { return {}; }
  static InnerProductKind cameron_martin(CovOperator c) {
    if (c.retained_rank() == 0) throw SingularOperatorError("InnerProductKind: operator has zero retained rank");
    return {Tag::CameronMartin, std::move(c)};
  }

  /// Symmetric weight W with ||v||^2 = (1/D) v^T W v on grid values.
  Matrix weight_matrix(const Grid& grid) const {
    if (tag == Tag::L2) return Matrix::Identity(grid.dim(), grid.dim());
    require_same_grid(grid, cov->grid(), "InnerProductKind::weight_matrix");
    const Eigen::Index r = cov->retained_rank();
    const Matrix& B = cov->basis();
    const double w = grid.weight();
    // C^{-1} on the retained span, as a matrix on values: w * B_r diag(1/c) B_r^T.
    Vector inv = cov->eigenvalues().head(r).cwiseInverse();
    return w * B.leftCols(r) * inv.asDiagonal() * B.leftCols(r).transpose();
  }
};

}  // namespace funcdiff

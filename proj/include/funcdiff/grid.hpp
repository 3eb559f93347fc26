#pragma once

#include <cmath>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "funcdiff/common.hpp"

namespace funcdiff {

/// Uniform grid on (0,1] with points (i+1)/D. Inner products use the flat
/// weight 1/D, so L2 norms are Euclidean norms times sqrt(1/D).
class Grid {
 public:
  explicit Grid(std::size_t n_points) : n_(n_points) {
    if (n_points < 1) throw DimensionError("Grid: need at least one point");
  }

  std::size_t size() const { return n_; }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(n_); }
  double weight() const { return 1.0 / static_cast<double>(n_); }
  double point(std::size_t i) const { return static_cast<double>(i + 1) / static_cast<double>(n_); }

  Vector points() const {
    Vector p(dim());
    for (std::size_t i = 0; i < n_; ++i) p[static_cast<Eigen::Index>(i)] = point(i);
    return p;
  }

  /// Index of the grid point closest to t.
  std::size_t nearest_index(double t) const {
    double k = std::round(t * static_cast<double>(n_)) - 1.0;
    k = std::clamp(k, 0.0, static_cast<double>(n_ - 1));
    return static_cast<std::size_t>(k);
  }

  bool operator==(const Grid& o) const { return n_ == o.n_; }
  bool operator!=(const Grid& o) const { return n_ != o.n_; }

 private:
  std::size_t n_;
};

inline void require_same_grid(const Grid& a, const Grid& b, const char* where) {
  if (a != b) {
    std::ostringstream os;
    os << where << ": grid mismatch (" << a.size() << " vs " << b.size() << " points)";
    throw DimensionError(os.str());
  }
}

/// A real function sampled on a Grid.
class GridFunction {
 public:
  explicit GridFunction(Grid grid) : grid_(grid), values_(Vector::Zero(grid.dim())) {}

  GridFunction(Grid grid, Vector values) : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.dim())
      throw DimensionError("GridFunction: values length does not match grid");
    if (!values_.allFinite()) throw NumericalError("GridFunction: non-finite value");
  }

  static GridFunction constant(Grid grid, double c) {
    return GridFunction(grid, Vector::Constant(grid.dim(), c));
  }

  template <class F>
  static GridFunction from(Grid grid, F&& f) {
    Vector v(grid.dim());
    for (std::size_t i = 0; i < grid.size(); ++i) v[static_cast<Eigen::Index>(i)] = f(grid.point(i));
    return GridFunction(grid, std::move(v));
  }

  const Grid& grid() const { return grid_; }
  const Vector& values() const { return values_; }
  Vector& values() { return values_; }
  double operator[](Eigen::Index i) const { return values_[i]; }
  std::size_t size() const { return grid_.size(); }

  GridFunction& operator+=(const GridFunction& o) {
    require_same_grid(grid_, o.grid_, "GridFunction::+=");
    values_ += o.values_;
    return *this;
  }
  GridFunction& operator-=(const GridFunction& o) {
    require_same_grid(grid_, o.grid_, "GridFunction::-=");
    values_ -= o.values_;
    return *this;
  }
  GridFunction& operator*=(double a) {
    values_ *= a;
    return *this;
  }

  friend GridFunction operator+(GridFunction a, const GridFunction& b) { return a += b; }
  friend GridFunction operator-(GridFunction a, const GridFunction& b) { return a -= b; }
  friend GridFunction operator*(double a, GridFunction f) { return f *= a; }

 private:
  Grid grid_;
  Vector values_;
};

/// Left-endpoint Riemann sum of f*g.
inline double l2_inner(const GridFunction& f, const GridFunction& g) {
  require_same_grid(f.grid(), g.grid(), "l2_inner");
  return f.grid().weight() * f.values().dot(g.values());
}

inline double l2_norm(const GridFunction& f) { return std::sqrt(l2_inner(f, f)); }

// Serialization: CSV row with 17 significant digits, or {"n_points", "values"}.

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string to_csv_row(const GridFunction& f) {
  std::string out;
  for (Eigen::Index i = 0; i < f.values().size(); ++i) {
    if (i) out += ',';
    out += format_double(f.values()[i]);
  }
  return out;
}

inline GridFunction from_csv_row(const std::string& row) {
  std::vector<double> vals;
  std::stringstream ss(row);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    std::size_t used = 0;
    double v = std::stod(cell, &used);
    vals.push_back(v);
  }
  if (vals.empty()) throw DimensionError("from_csv_row: empty row");
  Grid g(vals.size());
  return GridFunction(g, Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size())));
}

inline nlohmann::json to_json(const GridFunction& f) {
  return {{"n_points", f.size()},
          {"values", std::vector<double>(f.values().data(), f.values().data() + f.values().size())}};
}

inline GridFunction grid_function_from_json(const nlohmann::json& j) {
  auto n = j.at("n_points").get<std::size_t>();
  auto v = j.at("values").get<std::vector<double>>();
  if (v.size() != n) throw DimensionError("grid_function_from_json: n_points does not match values");
  return GridFunction(Grid(n), Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(n)));
}

/// Stacks functions as columns of a D x n matrix.
inline Matrix as_columns(const std::vector<GridFunction>& fs) {
  if (fs.empty()) return {};
  Matrix m(fs.front().grid().dim(), static_cast<Eigen::Index>(fs.size()));
  for (std::size_t j = 0; j < fs.size(); ++j) {
    require_same_grid(fs.front().grid(), fs[j].grid(), "as_columns");
    m.col(static_cast<Eigen::Index>(j)) = fs[j].values();
  }
  return m;
}

inline std::vector<GridFunction> from_columns(const Grid& grid, const Matrix& m) {
  if (m.cols() > 0 && m.rows() != grid.dim()) throw DimensionError("from_columns: row count does not match grid");
  std::vector<GridFunction> out;
  out.reserve(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.emplace_back(grid, m.col(j));
  return out;
}

}  // namespace funcdiff

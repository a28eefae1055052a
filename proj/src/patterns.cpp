#include "pivsem/patterns.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace pivsem {

PatternSpec PatternSpec::dense(int rows, int cols) {
  PatternSpec p(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) p.mark_free(i, j);
  p.finalize();
  return p;
}

PatternSpec PatternSpec::symmetric(int n) {
  PatternSpec p(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      if (i >= j)
        p.mark_free(i, j);
      else
        p.mark_duplicate(i, j, j, i);
    }
  p.finalize();
  return p;
}

PatternSpec PatternSpec::correlation(int n) {
  std::vector<bool> diag_free(n, false);
  return symmetric_with_diag(n, diag_free, Vector::Ones(n));
}

PatternSpec PatternSpec::symmetric_with_diag(int n, const std::vector<bool>& diag_free,
                                             const Vector& diag_values) {
  if (static_cast<int>(diag_free.size()) != n || diag_values.size() != n)
    throw std::invalid_argument("symmetric_with_diag: mask/value size mismatch");
  PatternSpec p(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      if (i == j) {
        if (diag_free[i])
          p.mark_free(i, i);
        else
          p.mark_constant(i, i, diag_values[i]);
      } else if (i > j) {
        p.mark_free(i, j);
      } else {
        p.mark_duplicate(i, j, j, i);
      }
    }
  p.finalize();
  return p;
}

PatternSpec PatternSpec::diagonal(int n, const std::vector<bool>& free_mask,
                                  const Vector& const_values) {
  if (static_cast<int>(free_mask.size()) != n || const_values.size() != n)
    throw std::invalid_argument("diagonal: mask/value size mismatch");
  PatternSpec p(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      if (i != j)
        p.mark_constant(i, j, 0.0);
      else if (free_mask[i])
        p.mark_free(i, i);
      else
        p.mark_constant(i, i, const_values[i]);
    }
  p.finalize();
  return p;
}

void PatternSpec::finalize() {
  int next = 0;
  for (size_t k = 0; k < cells_.size(); ++k)
    if (cells_[k].kind == CellKind::Free) cells_[k].index = next++;
  free_count_ = next;
  for (size_t k = 0; k < cells_.size(); ++k) {
    if (cells_[k].kind != CellKind::Duplicate) continue;
    int t = dup_target_[k];
    if (t < 0 || cells_[t].kind != CellKind::Free) {
      std::ostringstream msg;
      msg << "PatternSpec: duplicate cell at vec index " << k
          << " does not reference a free cell";
      throw std::invalid_argument(msg.str());
    }
    cells_[k].index = cells_[t].index;
  }
}

LStructure build_lstructure(PatternSpec pattern) {
  if (!pattern.finalized()) pattern.finalize();
  const int rc = pattern.rows() * pattern.cols();
  const int nf = pattern.free_count();
  LStructure ls{std::move(pattern), Matrix::Zero(rc, nf), Matrix::Zero(nf, rc),
                Vector::Zero(rc)};
  std::vector<bool> seen(nf, false);
  for (int j = 0; j < ls.pattern.cols(); ++j)
    for (int i = 0; i < ls.pattern.rows(); ++i) {
      const PatternCell& c = ls.pattern.at(i, j);
      const int v = ls.pattern.vec_index(i, j);
      switch (c.kind) {
        case CellKind::Free:
          ls.duplication(v, c.index) = 1.0;
          if (!seen[c.index]) {
            ls.elimination(c.index, v) = 1.0;
            seen[c.index] = true;
          }
          break;
        case CellKind::Duplicate:
          ls.duplication(v, c.index) = 1.0;
          break;
        case CellKind::Constant:
          ls.constants[v] = c.value;
          break;
      }
    }
  return ls;
}

Vector pattern_vec(const Matrix& x, const LStructure& ls, double tol) {
  const PatternSpec& p = ls.pattern;
  if (x.rows() != p.rows() || x.cols() != p.cols())
    throw std::invalid_argument("pattern_vec: shape mismatch");
  const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  Vector v(p.free_count());
  for (int j = 0; j < p.cols(); ++j)
    for (int i = 0; i < p.rows(); ++i) {
      const PatternCell& c = p.at(i, j);
      if (c.kind == CellKind::Free) v[c.index] = x(i, j);
    }
  for (int j = 0; j < p.cols(); ++j)
    for (int i = 0; i < p.rows(); ++i) {
      const PatternCell& c = p.at(i, j);
      const double want = c.kind == CellKind::Constant ? c.value : v[c.index];
      if (std::abs(x(i, j) - want) > tol * scale) {
        std::ostringstream msg;
        msg << "pattern_vec: cell (" << i << "," << j << ") = " << x(i, j)
            << " violates the pattern (expected " << want << ")";
        throw std::invalid_argument(msg.str());
      }
    }
  return v;
}

Matrix pattern_unvec(const Vector& v, const LStructure& ls) {
  if (v.size() != ls.free_size())
    throw std::invalid_argument("pattern_unvec: size mismatch");
  Vector full = ls.duplication * v + ls.constants;
  return Eigen::Map<const Matrix>(full.data(), ls.pattern.rows(), ls.pattern.cols());
}

Matrix commutation_matrix(int m, int n) {
  if (m < 1 || n < 1) throw std::invalid_argument("commutation_matrix: bad shape");
  Matrix k = Matrix::Zero(m * n, m * n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < m; ++i) k(i + m * j, j + n * i) = 1.0;
  return k;
}

Matrix numdiff(const std::function<Vector(const Vector&)>& f, const Vector& x0,
               double step) {
  const double base = std::cbrt(std::numeric_limits<double>::epsilon());
  Vector steps(x0.size());
  for (Eigen::Index i = 0; i < x0.size(); ++i)
    steps[i] = step > 0.0 ? step : base * std::max(1.0, std::abs(x0[i]));
  return numdiff_steps(f, x0, steps);
}

Matrix numdiff_steps(const std::function<Vector(const Vector&)>& f, const Vector& x0,
                     const Vector& steps) {
  if (steps.size() != x0.size())
    throw std::invalid_argument("numdiff_steps: one step per coordinate required");
  Vector fx = f(x0);
  Matrix jac(fx.size(), x0.size());
  Vector x = x0;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    const double h = steps[i];
    x[i] = x0[i] + h;
    Vector fp = f(x);
    x[i] = x0[i] - h;
    Vector fm = f(x);
    x[i] = x0[i];
    jac.col(i) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

}  // namespace pivsem

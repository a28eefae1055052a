#pragma once

// Patterned-matrix calculus: vec/v operators for matrices with free,
// repeated and constant cells, generalized duplication/elimination
// matrices (Nel's construction), commutation matrices and a
// central-difference Jacobian used as the oracle for every analytic
// derivative in the library.

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <vector>

namespace pivsem {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class CellKind { Free, Duplicate, Constant };

struct PatternCell {
  CellKind kind = CellKind::Constant;
  int index = -1;      // slot in v(X): own slot for Free, mirrored slot for Duplicate
  double value = 0.0;  // Constant cells only
};

// Grid of cell roles for a rows x cols patterned matrix. Free indices are
// assigned in column-major order of first occurrence so that v(X) is
// deterministic and matches the usual vech/vecp stacking on symmetric and
// strictly-lower patterns.
class PatternSpec {
 public:
  PatternSpec(int rows, int cols)
      : rows_(rows),
        cols_(cols),
        cells_(static_cast<size_t>(rows) * cols),
        dup_target_(static_cast<size_t>(rows) * cols, -1) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("PatternSpec: empty shape");
  }

  static PatternSpec dense(int rows, int cols);
  static PatternSpec symmetric(int p);
  static PatternSpec correlation(int p);
  // Symmetric with fixed diagonal entries where diag_free[i] is false.
  static PatternSpec symmetric_with_diag(int p, const std::vector<bool>& diag_free,
                                         const Vector& diag_values);
  // Diagonal matrix: free diagonal slots per mask, fixed elsewhere.
  static PatternSpec diagonal(int p, const std::vector<bool>& free_mask,
                              const Vector& const_values);

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  const PatternCell& at(int i, int j) const { return cells_[idx(i, j)]; }

  void mark_free(int i, int j) { cells_[idx(i, j)] = {CellKind::Free, -1, 0.0}; }
  void mark_duplicate(int i, int j, int of_i, int of_j) {
    cells_[idx(i, j)] = {CellKind::Duplicate, -1, 0.0};
    dup_target_[idx(i, j)] = static_cast<int>(idx(of_i, of_j));
  }
  void mark_constant(int i, int j, double v) { cells_[idx(i, j)] = {CellKind::Constant, -1, v}; }

  // Assigns v-slots column-major and resolves duplicate references.
  // Throws on dangling duplicates (target not a free cell).
  void finalize();

  bool finalized() const { return free_count_ >= 0; }
  int free_count() const { return free_count_; }

  int vec_index(int i, int j) const { return static_cast<int>(idx(i, j)); }

 private:
  size_t idx(int i, int j) const {
    if (i < 0 || i >= rows_ || j < 0 || j >= cols_)
      throw std::out_of_range("PatternSpec: cell out of range");
    return static_cast<size_t>(j) * rows_ + i;
  }

  int rows_, cols_;
  int free_count_ = -1;
  std::vector<PatternCell> cells_;
  std::vector<int> dup_target_;  // vec index of the mirrored cell, -1 otherwise
};

// Duplication/elimination pair for one pattern:
//   vec(X) = duplication * v(X) + constants          for conforming X
//   v(X)   = elimination * vec(X)
//   elimination * duplication = I
struct LStructure {
  PatternSpec pattern;
  Matrix duplication;   // (rows*cols) x p*
  Matrix elimination;   // p* x (rows*cols)
  Vector constants;     // rows*cols

  int vec_size() const { return pattern.rows() * pattern.cols(); }
  int free_size() const { return pattern.free_count(); }
};

LStructure build_lstructure(PatternSpec pattern);

// v-extraction with conformity validation (duplicates/constants must match
// within tol, relative to the largest magnitude in X).
Vector pattern_vec(const Matrix& x, const LStructure& ls, double tol = 1e-9);

// Reconstruction: reshape(duplication * v + constants).
Matrix pattern_unvec(const Vector& v, const LStructure& ls);

// K_{m,n} with K * vec(X') = vec(X) for every m x n matrix X.
Matrix commutation_matrix(int m, int n);

// Central-difference Jacobian of f at x0. step <= 0 selects
// cbrt(eps) * max(1, |x_i|) per coordinate.
Matrix numdiff(const std::function<Vector(const Vector&)>& f, const Vector& x0,
               double step = 0.0);

// As above with one explicit step per coordinate (callers that need exact
// scale equivariance pass steps proportional to each parameter's natural
// scale).
Matrix numdiff_steps(const std::function<Vector(const Vector&)>& f, const Vector& x0,
                     const Vector& steps);

template <typename DerivedA, typename DerivedB>
Matrix kron(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace pivsem

#pragma once

// Model representation: lavaan-style syntax -> structural matrices, the
// latent-to-observed transformation into per-equation estimating form,
// model-implied instrument (MIIV) selection, and instrument-strength
// diagnostics.

#include "pivsem/data.hpp"

#include <optional>
#include <string>
#include <vector>

namespace pivsem {

enum class CellState { Zero, Free, Fixed };

struct MatCell {
  CellState state = CellState::Zero;
  double value = 0.0;
};

class ParamPattern {
 public:
  ParamPattern() = default;
  ParamPattern(int rows, int cols)
      : rows_(rows), cols_(cols), cells_(static_cast<size_t>(rows) * cols) {}

  MatCell& operator()(int i, int j) { return cells_[static_cast<size_t>(j) * rows_ + i]; }
  const MatCell& operator()(int i, int j) const {
    return cells_[static_cast<size_t>(j) * rows_ + i];
  }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool nonzero_struct(int i, int j) const {
    const MatCell& c = (*this)(i, j);
    return c.state == CellState::Free || (c.state == CellState::Fixed && c.value != 0.0);
  }

 private:
  int rows_ = 0, cols_ = 0;
  std::vector<MatCell> cells_;
};

struct ThresholdDecl {
  bool anchored = false;
  double value = 0.0;
};

enum class Parameterization { Standard, Alternative };

struct ModelSpec {
  std::vector<std::string> observed;  // appearance order
  std::vector<std::string> latents;
  std::vector<std::vector<int>> indicators;  // per latent
  std::vector<int> scaling;                  // per latent, observed index
  std::vector<bool> phantom;                 // wraps an observed structural variable

  ParamPattern lambda;  // p x m loadings
  ParamPattern beta;    // m x m regressions, zero diagonal
  ParamPattern psi;     // m x m disturbance covariance (both halves stored)
  ParamPattern theta;   // p x p error covariance

  std::vector<std::vector<ThresholdDecl>> thresholds;  // per observed; empty = none declared
  std::vector<bool> intercept_decl;                    // "y ~ 1" statements (observed)

  int n_observed() const { return static_cast<int>(observed.size()); }
  int n_latent() const { return static_cast<int>(latents.size()); }
  int observed_index(const std::string& name) const;
  int latent_index(const std::string& name) const;
  bool is_scaling_indicator(int obs) const;
};

ModelSpec parse_model(const std::string& text);
std::string serialize_model(const ModelSpec& model);

// One term of a composite equation error, with its coefficient as a function
// of the structural parameters.
struct ErrorTerm {
  enum class Kind { Eps, Zeta };
  enum class Coef { One, NegLambda, IMinusB };
  Kind kind;
  int index;  // observed (Eps) or latent (Zeta)
  Coef coef = Coef::One;
  int ci = -1, cj = -1;  // cell of Lambda or (I-B)
};

enum class ParamKind { Lambda, Beta, AlphaEta, AlphaY, SigmaZeta, SigmaEps, Tau, Mean, Variance };

struct ParamId {
  ParamKind kind;
  int i = -1, j = -1;
  std::string label;
};

struct MiivEquation {
  int dependent = -1;                 // observed index
  std::vector<int> regressors;        // observed indices with free coefficients
  std::vector<ParamId> coef_ids;      // parallel to regressors
  std::vector<int> fixed_regressors;  // observed indices with fixed coefficients
  std::vector<double> fixed_coefs;
  std::vector<ErrorTerm> error_terms;
  std::vector<int> instruments;  // filled by find_miivs, ascending
  ParamId intercept_id;
  bool latent_equation = false;
  int latent = -1;  // dependent latent for latent equations
};

using MiivSystem = std::vector<MiivEquation>;

// Latent-to-observed transformation: one equation per non-scaling indicator
// and one per latent regression, composite errors assembled from the
// partitioned error map. Throws SpecError on structural problems.
MiivSystem to_estimating_system(const ModelSpec& model);

// Fills each equation's instruments with every observed variable whose
// model-implied covariance with each composite-error term is structurally
// zero, then checks the order condition. Throws IdentificationError naming
// the first underidentified equation.
void find_miivs(MiivSystem& system, const ModelSpec& model);

// Shea-style partial R^2 per regressor from moment-matrix blocks.
// Throws EstimationError when the instrument covariance block is singular.
Vector shea_r2(const MiivEquation& eq, const Matrix& sigma_star);

}  // namespace pivsem

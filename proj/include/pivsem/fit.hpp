#pragma once

// Step 3: equation-wise 2SLS point estimation of the coefficients and
// intercepts from the (possibly reparameterized) moment matrices, closed-form
// GLS for the variance parameters, and analytic-derivative asymptotic
// covariance matrices for both blocks.

#include "pivsem/model.hpp"
#include "pivsem/reparam.hpp"

#include <limits>

namespace pivsem {

// Moment input to the estimator. Produced by step 1 (standard
// parameterization) or step 2 (alternative), or loaded from files.
struct MomentInput {
  std::vector<VariableMeta> vars;
  int n = 0;
  Vector mu;
  Matrix sigma;
  std::vector<std::vector<double>> thresholds;
  std::vector<std::vector<bool>> threshold_free;  // anchored entries are false
  std::vector<bool> mean_free;
  std::vector<bool> variance_free;  // sigma diagonal free
  StatOrder order;                  // acov layout over the free statistics
  Matrix acov;                      // may be 0x0 (point estimates only)
  Parameterization parameterization = Parameterization::Standard;

  int p() const { return static_cast<int>(vars.size()); }
  int var_index(const std::string& name) const;
  bool has_mean_structure() const;

  static MomentInput from_stage_one(const StageOneStats& s);
  static MomentInput from_reparam(const ReparamStats& r);

  // Same statistics with the variables permuted into `names` order (acov
  // rows/columns relabeled accordingly).
  MomentInput reordered(const std::vector<std::string>& names) const;
};

struct EquationReport {
  std::string dependent;
  std::vector<std::string> regressors;
  std::vector<std::string> instruments;
  Vector shea;  // per regressor
};

struct ParamEstimate {
  ParamId id;
  std::string lhs, op, rhs;
  double est = 0.0;
  double se = std::numeric_limits<double>::quiet_NaN();
  bool fixed = false;
  double r2s = std::numeric_limits<double>::quiet_NaN();
};

struct FitResult {
  // structural matrices at the estimates (model observed/latent order)
  Matrix lambda_hat, beta_hat, psi_hat, theta_hat;
  Vector alpha_eta_hat, alpha_y_hat;

  std::vector<ParamId> theta1_ids;  // coefficients then intercepts
  Vector theta1;
  Matrix vcov_theta1;  // 0x0 when no acov was available
  std::vector<ParamId> theta2_ids;  // free Sigma_zeta then free Sigma_eps cells
  Vector theta2;
  Matrix vcov_theta2;

  bool npd_sigma_zeta = false;
  bool npd_sigma_eps = false;
  bool weight_pinv_fallback = false;

  Matrix implied_sigma;
  Vector implied_mu;
  std::vector<EquationReport> equations;
  std::vector<ParamEstimate> table;
  MomentInput moments;  // analyzed moments, in model variable order

  // Analytic derivative blocks behind the covariances, kept for verification:
  // kmat = d theta1 / d (free statistics); j1 = d sigma_free / d coefficients;
  // j2 = d sigma_free / d theta2.
  Matrix kmat, j1, j2;

  const ParamEstimate* find(const std::string& label) const;
};

enum class WeightMode { Full, Diagonal, Identity };

struct FitOptions {
  Parameterization parameterization = Parameterization::Standard;
  AcovMethod acov = AcovMethod::Sandwich;
  int bootstrap_reps = 500;
  std::uint64_t seed = 20260801;
  WeightMode weight = WeightMode::Full;
  int threads = 0;
  bool compute_se = true;
};

// Model-implied moments of the response variables given structural matrices.
// Throws EstimationError when I - B is singular.
std::pair<Matrix, Vector> implied_moments(const Matrix& lambda, const Matrix& beta,
                                          const Matrix& psi, const Matrix& theta_eps,
                                          const Vector& alpha_eta, const Vector& alpha_y);

// Full step 3 on prepared moments. The system is derived from the model; the
// input may list the variables in any order covering the model's observed
// set.
FitResult fit_from_moments(const ModelSpec& model, const MomentInput& input,
                           const FitOptions& options = {});

// Steps 1 (+2 when alternative) + 3 from raw data. Variable kinds come from
// `metas`; model threshold declarations must agree with the data categories.
FitResult fit(const ModelSpec& model, const DataTable& data,
              const std::vector<VariableMeta>& metas, const FitOptions& options = {});

// Convenience: ordinal kinds derived from the model's threshold declarations.
FitResult fit(const ModelSpec& model, const DataTable& data, const FitOptions& options = {});

}  // namespace pivsem

#pragma once

// Step 2: transform the stage-1 statistics to the parameterization with
// user-fixed thresholds, making the means and variances of the latent
// response variables estimable, and carry the covariance of the stacked
// statistics through the analytic Jacobian of the transform.

#include "pivsem/stage_one.hpp"

namespace pivsem {

enum class AnchorKind { Identity, MeanOnly, MeanAndVariance };

struct VariableAnchor {
  AnchorKind kind = AnchorKind::Identity;
  int a = -1, b = -1;               // anchored threshold indices (0-based)
  double tau_a = 0.0, tau_b = 1.0;  // fixed values at the anchors
};

struct ReparamSpec {
  std::vector<VariableAnchor> anchors;  // aligned with the variable list

  static ReparamSpec identity(const std::vector<VariableMeta>& vars);
  // First two thresholds to (0, 1) on every ordinal variable with >= 3
  // categories; mean-only shift (first threshold to 0) for binary variables.
  static ReparamSpec default_anchors(const std::vector<VariableMeta>& vars);

  bool is_identity() const;
};

struct ReparamStats {
  std::vector<VariableMeta> vars;
  ReparamSpec spec;
  int n = 0;

  Vector q1, q2;  // per-variable affine transform, (0, 1) on identity slots
  Vector mu_ddot;
  std::vector<std::vector<double>> tau_ddot;  // per var, anchored entries exact
  Matrix sigma_ddot;

  StatOrder order;  // layout of the free statistics pi
  Matrix acov;      // Var(pi_hat); 0x0 when stage 1 carried no acov

  Vector pi() const;  // stacked free statistics per `order`
};

// Throws SpecError on malformed anchor requests (binary two-anchor, missing
// indices, equal fixed values, anchors on continuous variables).
void validate_reparam_spec(const std::vector<VariableMeta>& vars, const ReparamSpec& spec);

// Per-variable transform constants. Continuous and identity slots get (0, 1).
// Throws EstimationError when the stage-1 thresholds at the anchors coincide.
std::pair<Vector, Vector> compute_q(const StageOneStats& stage1, const ReparamSpec& spec);

// Moments only; `acov` left empty.
ReparamStats transform_moments(const StageOneStats& stage1, const ReparamSpec& spec);

// d pi / d omega, rows ordered per the ReparamStats layout, columns per the
// stage-1 layout. Assembled from the duplication/elimination structures of
// the diagonal transform patterns.
Matrix reparam_jacobian(const StageOneStats& stage1, const ReparamSpec& spec);

// Delta-method covariance L Var(omega) L'.
Matrix var_pi(const StageOneStats& stage1, const Matrix& jacobian);

// transform_moments + Jacobian + delta method when stage 1 carries an acov.
ReparamStats apply_reparam(const StageOneStats& stage1, const ReparamSpec& spec);

}  // namespace pivsem

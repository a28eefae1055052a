#include "pivsem/reparam.hpp"

#include <cmath>
#include <sstream>

namespace pivsem {

namespace {

bool mean_free(const VariableMeta& v, const VariableAnchor& a) {
  return v.kind == VarKind::Continuous || a.kind != AnchorKind::Identity;
}

bool variance_free(const VariableMeta& v, const VariableAnchor& a) {
  return v.kind == VarKind::Continuous || a.kind == AnchorKind::MeanAndVariance;
}

bool threshold_free(const VariableAnchor& a, int k) {
  if (a.kind == AnchorKind::MeanOnly) return k != a.a;
  if (a.kind == AnchorKind::MeanAndVariance) return k != a.a && k != a.b;
  return true;
}

StatOrder build_pi_order(const std::vector<VariableMeta>& vars, const ReparamSpec& spec) {
  const int p = static_cast<int>(vars.size());
  std::vector<int> nthr(p);
  for (int j = 0; j < p; ++j) nthr[j] = vars[j].n_thresholds();
  StatOrder order(p, nthr);
  for (int j = 0; j < p; ++j)
    if (mean_free(vars[j], spec.anchors[j])) order.add({StatKind::Mean, j, -1});
  for (int j = 0; j < p; ++j)
    for (int k = 0; k < vars[j].n_thresholds(); ++k)
      if (threshold_free(spec.anchors[j], k)) order.add({StatKind::Threshold, j, k});
  for (int j = 0; j < p; ++j)
    for (int i = j; i < p; ++i) {
      if (i == j && !variance_free(vars[j], spec.anchors[j])) continue;
      order.add({StatKind::Sigma, i, j});
    }
  return order;
}

// vec-scale map that is nonzero only on diagonal positions of a p x p matrix.
Matrix diag_kernel(const Vector& values) {
  const int p = static_cast<int>(values.size());
  Matrix m = Matrix::Zero(p * p, p * p);
  for (int j = 0; j < p; ++j) m(j * (p + 1), j * (p + 1)) = values[j];
  return m;
}

}  // namespace

ReparamSpec ReparamSpec::identity(const std::vector<VariableMeta>& vars) {
  ReparamSpec spec;
  spec.anchors.assign(vars.size(), VariableAnchor{});
  return spec;
}

ReparamSpec ReparamSpec::default_anchors(const std::vector<VariableMeta>& vars) {
  ReparamSpec spec;
  spec.anchors.assign(vars.size(), VariableAnchor{});
  for (size_t j = 0; j < vars.size(); ++j) {
    if (vars[j].kind != VarKind::Ordinal) continue;
    if (vars[j].n_categories() >= 3)
      spec.anchors[j] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
    else
      spec.anchors[j] = {AnchorKind::MeanOnly, 0, -1, 0.0, 0.0};
  }
  return spec;
}

bool ReparamSpec::is_identity() const {
  for (const auto& a : anchors)
    if (a.kind != AnchorKind::Identity) return false;
  return true;
}

void validate_reparam_spec(const std::vector<VariableMeta>& vars, const ReparamSpec& spec) {
  if (spec.anchors.size() != vars.size())
    throw SpecError("reparameterization spec does not cover every variable");
  for (size_t j = 0; j < vars.size(); ++j) {
    const VariableAnchor& a = spec.anchors[j];
    if (a.kind == AnchorKind::Identity) continue;
    const VariableMeta& v = vars[j];
    if (v.kind != VarKind::Ordinal)
      throw SpecError("variable '" + v.name + "' is continuous; anchors apply to ordinal variables");
    const int nt = v.n_thresholds();
    if (a.a < 0 || a.a >= nt)
      throw SpecError("variable '" + v.name + "': anchored threshold index out of range");
    if (a.kind == AnchorKind::MeanAndVariance) {
      if (v.n_categories() < 3)
        throw SpecError("variable '" + v.name +
                        "' is binary: only a mean-only shift is identified, not mean and variance");
      if (a.b < 0 || a.b >= nt)
        throw SpecError("variable '" + v.name + "': anchored threshold index out of range");
      if (a.a == a.b)
        throw SpecError("variable '" + v.name + "': the two anchored thresholds must differ");
      if (a.tau_a == a.tau_b)
        throw SpecError("variable '" + v.name + "': the two fixed threshold values must differ");
    }
  }
}

std::pair<Vector, Vector> compute_q(const StageOneStats& stage1, const ReparamSpec& spec) {
  validate_reparam_spec(stage1.vars, spec);
  const int p = stage1.p();
  Vector q1 = Vector::Zero(p), q2 = Vector::Ones(p);
  for (int j = 0; j < p; ++j) {
    const VariableAnchor& a = spec.anchors[j];
    if (a.kind == AnchorKind::Identity) continue;
    const auto& tau = stage1.thresholds[j];
    if (a.kind == AnchorKind::MeanOnly) {
      q1[j] = a.tau_a - tau[a.a];
      continue;
    }
    const double ta = tau[a.a], tb = tau[a.b];
    if (ta == tb)
      throw EstimationError("variable '" + stage1.vars[j].name +
                            "': stage-1 thresholds at the anchors coincide, transform is singular");
    // q2 via the simplified quotient; algebraically equal to the printed form
    // wherever that one is defined, but stays finite when tau_a is fixed at 0.
    q2[j] = (a.tau_b - a.tau_a) / (tb - ta);
    q1[j] = (tb * a.tau_a - ta * a.tau_b) / (a.tau_b - a.tau_a);
  }
  return {q1, q2};
}

ReparamStats transform_moments(const StageOneStats& stage1, const ReparamSpec& spec) {
  auto [q1, q2] = compute_q(stage1, spec);
  const int p = stage1.p();

  ReparamStats out;
  out.vars = stage1.vars;
  out.spec = spec;
  out.n = stage1.n;
  out.q1 = q1;
  out.q2 = q2;
  out.mu_ddot = q1.cwiseProduct(q2) + stage1.means;
  out.tau_ddot.resize(p);
  for (int j = 0; j < p; ++j) {
    const auto& tau = stage1.thresholds[j];
    const VariableAnchor& a = spec.anchors[j];
    out.tau_ddot[j].resize(tau.size());
    for (size_t k = 0; k < tau.size(); ++k)
      out.tau_ddot[j][k] = (tau[k] + q1[j]) * q2[j];
    if (a.kind != AnchorKind::Identity) out.tau_ddot[j][a.a] = a.tau_a;  // exact
    if (a.kind == AnchorKind::MeanAndVariance) out.tau_ddot[j][a.b] = a.tau_b;
  }
  out.sigma_ddot = q2.asDiagonal() * stage1.sigma * q2.asDiagonal();
  out.order = build_pi_order(stage1.vars, spec);
  return out;
}

Vector ReparamStats::pi() const {
  Vector v(order.size());
  for (int pos = 0; pos < order.size(); ++pos) {
    const StatId& id = order.entries()[pos];
    switch (id.kind) {
      case StatKind::Mean:
        v[pos] = mu_ddot[id.i];
        break;
      case StatKind::Threshold:
        v[pos] = tau_ddot[id.i][id.j];
        break;
      case StatKind::Sigma:
        v[pos] = sigma_ddot(id.i, id.j);
        break;
    }
  }
  return v;
}

Matrix reparam_jacobian(const StageOneStats& stage1, const ReparamSpec& spec) {
  auto [q1, q2] = compute_q(stage1, spec);
  const int p = stage1.p();
  const std::vector<VariableMeta>& vars = stage1.vars;
  const StatOrder& omega = stage1.order;
  StatOrder pi = build_pi_order(vars, spec);

  // Scalar kernels of the Q derivatives per slot. The simplified forms keep
  // the tau_a = 0 anchor finite; validated against central differences.
  Vector dq1_da = Vector::Zero(p), dq1_db = Vector::Zero(p);
  Vector dq2_da = Vector::Zero(p), dq2_db = Vector::Zero(p);
  std::vector<bool> has_a(p, false), has_b(p, false);
  for (int j = 0; j < p; ++j) {
    const VariableAnchor& a = spec.anchors[j];
    if (a.kind == AnchorKind::MeanOnly) {
      has_a[j] = true;
      dq1_da[j] = -1.0;
    } else if (a.kind == AnchorKind::MeanAndVariance) {
      has_a[j] = has_b[j] = true;
      const double span = a.tau_b - a.tau_a;
      dq1_da[j] = -a.tau_b / span;
      dq1_db[j] = a.tau_a / span;
      dq2_da[j] = q2[j] * q2[j] / span;
      dq2_db[j] = -q2[j] * q2[j] / span;
    }
  }

  // Patterns for the diagonal operands and the two moment matrices.
  Vector ones = Vector::Ones(p);
  std::vector<bool> mu_free_mask(p), mudd_free_mask(p), var_free_mask(p), vardd_free_mask(p);
  for (int j = 0; j < p; ++j) {
    mu_free_mask[j] = vars[j].kind == VarKind::Continuous;
    mudd_free_mask[j] = mean_free(vars[j], spec.anchors[j]);
    var_free_mask[j] = vars[j].kind == VarKind::Continuous;
    vardd_free_mask[j] = variance_free(vars[j], spec.anchors[j]);
  }
  std::vector<bool> a_mask(has_a.begin(), has_a.end());
  std::vector<bool> b_mask(has_b.begin(), has_b.end());

  LStructure l_da = build_lstructure(PatternSpec::diagonal(p, a_mask, ones));
  LStructure l_db = build_lstructure(PatternSpec::diagonal(p, b_mask, ones));
  LStructure l_mu = build_lstructure(PatternSpec::diagonal(p, mu_free_mask, Vector::Zero(p)));
  LStructure l_mudd = build_lstructure(PatternSpec::diagonal(p, mudd_free_mask, Vector::Zero(p)));
  LStructure l_sig = build_lstructure(PatternSpec::symmetric_with_diag(p, var_free_mask, ones));
  LStructure l_sigdd = build_lstructure(PatternSpec::symmetric_with_diag(p, vardd_free_mask, ones));

  const Matrix dq1da_k = diag_kernel(dq1_da);
  const Matrix dq1db_k = diag_kernel(dq1_db);
  const Matrix dq2da_k = diag_kernel(dq2_da);
  const Matrix dq2db_k = diag_kernel(dq2_db);

  Matrix jac = Matrix::Zero(pi.size(), omega.size());

  // Column/row index tables for the diagonal patterns (ascending variable).
  std::vector<int> da_cols, db_cols, mu_cols, mudd_rows;
  for (int j = 0; j < p; ++j) {
    if (has_a[j]) da_cols.push_back(omega.threshold(j, spec.anchors[j].a));
    if (has_b[j]) db_cols.push_back(omega.threshold(j, spec.anchors[j].b));
    if (mu_free_mask[j]) mu_cols.push_back(omega.mean(j));
    if (mudd_free_mask[j]) mudd_rows.push_back(pi.mean(j));
  }
  std::vector<int> sig_cols, sigdd_rows;
  for (int j = 0; j < p; ++j)
    for (int i = j; i < p; ++i) {
      if (!(i == j && !var_free_mask[j])) sig_cols.push_back(omega.sigma(i, j));
      if (!(i == j && !vardd_free_mask[j])) sigdd_rows.push_back(pi.sigma(i, j));
    }

  auto scatter = [&jac](const Matrix& block, const std::vector<int>& rows,
                        const std::vector<int>& cols) {
    for (size_t r = 0; r < rows.size(); ++r)
      for (size_t c = 0; c < cols.size(); ++c)
        jac(rows[r], cols[c]) += block(static_cast<int>(r), static_cast<int>(c));
  };

  const Matrix eye = Matrix::Identity(p, p);
  const Matrix q2s = q2.asDiagonal() * stage1.sigma;

  // Covariance rows.
  const Matrix sig_kernel = kron(q2s, eye) + kron(eye, q2s);
  scatter(l_sigdd.elimination * (sig_kernel * dq2da_k) * l_da.duplication, sigdd_rows, da_cols);
  scatter(l_sigdd.elimination * (sig_kernel * dq2db_k) * l_db.duplication, sigdd_rows, db_cols);
  scatter(l_sigdd.elimination * kron(q2.asDiagonal().toDenseMatrix(), q2.asDiagonal().toDenseMatrix()) *
              l_sig.duplication,
          sigdd_rows, sig_cols);

  // Mean rows.
  const Matrix mu_kernel_a =
      kron(q2.asDiagonal().toDenseMatrix(), eye) * dq1da_k + kron(eye, q1.asDiagonal().toDenseMatrix()) * dq2da_k;
  const Matrix mu_kernel_b =
      kron(q2.asDiagonal().toDenseMatrix(), eye) * dq1db_k + kron(eye, q1.asDiagonal().toDenseMatrix()) * dq2db_k;
  scatter(l_mudd.elimination * mu_kernel_a * l_da.duplication, mudd_rows, da_cols);
  scatter(l_mudd.elimination * mu_kernel_b * l_db.duplication, mudd_rows, db_cols);
  scatter(l_mudd.elimination * l_mu.duplication, mudd_rows, mu_cols);

  // Threshold rows, one diagonal block per free-threshold level k.
  std::vector<std::vector<int>> free_idx(p);
  int levels = 0;
  for (int j = 0; j < p; ++j) {
    for (int k = 0; k < vars[j].n_thresholds(); ++k)
      if (threshold_free(spec.anchors[j], k)) free_idx[j].push_back(k);
    levels = std::max(levels, static_cast<int>(free_idx[j].size()));
  }
  for (int level = 0; level < levels; ++level) {
    std::vector<bool> lvl_mask(p, false);
    Vector dtau = Vector::Zero(p);
    std::vector<int> lvl_rows, lvl_cols;
    for (int j = 0; j < p; ++j) {
      if (static_cast<int>(free_idx[j].size()) <= level) continue;
      lvl_mask[j] = true;
      const int k = free_idx[j][level];
      dtau[j] = stage1.thresholds[j][k];
      lvl_rows.push_back(pi.threshold(j, k));
      lvl_cols.push_back(omega.threshold(j, k));
    }
    LStructure l_lvl = build_lstructure(PatternSpec::diagonal(p, lvl_mask, Vector::Zero(p)));
    const Matrix q2_kernel = kron(q2.asDiagonal().toDenseMatrix(), eye);
    scatter(l_lvl.elimination * q2_kernel * l_lvl.duplication, lvl_rows, lvl_cols);
    const Matrix tau_kernel_a =
        q2_kernel * dq1da_k + kron(eye, (q1 + dtau).asDiagonal().toDenseMatrix()) * dq2da_k;
    const Matrix tau_kernel_b =
        q2_kernel * dq1db_k + kron(eye, (q1 + dtau).asDiagonal().toDenseMatrix()) * dq2db_k;
    scatter(l_lvl.elimination * tau_kernel_a * l_da.duplication, lvl_rows, da_cols);
    scatter(l_lvl.elimination * tau_kernel_b * l_db.duplication, lvl_rows, db_cols);
  }

  return jac;
}

Matrix var_pi(const StageOneStats& stage1, const Matrix& jacobian) {
  if (stage1.acov.size() == 0)
    throw EstimationError("var_pi: stage-1 statistics carry no asymptotic covariance");
  if (jacobian.cols() != stage1.acov.rows())
    throw EstimationError("var_pi: Jacobian is not conformable with Var(omega)");
  Matrix v = jacobian * stage1.acov * jacobian.transpose();
  return 0.5 * (v + v.transpose());
}

ReparamStats apply_reparam(const StageOneStats& stage1, const ReparamSpec& spec) {
  ReparamStats out = transform_moments(stage1, spec);
  if (stage1.acov.size() > 0) out.acov = var_pi(stage1, reparam_jacobian(stage1, spec));
  return out;
}

}  // namespace pivsem

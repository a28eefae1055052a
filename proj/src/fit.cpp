#include "pivsem/fit.hpp"

#include "pivsem/stage_one.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace pivsem {

namespace {

Matrix pinv_psd(const Matrix& a, bool* degraded, double rel_cut = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  const Vector& ev = es.eigenvalues();
  const double cut = rel_cut * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Vector inv = Vector::Zero(ev.size());
  bool dropped = false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] > cut)
      inv[i] = 1.0 / ev[i];
    else
      dropped = true;
  }
  if (degraded) *degraded = *degraded || dropped;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

// Symmetric pattern from a model parameter matrix; free diagonal cells can be
// demoted to constants (derived error variances under a fixed-diagonal
// moment matrix).
PatternSpec pattern_from_symmetric(const ParamPattern& pm, const std::vector<bool>& demote_diag) {
  const int n = pm.rows();
  PatternSpec p(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const MatCell& c = pm(std::max(i, j), std::min(i, j));
      const bool lower_free =
          c.state == CellState::Free && !(i == j && demote_diag[i]);
      if (i < j) {
        if (lower_free)
          p.mark_duplicate(i, j, j, i);
        else
          p.mark_constant(i, j, c.state == CellState::Fixed ? c.value : 0.0);
      } else if (lower_free) {
        p.mark_free(i, j);
      } else {
        p.mark_constant(i, j, c.state == CellState::Fixed ? c.value : 0.0);
      }
    }
  p.finalize();
  return p;
}

std::vector<ParamId> symmetric_free_ids(const ParamPattern& pm, const std::vector<bool>& demote,
                                        ParamKind kind, const std::string& stem) {
  std::vector<ParamId> ids;
  const int n = pm.rows();
  for (int j = 0; j < n; ++j)
    for (int i = j; i < n; ++i) {
      if (pm(i, j).state != CellState::Free) continue;
      if (i == j && demote[i]) continue;
      ids.push_back({kind, i, j,
                     stem + "(" + std::to_string(i + 1) + "," + std::to_string(j + 1) + ")"});
    }
  return ids;
}

StatOrder moment_order_for(const std::vector<VariableMeta>& vars,
                           const std::vector<bool>& mean_free,
                           const std::vector<std::vector<bool>>& threshold_free,
                           const std::vector<bool>& variance_free) {
  const int p = static_cast<int>(vars.size());
  std::vector<int> nthr(p);
  for (int j = 0; j < p; ++j) nthr[j] = vars[j].n_thresholds();
  StatOrder order(p, nthr);
  for (int j = 0; j < p; ++j)
    if (mean_free[j]) order.add({StatKind::Mean, j, -1});
  for (int j = 0; j < p; ++j)
    for (int k = 0; k < nthr[j]; ++k)
      if (threshold_free[j][k]) order.add({StatKind::Threshold, j, k});
  for (int j = 0; j < p; ++j)
    for (int i = j; i < p; ++i) {
      if (i == j && !variance_free[j]) continue;
      order.add({StatKind::Sigma, i, j});
    }
  return order;
}

struct EquationWork {
  int nv = 0, nz = 0;
  Matrix svv, svz;
  Vector svy;           // fixed-regressor terms folded into the left side
  Vector coefs;         // nz
  Vector resid_metric;  // Svv^-1 (svy - Svz coefs)
  Matrix w;             // U^-1 Svz' Svv^-1, the coefficient influence map
  double intercept = 0.0;
};

std::vector<EquationWork> solve_theta1(const MiivSystem& system, const MomentInput& in,
                                       const ModelSpec& model) {
  std::vector<EquationWork> works;
  works.reserve(system.size());
  for (const MiivEquation& eq : system) {
    EquationWork w;
    w.nv = static_cast<int>(eq.instruments.size());
    w.nz = static_cast<int>(eq.regressors.size());
    w.svv.resize(w.nv, w.nv);
    w.svz.resize(w.nv, w.nz);
    w.svy.resize(w.nv);
    for (int a = 0; a < w.nv; ++a) {
      for (int b = 0; b < w.nv; ++b) w.svv(a, b) = in.sigma(eq.instruments[a], eq.instruments[b]);
      for (int b = 0; b < w.nz; ++b) w.svz(a, b) = in.sigma(eq.instruments[a], eq.regressors[b]);
      w.svy[a] = in.sigma(eq.instruments[a], eq.dependent);
      for (size_t f = 0; f < eq.fixed_regressors.size(); ++f)
        w.svy[a] -= eq.fixed_coefs[f] * in.sigma(eq.instruments[a], eq.fixed_regressors[f]);
    }
    Eigen::LLT<Matrix> llt(w.svv);
    if (llt.info() != Eigen::Success)
      throw EstimationError("instrument covariance matrix is singular for the equation of '" +
                            model.observed[eq.dependent] + "' (MIIV condition (c))");
    if (w.nz > 0) {
      Matrix svv_inv_svz = llt.solve(w.svz);
      Matrix u = w.svz.transpose() * svv_inv_svz;
      Eigen::FullPivLU<Matrix> ulu(u);
      if (!ulu.isInvertible())
        throw EstimationError(
            "instruments carry no independent information on the regressors of '" +
            model.observed[eq.dependent] + "' (MIIV condition (b))");
      w.coefs = ulu.solve(w.svz.transpose() * llt.solve(w.svy));
      w.w = ulu.solve(svv_inv_svz.transpose());
      w.resid_metric = llt.solve(w.svy - w.svz * w.coefs);
    } else {
      w.coefs.resize(0);
      w.w.resize(0, w.nv);
      w.resid_metric = llt.solve(w.svy);
    }
    double icpt = in.mu[eq.dependent];
    for (int r = 0; r < w.nz; ++r) icpt -= w.coefs[r] * in.mu[eq.regressors[r]];
    for (size_t f = 0; f < eq.fixed_regressors.size(); ++f)
      icpt -= eq.fixed_coefs[f] * in.mu[eq.fixed_regressors[f]];
    w.intercept = icpt;
    works.push_back(std::move(w));
  }
  return works;
}

// Gradient of theta1 (coefficients, then intercepts when the mean structure
// is present) in the free statistics of the input.
Matrix theta1_jacobian(const MiivSystem& system, const std::vector<EquationWork>& works,
                       const MomentInput& in, bool mean_rows) {
  int ncoef = 0;
  for (const auto& w : works) ncoef += w.nz;
  const int nrows = ncoef + (mean_rows ? static_cast<int>(works.size()) : 0);
  Matrix k = Matrix::Zero(nrows, in.order.size());

  int coef_at = 0;
  for (size_t e = 0; e < system.size(); ++e) {
    const MiivEquation& eq = system[e];
    const EquationWork& w = works[e];
    const std::vector<int>& vs = eq.instruments;

    if (w.nz > 0) {
      const Matrix uinv = w.w * w.svv * w.w.transpose();  // recovers U^-1
      // d theta / d vec(S_vz)
      const Matrix t_zv = commutation_matrix(w.nz, w.nv);  // vec(S_vz) -> vec(S_vz')
      Matrix dsvz = kron(w.resid_metric.transpose(), uinv) * t_zv -
                    kron(w.coefs.transpose(), w.w);
      for (int zi = 0; zi < w.nz; ++zi)
        for (int vi = 0; vi < w.nv; ++vi) {
          const int col = in.order.sigma(vs[vi], eq.regressors[zi]);
          k.col(col).segment(coef_at, w.nz) += dsvz.col(vi + w.nv * zi);
        }
      // d theta / d vec(S_vy), with the fixed-regressor fold
      for (int vi = 0; vi < w.nv; ++vi) {
        k.col(in.order.sigma(vs[vi], eq.dependent)).segment(coef_at, w.nz) += w.w.col(vi);
        for (size_t f = 0; f < eq.fixed_regressors.size(); ++f)
          k.col(in.order.sigma(vs[vi], eq.fixed_regressors[f])).segment(coef_at, w.nz) -=
              eq.fixed_coefs[f] * w.w.col(vi);
      }
      // d theta / d v(S_vv) through the local symmetric pattern
      std::vector<bool> diag_free(w.nv);
      for (int a = 0; a < w.nv; ++a) diag_free[a] = in.variance_free[vs[a]];
      LStructure lvv =
          build_lstructure(PatternSpec::symmetric_with_diag(w.nv, diag_free, Vector::Ones(w.nv)));
      Matrix dsvv = -kron(w.resid_metric.transpose(), w.w) * lvv.duplication;
      int cell = 0;
      for (int b = 0; b < w.nv; ++b)
        for (int a = b; a < w.nv; ++a) {
          if (a == b && !diag_free[a]) continue;
          k.col(in.order.sigma(vs[a], vs[b])).segment(coef_at, w.nz) += dsvv.col(cell++);
        }
    }

    if (mean_rows) {
      const int row = ncoef + static_cast<int>(e);
      for (int r = 0; r < w.nz; ++r)
        k.row(row) -= in.mu[eq.regressors[r]] * k.row(coef_at + r);
      if (in.mean_free[eq.dependent]) k(row, in.order.mean(eq.dependent)) += 1.0;
      for (int r = 0; r < w.nz; ++r)
        if (in.mean_free[eq.regressors[r]]) k(row, in.order.mean(eq.regressors[r])) -= w.coefs[r];
      for (size_t f = 0; f < eq.fixed_regressors.size(); ++f)
        if (in.mean_free[eq.fixed_regressors[f]])
          k(row, in.order.mean(eq.fixed_regressors[f])) -= eq.fixed_coefs[f];
    }
    coef_at += w.nz;
  }
  return k;
}

void build_table(const ModelSpec& model, const MiivSystem& system,
                 const MomentInput& input, FitResult& res, bool mean_structure, int ncoef) {
  // coefficient lookup: ParamId cell -> (theta1 slot, equation, regressor)
  struct CoefRef {
    int slot, eq, pos;
  };
  std::map<std::string, CoefRef> coef_of;
  {
    int r = 0;
    for (size_t e = 0; e < system.size(); ++e)
      for (size_t c = 0; c < system[e].coef_ids.size(); ++c, ++r)
        coef_of[system[e].coef_ids[c].label] = {r, static_cast<int>(e), static_cast<int>(c)};
  }
  auto se1 = [&](int slot) {
    return res.vcov_theta1.size() > 0 ? std::sqrt(std::max(0.0, res.vcov_theta1(slot, slot)))
                                      : std::numeric_limits<double>::quiet_NaN();
  };
  auto se2 = [&](int slot) {
    return res.vcov_theta2.size() > 0 ? std::sqrt(std::max(0.0, res.vcov_theta2(slot, slot)))
                                      : std::numeric_limits<double>::quiet_NaN();
  };

  auto add_coef_row = [&](const ParamId& id, const std::string& lhs, const std::string& op,
                          const std::string& rhs, double fixed_value, bool fixed) {
    ParamEstimate row;
    row.id = id;
    row.lhs = lhs;
    row.op = op;
    row.rhs = rhs;
    row.fixed = fixed;
    if (fixed) {
      row.est = fixed_value;
    } else {
      const CoefRef& ref = coef_of.at(id.label);
      row.est = res.theta1[ref.slot];
      row.se = se1(ref.slot);
      if (ref.pos < static_cast<int>(res.equations[ref.eq].shea.size()))
        row.r2s = res.equations[ref.eq].shea[ref.pos];
    }
    res.table.push_back(std::move(row));
  };

  const int p = model.n_observed();
  const int m = model.n_latent();

  for (int l = 0; l < m; ++l) {
    if (model.phantom[l]) continue;
    for (int o : model.indicators[l]) {
      const MatCell& c = model.lambda(o, l);
      ParamId id{ParamKind::Lambda, o, l,
                 "lambda(" + std::to_string(o + 1) + "," + std::to_string(l + 1) + ")"};
      add_coef_row(id, model.latents[l], "=~", model.observed[o],
                   c.state == CellState::Fixed ? c.value : 0.0, c.state == CellState::Fixed);
    }
  }
  for (int kk = 0; kk < m; ++kk)
    for (int l = 0; l < m; ++l) {
      const MatCell& c = model.beta(kk, l);
      if (c.state == CellState::Zero) continue;
      ParamId id{ParamKind::Beta, kk, l,
                 "beta(" + std::to_string(kk + 1) + "," + std::to_string(l + 1) + ")"};
      add_coef_row(id, model.latents[kk], "~", model.latents[l],
                   c.state == CellState::Fixed ? c.value : 0.0, c.state == CellState::Fixed);
    }

  for (int v = 0; v < p; ++v) {
    if (input.vars[v].kind != VarKind::Ordinal) continue;
    for (int t = 0; t < input.vars[v].n_thresholds(); ++t) {
      ParamEstimate row;
      row.id = {ParamKind::Tau, v, t,
                "tau(" + std::to_string(v + 1) + "," + std::to_string(t + 1) + ")"};
      row.lhs = model.observed[v];
      row.op = "|";
      row.rhs = "t" + std::to_string(t + 1);
      row.est = input.thresholds[v][t];
      if (!input.threshold_free[v][t]) {
        row.fixed = true;
        row.se = 0.0;
      } else if (input.acov.size() > 0) {
        const int pos = input.order.threshold(v, t);
        row.se = std::sqrt(std::max(0.0, input.acov(pos, pos)));
      }
      res.table.push_back(std::move(row));
    }
  }

  if (mean_structure) {
    for (size_t e = 0; e < system.size(); ++e) {
      if (!system[e].latent_equation) continue;
      ParamEstimate row;
      row.id = system[e].intercept_id;
      row.lhs = model.latents[system[e].latent];
      row.op = "~";
      row.rhs = "1";
      row.est = res.theta1[ncoef + static_cast<int>(e)];
      row.se = se1(ncoef + static_cast<int>(e));
      res.table.push_back(std::move(row));
    }
    for (size_t e = 0; e < system.size(); ++e) {
      if (system[e].latent_equation) continue;
      ParamEstimate row;
      row.id = system[e].intercept_id;
      row.lhs = model.observed[system[e].dependent];
      row.op = "~";
      row.rhs = "1";
      row.est = res.theta1[ncoef + static_cast<int>(e)];
      row.se = se1(ncoef + static_cast<int>(e));
      res.table.push_back(std::move(row));
    }
  }

  // variance parameters: free first (theta2 order), then fixed/derived rows
  for (size_t s = 0; s < res.theta2_ids.size(); ++s) {
    const ParamId& id = res.theta2_ids[s];
    ParamEstimate row;
    row.id = id;
    if (id.kind == ParamKind::SigmaZeta) {
      row.lhs = model.latents[id.i];
      row.rhs = model.latents[id.j];
    } else {
      row.lhs = model.observed[id.i];
      row.rhs = model.observed[id.j];
    }
    row.op = "~~";
    row.est = res.theta2[s];
    row.se = se2(static_cast<int>(s));
    res.table.push_back(std::move(row));
  }
  // derived ordinal error variances (fixed-diagonal moment matrix)
  for (int v = 0; v < p; ++v) {
    if (input.variance_free[v] || model.theta(v, v).state != CellState::Free) continue;
    ParamEstimate row;
    row.id = {ParamKind::SigmaEps, v, v,
              "sigma_eps(" + std::to_string(v + 1) + "," + std::to_string(v + 1) + ")"};
    row.lhs = row.rhs = model.observed[v];
    row.op = "~~";
    row.est = res.theta_hat(v, v);
    res.table.push_back(std::move(row));
  }
}

}  // namespace

int MomentInput::var_index(const std::string& name) const {
  for (size_t i = 0; i < vars.size(); ++i)
    if (vars[i].name == name) return static_cast<int>(i);
  return -1;
}

bool MomentInput::has_mean_structure() const {
  for (bool f : mean_free)
    if (f) return true;
  return false;
}

MomentInput MomentInput::from_stage_one(const StageOneStats& s) {
  MomentInput in;
  in.vars = s.vars;
  in.n = s.n;
  in.mu = s.means;
  in.sigma = s.sigma;
  in.thresholds = s.thresholds;
  const int p = s.p();
  in.threshold_free.resize(p);
  in.mean_free.resize(p);
  in.variance_free.resize(p);
  for (int j = 0; j < p; ++j) {
    in.threshold_free[j].assign(s.vars[j].n_thresholds(), true);
    in.mean_free[j] = s.vars[j].kind == VarKind::Continuous;
    in.variance_free[j] = s.vars[j].kind == VarKind::Continuous;
  }
  in.order = s.order;
  in.acov = s.acov;
  in.parameterization = Parameterization::Standard;
  return in;
}

MomentInput MomentInput::from_reparam(const ReparamStats& r) {
  MomentInput in;
  in.vars = r.vars;
  in.n = r.n;
  in.mu = r.mu_ddot;
  in.sigma = r.sigma_ddot;
  in.thresholds = r.tau_ddot;
  const int p = static_cast<int>(r.vars.size());
  in.threshold_free.resize(p);
  in.mean_free.resize(p);
  in.variance_free.resize(p);
  for (int j = 0; j < p; ++j) {
    const VariableAnchor& a = r.spec.anchors[j];
    const int nt = r.vars[j].n_thresholds();
    in.threshold_free[j].assign(nt, true);
    if (a.kind != AnchorKind::Identity) in.threshold_free[j][a.a] = false;
    if (a.kind == AnchorKind::MeanAndVariance) in.threshold_free[j][a.b] = false;
    in.mean_free[j] = r.vars[j].kind == VarKind::Continuous || a.kind != AnchorKind::Identity;
    in.variance_free[j] =
        r.vars[j].kind == VarKind::Continuous || a.kind == AnchorKind::MeanAndVariance;
  }
  in.order = r.order;
  in.acov = r.acov;
  in.parameterization = Parameterization::Alternative;
  return in;
}

MomentInput MomentInput::reordered(const std::vector<std::string>& names) const {
  const int np = static_cast<int>(names.size());
  std::vector<int> src(np);
  for (int k = 0; k < np; ++k) {
    src[k] = var_index(names[k]);
    if (src[k] < 0) throw InputError("moment input does not cover variable '" + names[k] + "'");
  }
  MomentInput out;
  out.n = n;
  out.parameterization = parameterization;
  out.mu.resize(np);
  out.sigma.resize(np, np);
  out.vars.resize(np);
  out.thresholds.resize(np);
  out.threshold_free.resize(np);
  out.mean_free.resize(np);
  out.variance_free.resize(np);
  for (int k = 0; k < np; ++k) {
    out.vars[k] = vars[src[k]];
    out.mu[k] = mu[src[k]];
    out.thresholds[k] = thresholds[src[k]];
    out.threshold_free[k] = threshold_free[src[k]];
    out.mean_free[k] = mean_free[src[k]];
    out.variance_free[k] = variance_free[src[k]];
    for (int l = 0; l < np; ++l) out.sigma(k, l) = sigma(src[k], src[l]);
  }
  out.order = moment_order_for(out.vars, out.mean_free, out.threshold_free, out.variance_free);
  if (acov.size() > 0) {
    std::vector<int> map(out.order.size(), -1);
    for (int pos = 0; pos < out.order.size(); ++pos) {
      const StatId& id = out.order.entries()[pos];
      int old = -1;
      switch (id.kind) {
        case StatKind::Mean:
          old = order.mean(src[id.i]);
          break;
        case StatKind::Threshold:
          old = order.threshold(src[id.i], id.j);
          break;
        case StatKind::Sigma:
          old = order.sigma(src[id.i], src[id.j]);
          break;
      }
      if (old < 0) throw InputError("moment input acov is missing a required statistic");
      map[pos] = old;
    }
    out.acov.resize(out.order.size(), out.order.size());
    for (int r = 0; r < out.order.size(); ++r)
      for (int c = 0; c < out.order.size(); ++c) out.acov(r, c) = acov(map[r], map[c]);
  }
  return out;
}

std::pair<Matrix, Vector> implied_moments(const Matrix& lambda, const Matrix& beta,
                                          const Matrix& psi, const Matrix& theta_eps,
                                          const Vector& alpha_eta, const Vector& alpha_y) {
  const int m = static_cast<int>(beta.rows());
  Matrix imb = Matrix::Identity(m, m) - beta;
  Eigen::FullPivLU<Matrix> lu(imb);
  if (!lu.isInvertible()) throw EstimationError("I - B is singular");
  Matrix f = lu.inverse();
  Matrix lf = lambda * f;
  Matrix sigma = lf * psi * lf.transpose() + theta_eps;
  Vector mu = alpha_y + lf * alpha_eta;
  return {0.5 * (sigma + sigma.transpose()), mu};
}

const ParamEstimate* FitResult::find(const std::string& label) const {
  for (const auto& row : table)
    if (row.id.label == label) return &row;
  return nullptr;
}

FitResult fit_from_moments(const ModelSpec& model, const MomentInput& raw_input,
                           const FitOptions& options) {
  for (const std::string& name : model.observed)
    if (raw_input.var_index(name) < 0)
      throw InputError("moment input does not provide variable '" + name + "'");
  MomentInput input = raw_input.reordered(model.observed);
  const int p = model.n_observed();
  const int m = model.n_latent();

  for (int v = 0; v < p; ++v) {
    if (model.thresholds[v].empty()) continue;
    if (input.vars[v].kind != VarKind::Ordinal)
      throw InputError("model declares thresholds for continuous variable '" +
                       model.observed[v] + "'");
    if (static_cast<int>(model.thresholds[v].size()) != input.vars[v].n_thresholds())
      throw InputError("model declares " + std::to_string(model.thresholds[v].size()) +
                       " thresholds for '" + model.observed[v] + "' but the data implies " +
                       std::to_string(input.vars[v].n_thresholds()));
  }

  MiivSystem system = to_estimating_system(model);
  find_miivs(system, model);

  FitResult res;
  res.moments = input;

  // ---- theta1: equation-wise 2SLS on the moment blocks
  std::vector<EquationWork> works = solve_theta1(system, input, model);
  const bool mean_structure = input.has_mean_structure();
  int ncoef = 0;
  for (const auto& w : works) ncoef += w.nz;

  res.theta1.resize(ncoef + (mean_structure ? static_cast<int>(works.size()) : 0));
  {
    int at = 0;
    for (size_t e = 0; e < works.size(); ++e)
      for (int r = 0; r < works[e].nz; ++r) {
        res.theta1[at++] = works[e].coefs[r];
        res.theta1_ids.push_back(system[e].coef_ids[r]);
      }
    if (mean_structure)
      for (size_t e = 0; e < works.size(); ++e) {
        res.theta1[at++] = works[e].intercept;
        res.theta1_ids.push_back(system[e].intercept_id);
      }
  }

  res.lambda_hat = Matrix::Zero(p, m);
  res.beta_hat = Matrix::Zero(m, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < p; ++i)
      if (model.lambda(i, j).state == CellState::Fixed)
        res.lambda_hat(i, j) = model.lambda(i, j).value;
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < m; ++i)
      if (model.beta(i, j).state == CellState::Fixed) res.beta_hat(i, j) = model.beta(i, j).value;
  {
    int r = 0;
    for (size_t e = 0; e < works.size(); ++e)
      for (int c = 0; c < works[e].nz; ++c, ++r) {
        const ParamId& id = system[e].coef_ids[c];
        if (id.kind == ParamKind::Lambda)
          res.lambda_hat(id.i, id.j) = res.theta1[r];
        else
          res.beta_hat(id.i, id.j) = res.theta1[r];
      }
  }

  // Latent intercepts reproduce the scaling-indicator means exactly; the
  // per-equation estimates coincide with this map.
  Vector mu_scaling(m);
  for (int l = 0; l < m; ++l) mu_scaling[l] = input.mu[model.scaling[l]];
  res.alpha_eta_hat = (Matrix::Identity(m, m) - res.beta_hat) * mu_scaling;
  res.alpha_y_hat = Vector::Zero(p);
  for (size_t e = 0; e < works.size(); ++e)
    if (!system[e].latent_equation) res.alpha_y_hat[system[e].dependent] = works[e].intercept;

  // ---- theta2: closed-form GLS over the free covariance moments
  std::vector<bool> demote(p);
  for (int v = 0; v < p; ++v) demote[v] = !input.variance_free[v];
  const std::vector<bool> no_demote(m, false);
  LStructure l_psi = build_lstructure(pattern_from_symmetric(model.psi, no_demote));
  LStructure l_theta = build_lstructure(pattern_from_symmetric(model.theta, demote));
  LStructure l_sigma =
      build_lstructure(PatternSpec::symmetric_with_diag(p, input.variance_free, Vector::Ones(p)));

  res.theta2_ids = symmetric_free_ids(model.psi, no_demote, ParamKind::SigmaZeta, "sigma_zeta");
  {
    auto eps_ids = symmetric_free_ids(model.theta, demote, ParamKind::SigmaEps, "sigma_eps");
    res.theta2_ids.insert(res.theta2_ids.end(), eps_ids.begin(), eps_ids.end());
  }

  Matrix imb = Matrix::Identity(m, m) - res.beta_hat;
  Eigen::FullPivLU<Matrix> imblu(imb);
  if (!imblu.isInvertible())
    throw EstimationError("I - B is singular at the estimated coefficients");
  Matrix fmat = imblu.inverse();
  Matrix lf = res.lambda_hat * fmat;

  Matrix g_psi = l_sigma.elimination * kron(lf, lf) * l_psi.duplication;
  Matrix g_theta = l_sigma.elimination * l_theta.duplication;
  Matrix j2(l_sigma.free_size(), g_psi.cols() + g_theta.cols());
  j2 << g_psi, g_theta;

  Vector s_free(l_sigma.free_size());
  {
    int cell = 0;
    for (int j = 0; j < p; ++j)
      for (int i = j; i < p; ++i) {
        if (i == j && !input.variance_free[j]) continue;
        s_free[cell++] = input.sigma(i, j);
      }
  }
  Vector rhs =
      s_free - l_sigma.elimination * (kron(lf, lf) * l_psi.constants + l_theta.constants);

  std::vector<int> sigma_pos;
  for (int pos = 0; pos < input.order.size(); ++pos)
    if (input.order.entries()[pos].kind == StatKind::Sigma) sigma_pos.push_back(pos);
  Matrix acov_cc;
  if (input.acov.size() > 0) {
    acov_cc.resize(sigma_pos.size(), sigma_pos.size());
    for (size_t r = 0; r < sigma_pos.size(); ++r)
      for (size_t c = 0; c < sigma_pos.size(); ++c)
        acov_cc(r, c) = input.acov(sigma_pos[r], sigma_pos[c]);
  }
  const WeightMode mode = input.acov.size() > 0 ? options.weight : WeightMode::Identity;
  Matrix weight;
  switch (mode) {
    case WeightMode::Full:
      weight = pinv_psd(acov_cc, &res.weight_pinv_fallback);
      break;
    case WeightMode::Diagonal: {
      Vector d = acov_cc.diagonal();
      Vector inv = Vector::Zero(d.size());
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (d[i] > 0)
          inv[i] = 1.0 / d[i];
        else
          res.weight_pinv_fallback = true;
      }
      weight = inv.asDiagonal();
      break;
    }
    case WeightMode::Identity:
      weight = Matrix::Identity(l_sigma.free_size(), l_sigma.free_size());
      break;
  }

  const int n2 = static_cast<int>(j2.cols());
  Matrix hw(n2, l_sigma.free_size());
  if (n2 > 0) {
    Eigen::ColPivHouseholderQR<Matrix> qr(j2);
    if (qr.rank() < n2) {
      std::ostringstream msg;
      msg << "variance parameters are not identified:";
      const auto& perm = qr.colsPermutation().indices();
      for (int c = qr.rank(); c < n2; ++c) msg << " " << res.theta2_ids[perm[c]].label;
      throw EstimationError(msg.str());
    }
    Matrix jw = j2.transpose() * weight;
    hw = (jw * j2).ldlt().solve(jw);
    res.theta2 = hw * rhs;
  } else {
    res.theta2.resize(0);
  }

  const int npsi = l_psi.free_size();
  res.psi_hat = pattern_unvec(res.theta2.head(npsi), l_psi);
  res.theta_hat = pattern_unvec(res.theta2.tail(n2 - npsi), l_theta);
  Matrix common = lf * res.psi_hat * lf.transpose();
  for (int v = 0; v < p; ++v)
    if (demote[v] && model.theta(v, v).state == CellState::Free)
      res.theta_hat(v, v) = input.sigma(v, v) - common(v, v);

  {
    Eigen::SelfAdjointEigenSolver<Matrix> ez(res.psi_hat);
    res.npd_sigma_zeta = ez.eigenvalues().minCoeff() < -1e-10;
    Eigen::SelfAdjointEigenSolver<Matrix> ee(res.theta_hat);
    res.npd_sigma_eps = ee.eigenvalues().minCoeff() < -1e-10;
  }

  std::tie(res.implied_sigma, res.implied_mu) = implied_moments(
      res.lambda_hat, res.beta_hat, res.psi_hat, res.theta_hat, res.alpha_eta_hat,
      res.alpha_y_hat);

  // ---- analytic derivative blocks and asymptotic covariances
  res.kmat = theta1_jacobian(system, works, input, mean_structure);
  res.j2 = j2;
  if (ncoef > 0) {
    Matrix lpsif = lf * res.psi_hat * fmat.transpose();  // Lambda F Psi F'
    const Matrix eye_p = Matrix::Identity(p, p);
    Matrix j1_lambda = l_sigma.elimination *
                       (kron(lpsif, eye_p) + kron(eye_p, lpsif) * commutation_matrix(m, p));
    Matrix j1_beta =
        l_sigma.elimination * (kron(lpsif, lf) + kron(lf, lpsif) * commutation_matrix(m, m));
    res.j1.resize(l_sigma.free_size(), ncoef);
    for (int r = 0; r < ncoef; ++r) {
      const ParamId& id = res.theta1_ids[r];
      if (id.kind == ParamKind::Lambda)
        res.j1.col(r) = j1_lambda.col(id.i + p * id.j);
      else
        res.j1.col(r) = j1_beta.col(id.i + m * id.j);
    }
  }
  if (input.acov.size() > 0 && options.compute_se) {
    res.vcov_theta1 = res.kmat * input.acov * res.kmat.transpose();
    res.vcov_theta1 = 0.5 * (res.vcov_theta1 + res.vcov_theta1.transpose());

    if (n2 > 0) {
      Matrix bread = hw;
      if (ncoef > 0) {
        Matrix kc(ncoef, sigma_pos.size());
        for (size_t c = 0; c < sigma_pos.size(); ++c)
          kc.col(static_cast<int>(c)) = res.kmat.col(sigma_pos[c]).head(ncoef);
        bread = hw * (Matrix::Identity(l_sigma.free_size(), l_sigma.free_size()) - res.j1 * kc);
      }
      res.vcov_theta2 = bread * acov_cc * bread.transpose();
      res.vcov_theta2 = 0.5 * (res.vcov_theta2 + res.vcov_theta2.transpose());
    }
  }

  for (size_t e = 0; e < system.size(); ++e) {
    EquationReport er;
    er.dependent = model.observed[system[e].dependent];
    for (int z : system[e].regressors) er.regressors.push_back(model.observed[z]);
    for (int v : system[e].instruments) er.instruments.push_back(model.observed[v]);
    er.shea = shea_r2(system[e], input.sigma);
    res.equations.push_back(std::move(er));
  }

  build_table(model, system, input, res, mean_structure, ncoef);
  return res;
}

namespace {

ReparamSpec reparam_spec_from_model(const ModelSpec& model, const StageOneStats& s1) {
  ReparamSpec spec;
  spec.anchors.assign(s1.vars.size(), VariableAnchor{});
  for (size_t j = 0; j < s1.vars.size(); ++j) {
    if (s1.vars[j].kind != VarKind::Ordinal) continue;
    const int mv = model.observed_index(s1.vars[j].name);
    std::vector<int> anchored;
    if (mv >= 0)
      for (size_t t = 0; t < model.thresholds[mv].size(); ++t)
        if (model.thresholds[mv][t].anchored) anchored.push_back(static_cast<int>(t));
    if (anchored.size() > 2)
      throw SpecError("variable '" + s1.vars[j].name +
                      "' anchors more than two thresholds; fix any two");
    if (anchored.size() == 2) {
      spec.anchors[j] = {AnchorKind::MeanAndVariance, anchored[0], anchored[1],
                         model.thresholds[mv][anchored[0]].value,
                         model.thresholds[mv][anchored[1]].value};
    } else if (anchored.size() == 1) {
      spec.anchors[j] = {AnchorKind::MeanOnly, anchored[0], -1,
                         model.thresholds[mv][anchored[0]].value, 0.0};
    } else if (s1.vars[j].n_categories() >= 3) {
      spec.anchors[j] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
    } else {
      spec.anchors[j] = {AnchorKind::MeanOnly, 0, -1, 0.0, 0.0};
    }
  }
  return spec;
}

}  // namespace

FitResult fit(const ModelSpec& model, const DataTable& data,
              const std::vector<VariableMeta>& metas, const FitOptions& options) {
  DataTable sub;
  sub.names = model.observed;
  sub.values.resize(data.n(), model.n_observed());
  std::vector<VariableMeta> ordered;
  for (int v = 0; v < model.n_observed(); ++v) {
    const int c = data.column(model.observed[v]);
    if (c < 0) throw InputError("data has no column '" + model.observed[v] + "'");
    sub.values.col(v) = data.values.col(c);
    const VariableMeta* meta = nullptr;
    for (const auto& mm : metas)
      if (mm.name == model.observed[v]) meta = &mm;
    if (!meta)
      throw InputError("no variable declaration for column '" + model.observed[v] + "'");
    ordered.push_back(*meta);
  }

  bool anchors_declared = false;
  for (const auto& tv : model.thresholds)
    for (const auto& d : tv) anchors_declared = anchors_declared || d.anchored;

  StageOneOptions s1opt;
  s1opt.acov = options.compute_se ? options.acov : AcovMethod::None;
  s1opt.bootstrap_reps = options.bootstrap_reps;
  s1opt.seed = options.seed;
  s1opt.threads = options.threads;
  StageOneStats s1 = assemble_omega(sub, ordered, s1opt);

  const bool alternative =
      anchors_declared || options.parameterization == Parameterization::Alternative;
  MomentInput input;
  if (alternative) {
    input = MomentInput::from_reparam(apply_reparam(s1, reparam_spec_from_model(model, s1)));
  } else {
    input = MomentInput::from_stage_one(s1);
  }
  return fit_from_moments(model, input, options);
}

FitResult fit(const ModelSpec& model, const DataTable& data, const FitOptions& options) {
  DataTable recoded = data;
  std::vector<VariableMeta> metas;
  for (int v = 0; v < model.n_observed(); ++v) {
    const int c = recoded.column(model.observed[v]);
    if (c < 0) throw InputError("data has no column '" + model.observed[v] + "'");
    if (!model.thresholds[v].empty()) {
      metas.push_back(ordinal_meta_from_column(model.observed[v], recoded.values.col(c)));
    } else {
      metas.push_back({model.observed[v], VarKind::Continuous, {}});
    }
  }
  return fit(model, recoded, metas, options);
}

}  // namespace pivsem

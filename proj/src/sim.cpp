#include "pivsem/sim.hpp"

#include "pivsem/gauss.hpp"
#include "pivsem/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pivsem {

namespace {

struct SplitMix {
  std::uint64_t state;
  std::uint64_t next() {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  double uniform() { return (next() >> 11) * 0x1.0p-53 + 0x1.0p-54; }
};

// Box-Muller with an explicit draw order; keeps datasets byte-identical for a
// given stream regardless of platform library details.
struct NormalStream {
  SplitMix rng;
  bool has_spare = false;
  double spare = 0.0;
  explicit NormalStream(std::uint64_t seed) : rng{seed} {}
  double next() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare = r * std::sin(a);
    has_spare = true;
    return r * std::cos(a);
  }
};

std::uint64_t stream_seed(std::uint64_t seed, int n, int replication) {
  SplitMix mix{seed};
  mix.state ^= mix.next() + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(n);
  mix.state ^= mix.next() + 0x517cc1b727220a95ULL * static_cast<std::uint64_t>(replication + 1);
  return mix.next();
}

int ordinal_slot(const StudyConfig& config, const std::string& name) {
  for (size_t k = 0; k < config.ordinal_vars.size(); ++k)
    if (config.ordinal_vars[k] == name) return static_cast<int>(k);
  return -1;
}

std::string group_of(const ParamId& id, const ModelSpec& model, const StudyConfig& config) {
  auto obs_kind = [&](int obs) {
    return ordinal_slot(config, model.observed[obs]) >= 0 ? "(o)" : "(c)";
  };
  switch (id.kind) {
    case ParamKind::Lambda:
      return std::string("lambda") + obs_kind(id.i);
    case ParamKind::Beta:
      return "beta";
    case ParamKind::AlphaEta:
      return "alpha_eta";
    case ParamKind::AlphaY:
      return std::string("alpha_y") + obs_kind(id.i);
    case ParamKind::SigmaZeta:
      return "sigma_zeta";
    case ParamKind::SigmaEps:
      return std::string("sigma_eps") + obs_kind(id.i);
    case ParamKind::Tau:
      return "tau";
    default:
      return "other";
  }
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

const char* par_name(Parameterization p) {
  return p == Parameterization::Standard ? "standard" : "alternative";
}
const char* policy_name(NpdPolicy p) { return p == NpdPolicy::Exclude ? "exclude" : "include"; }

const std::vector<std::string> kGroupOrder = {
    "tau",       "alpha_eta", "alpha_y(c)",   "alpha_y(o)",   "lambda(c)",
    "lambda(o)", "beta",      "sigma_eps(c)", "sigma_eps(o)", "sigma_zeta"};

}  // namespace

void StudyConfig::validate() const {
  if (replications < 1) throw SpecError("study needs at least one replication");
  if (sample_sizes.empty()) throw SpecError("study needs at least one sample size");
  if (ordinal_vars.size() != probabilities.size())
    throw SpecError("one probability vector per ordinal variable is required");
  for (size_t k = 0; k < probabilities.size(); ++k) {
    double total = 0.0;
    for (double p : probabilities[k]) {
      if (p <= 0.0) throw SpecError("response probabilities must be positive");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw SpecError("response probabilities of '" + ordinal_vars[k] + "' sum to " +
                      std::to_string(total) + ", not 1");
  }
  Eigen::LLT<Matrix> psi_llt(theta.psi);
  if (psi_llt.info() != Eigen::Success)
    throw SpecError("generating disturbance covariance is not positive definite");
  Eigen::LLT<Matrix> eps_llt(theta.theta_eps);
  if (eps_llt.info() != Eigen::Success)
    throw SpecError("generating error covariance is not positive definite");
}

StudyConfig mixed5_design() {
  StudyConfig cfg;
  cfg.model_text =
      "f1 =~ y1 + y2\n"
      "f2 =~ y3 + y4 + y5\n"
      "f3 =~ y6 + y7 + y8\n"
      "f4 =~ y9 + y10\n"
      "f5 =~ y11 + y12\n"
      "f3 ~ f1\n"
      "f4 ~ f2\n"
      "f5 ~ f2 + f3 + f4\n";
  const int p = 12, m = 5;
  cfg.theta.lambda = Matrix::Zero(p, m);
  const double lv[p] = {1.0, 0.4, 1.0, 0.7, 0.6, 1.0, 0.8, 0.7, 1.0, 0.6, 1.0, 0.5};
  const int lf[p] = {0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 4};
  for (int i = 0; i < p; ++i) cfg.theta.lambda(i, lf[i]) = lv[i];
  cfg.theta.beta = Matrix::Zero(m, m);
  cfg.theta.beta(2, 0) = 0.5;
  cfg.theta.beta(3, 1) = 0.4;
  cfg.theta.beta(4, 1) = 0.3;
  cfg.theta.beta(4, 2) = 0.4;
  cfg.theta.beta(4, 3) = 0.4;
  cfg.theta.psi = Matrix::Zero(m, m);
  cfg.theta.psi.diagonal() << 0.7, 0.8, 0.4, 0.5, 0.5;
  cfg.theta.psi(0, 1) = cfg.theta.psi(1, 0) = 0.3;
  cfg.theta.alpha_eta = Vector::Zero(m);
  cfg.theta.alpha_y = Vector::Zero(p);
  // unit total variance: error variances absorb the residual
  Matrix f = (Matrix::Identity(m, m) - cfg.theta.beta).inverse();
  Matrix common = cfg.theta.lambda * f * cfg.theta.psi * f.transpose() *
                  cfg.theta.lambda.transpose();
  cfg.theta.theta_eps = Matrix::Zero(p, p);
  for (int i = 0; i < p; ++i) cfg.theta.theta_eps(i, i) = 1.0 - common(i, i);
  for (int k = 6; k <= 12; ++k) {
    cfg.ordinal_vars.push_back("y" + std::to_string(k));
    cfg.probabilities.push_back({0.3, 0.4, 0.2, 0.06, 0.04});
  }
  cfg.sample_sizes = {100, 200, 400, 800, 3200};
  cfg.replications = 200;
  cfg.seed = 20260809;
  return cfg;
}

DataTable generate_dataset(const StudyConfig& config, int n, int replication) {
  config.validate();
  ModelSpec model = parse_model(config.model_text);
  auto [sigma, mu] = implied_moments(config.theta.lambda, config.theta.beta, config.theta.psi,
                                     config.theta.theta_eps, config.theta.alpha_eta,
                                     config.theta.alpha_y);
  const int p = model.n_observed();
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw SpecError("generating covariance matrix is not positive definite");
  Matrix chol = llt.matrixL();

  DataTable data;
  data.names = model.observed;
  data.values.resize(n, p);
  NormalStream stream(stream_seed(config.seed, n, replication));
  Vector z(p);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) z[j] = stream.next();
    data.values.row(i) = (chol * z + mu).transpose();
  }

  // discretize the ordinal columns at population quantile cutpoints
  for (size_t k = 0; k < config.ordinal_vars.size(); ++k) {
    const int col = data.column(config.ordinal_vars[k]);
    if (col < 0)
      throw SpecError("ordinal variable '" + config.ordinal_vars[k] + "' is not in the model");
    const double sd = std::sqrt(sigma(col, col));
    const auto& probs = config.probabilities[k];
    std::vector<double> cuts(probs.size() - 1);
    double cum = 0.0;
    for (size_t c = 0; c + 1 < probs.size(); ++c) {
      cum += probs[c];
      cuts[c] = mu[col] + sd * norm_quantile(cum);
    }
    for (int i = 0; i < n; ++i) {
      const double v = data.values(i, col);
      int code = 0;
      while (code < static_cast<int>(cuts.size()) && v > cuts[code]) ++code;
      data.values(i, col) = code;
    }
  }
  return data;
}

PopulationTargets population_targets(const StudyConfig& config, Parameterization par) {
  ModelSpec model = parse_model(config.model_text);
  auto [sigma, mu] = implied_moments(config.theta.lambda, config.theta.beta, config.theta.psi,
                                     config.theta.theta_eps, config.theta.alpha_eta,
                                     config.theta.alpha_y);
  const int p = model.n_observed();

  // Population stage-1 statistics: thresholds at the population cutpoints of
  // the standardized latent responses, correlation metric on ordinal slots.
  StageOneStats s1;
  std::vector<VariableMeta> metas;
  for (int v = 0; v < p; ++v) {
    const int k = ordinal_slot(config, model.observed[v]);
    VariableMeta meta{model.observed[v],
                      k >= 0 ? VarKind::Ordinal : VarKind::Continuous,
                      {}};
    if (k >= 0)
      for (size_t c = 0; c < config.probabilities[k].size(); ++c)
        meta.categories.push_back(static_cast<int>(c));
    metas.push_back(meta);
  }
  // ordinal-first ordering as in assemble_omega
  std::vector<int> position;
  for (int v = 0; v < p; ++v)
    if (metas[v].kind == VarKind::Ordinal) position.push_back(v);
  for (int v = 0; v < p; ++v)
    if (metas[v].kind == VarKind::Continuous) position.push_back(v);
  s1.vars.resize(p);
  s1.source_column.resize(p);
  s1.n = 0;
  s1.means = Vector::Zero(p);
  s1.variances = Vector::Ones(p);
  s1.thresholds.resize(p);
  s1.sigma.resize(p, p);
  for (int a = 0; a < p; ++a) {
    const int va = position[a];
    s1.vars[a] = metas[va];
    s1.source_column[a] = va;
    const int k = ordinal_slot(config, model.observed[va]);
    const double sd_a = std::sqrt(sigma(va, va));
    if (k >= 0) {
      double cum = 0.0;
      for (size_t c = 0; c + 1 < config.probabilities[k].size(); ++c) {
        cum += config.probabilities[k][c];
        // the standardized latent response has its cutpoint at the quantile
        s1.thresholds[a].push_back(norm_quantile(cum));
      }
      s1.means[a] = 0.0;
      s1.variances[a] = 1.0;
    } else {
      s1.means[a] = mu[va];
      s1.variances[a] = sigma(va, va);
    }
    for (int b = 0; b < p; ++b) {
      const int vb = position[b];
      const bool oa = ordinal_slot(config, model.observed[va]) >= 0;
      const bool ob = ordinal_slot(config, model.observed[vb]) >= 0;
      double value = sigma(va, vb);
      if (oa) value /= sd_a;
      if (ob) value /= std::sqrt(sigma(vb, vb));
      s1.sigma(a, b) = value;
    }
  }
  for (int a = 0; a < p; ++a)
    if (s1.vars[a].kind == VarKind::Ordinal) s1.sigma(a, a) = 1.0;
  s1.order = omega_order_for(s1.vars);

  MomentInput input;
  if (par == Parameterization::Alternative) {
    input = MomentInput::from_reparam(
        transform_moments(s1, ReparamSpec::default_anchors(s1.vars)));
  } else {
    input = MomentInput::from_stage_one(s1);
  }

  FitOptions opt;
  opt.compute_se = false;
  PopulationTargets out{{}, {}, fit_from_moments(model, input, opt)};
  for (const ParamEstimate& row : out.fit.table) {
    if (row.fixed) continue;
    out.value[row.id.label] = row.est;
    out.group[row.id.label] = group_of(row.id, model, config);
  }
  return out;
}

StudyCell summarize_cell(std::vector<RepResult> reps, const PopulationTargets& pop, int n,
                         Parameterization par, NpdPolicy policy) {
  std::sort(reps.begin(), reps.end(),
            [](const RepResult& a, const RepResult& b) { return a.replication < b.replication; });

  StudyCell cell;
  cell.n = n;
  cell.parameterization = par;
  cell.policy = policy;

  int converged = 0, npd = 0;
  for (const auto& r : reps) {
    converged += r.converged ? 1 : 0;
    npd += (r.converged && r.npd) ? 1 : 0;
  }
  cell.nonconv_pct = reps.empty() ? 0.0 : 100.0 * (reps.size() - converged) / reps.size();
  cell.npd_pct = converged == 0 ? 0.0 : 100.0 * npd / converged;

  auto included = [&](const RepResult& r) {
    return r.converged && (policy == NpdPolicy::Include || !r.npd);
  };

  std::map<std::string, std::vector<double>> rb_by_group, rbse_by_group;
  for (const auto& [label, pop_value] : pop.value) {
    std::vector<double> est_included, est_converged, se_included;
    for (const auto& r : reps) {
      auto it = r.estimate.find(label);
      if (it == r.estimate.end()) continue;
      if (r.converged) est_converged.push_back(it->second);
      if (included(r)) {
        est_included.push_back(it->second);
        auto se_it = r.se.find(label);
        if (se_it != r.se.end() && std::isfinite(se_it->second))
          se_included.push_back(se_it->second);
      }
    }
    const std::string& grp = pop.group.at(label);
    if (pop_value != 0.0 && !est_included.empty()) {
      double rb = 0.0;
      for (double e : est_included) rb += (e - pop_value) / pop_value;
      rb_by_group[grp].push_back(100.0 * rb / est_included.size());
    }
    // RBSE: median reported SE against the spread over all converged
    // replications, whatever the policy.
    const double sd = sd_of(est_converged);
    if (!se_included.empty() && std::isfinite(sd) && sd > 0.0)
      rbse_by_group[grp].push_back(100.0 * (median_of(se_included) - sd) / sd);
  }

  for (const std::string& g : kGroupOrder) {
    GroupSummary gs;
    if (rb_by_group.count(g)) {
      gs.rb = mean_of(rb_by_group[g]);
      gs.n_params = static_cast<int>(rb_by_group[g].size());
    }
    if (rbse_by_group.count(g)) {
      gs.rbse = mean_of(rbse_by_group[g]);
      gs.n_params = std::max(gs.n_params, static_cast<int>(rbse_by_group[g].size()));
    }
    if (gs.n_params > 0) cell.groups[g] = gs;
  }

  std::vector<double> shea;
  for (const auto& r : reps)
    if (included(r)) shea.insert(shea.end(), r.shea.begin(), r.shea.end());
  if (!shea.empty()) {
    std::sort(shea.begin(), shea.end());
    cell.shea_min = shea.front();
    cell.shea_max = shea.back();
    cell.shea_median = median_of(shea);
  }
  return cell;
}

StudySummary run_study(const StudyConfig& config) {
  config.validate();
  ModelSpec model = parse_model(config.model_text);

  StudySummary summary;
  for (Parameterization par : config.parameterizations) {
    PopulationTargets pop = population_targets(config, par);
    for (int n : config.sample_sizes) {
      std::vector<RepResult> reps(config.replications);
      parallel_for(
          config.replications,
          [&](int r) {
            RepResult rep;
            rep.replication = r;
            try {
              DataTable data = generate_dataset(config, n, r);
              std::vector<VariableMeta> metas;
              for (int v = 0; v < model.n_observed(); ++v) {
                const std::string& name = model.observed[v];
                if (ordinal_slot(config, name) >= 0) {
                  metas.push_back(
                      ordinal_meta_from_column(name, data.values.col(data.column(name))));
                } else {
                  metas.push_back({name, VarKind::Continuous, {}});
                }
              }
              FitOptions opt;
              opt.parameterization = par;
              opt.weight = config.weight;
              opt.threads = 1;
              FitResult fr = fit(model, data, metas, opt);
              rep.converged = true;
              rep.npd = fr.npd_sigma_zeta || fr.npd_sigma_eps;
              for (const ParamEstimate& row : fr.table) {
                if (row.fixed) continue;
                rep.estimate[row.id.label] = row.est;
                if (std::isfinite(row.se)) rep.se[row.id.label] = row.se;
              }
              for (const auto& er : fr.equations)
                for (Eigen::Index k = 0; k < er.shea.size(); ++k)
                  rep.shea.push_back(er.shea[k]);
            } catch (const std::exception&) {
              rep.converged = false;
            }
            reps[r] = std::move(rep);
          },
          config.threads);
      for (NpdPolicy policy : {NpdPolicy::Exclude, NpdPolicy::Include})
        summary.cells.push_back(summarize_cell(reps, pop, n, par, policy));
    }
  }
  return summary;
}

const StudyCell* StudySummary::cell(int n, Parameterization par, NpdPolicy policy) const {
  for (const auto& c : cells)
    if (c.n == n && c.parameterization == par && c.policy == policy) return &c;
  return nullptr;
}

std::string StudySummary::to_csv() const {
  std::ostringstream os;
  os << "n,parameterization,npd_policy,group,n_params,rb_pct,rbse_pct,npd_pct,nonconv_pct\n";
  os.precision(10);
  for (const auto& c : cells)
    for (const std::string& g : kGroupOrder) {
      auto it = c.groups.find(g);
      if (it == c.groups.end()) continue;
      os << c.n << "," << par_name(c.parameterization) << "," << policy_name(c.policy) << ","
         << g << "," << it->second.n_params << "," << it->second.rb << "," << it->second.rbse
         << "," << c.npd_pct << "," << c.nonconv_pct << "\n";
    }
  return os.str();
}

std::string StudySummary::to_table() const {
  std::ostringstream os;
  // group sample sizes per (parameterization, policy) block
  for (Parameterization par : {Parameterization::Standard, Parameterization::Alternative})
    for (NpdPolicy policy : {NpdPolicy::Exclude, NpdPolicy::Include}) {
      std::vector<const StudyCell*> block;
      for (const auto& c : cells)
        if (c.parameterization == par && c.policy == policy) block.push_back(&c);
      if (block.empty()) continue;
      os << "== " << par_name(par) << " parameterization - "
         << (policy == NpdPolicy::Exclude ? "NPD excluded" : "all converged") << " ==\n";
      os << "  percentage of relative bias (RB) and standard-error bias (RBSE)\n";
      char buf[160];
      std::snprintf(buf, sizeof(buf), "  %-14s", "group");
      os << buf;
      for (const auto* c : block) {
        std::snprintf(buf, sizeof(buf), " | RB n=%-6d RBSE", c->n);
        os << buf;
      }
      os << "\n";
      for (const std::string& g : kGroupOrder) {
        bool any = false;
        for (const auto* c : block) any = any || c->groups.count(g);
        if (!any) continue;
        std::snprintf(buf, sizeof(buf), "  %-14s", g.c_str());
        os << buf;
        for (const auto* c : block) {
          auto it = c->groups.find(g);
          if (it == c->groups.end()) {
            os << " |      .       . ";
            continue;
          }
          auto cellfmt = [&](double v) {
            if (std::isnan(v)) return std::string("     .");
            std::snprintf(buf, sizeof(buf), "%6.1f", v);
            return std::string(buf);
          };
          os << " | " << cellfmt(it->second.rb) << "  " << cellfmt(it->second.rbse) << " ";
        }
        os << "\n";
      }
      std::snprintf(buf, sizeof(buf), "  %-14s", "npd %");
      os << buf;
      for (const auto* c : block) {
        std::snprintf(buf, sizeof(buf), " | %6.1f         ", c->npd_pct);
        os << buf;
      }
      os << "\n";
      std::snprintf(buf, sizeof(buf), "  %-14s", "nonconv %");
      os << buf;
      for (const auto* c : block) {
        std::snprintf(buf, sizeof(buf), " | %6.1f         ", c->nonconv_pct);
        os << buf;
      }
      os << "\n\n";
    }
  return os.str();
}

}  // namespace pivsem

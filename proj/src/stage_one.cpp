#include "pivsem/stage_one.hpp"

#include "pivsem/gauss.hpp"
#include "pivsem/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace pivsem {

namespace {

constexpr double kRhoBound = 1.0 - 1e-8;
constexpr double kProbFloor = 1e-300;

std::vector<double> with_sentinels(const std::vector<double>& t) {
  std::vector<double> out;
  out.reserve(t.size() + 2);
  out.push_back(kNegInf);
  out.insert(out.end(), t.begin(), t.end());
  out.push_back(kPosInf);
  return out;
}

// ---------------------------------------------------------------- pairwise

Matrix cell_counts(const Vector& a, const Vector& b, int ca, int cb) {
  Matrix counts = Matrix::Zero(ca, cb);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    counts(static_cast<int>(a[i]), static_cast<int>(b[i])) += 1.0;
  return counts;
}

// Total d loglik / d rho of the two-way table given fixed thresholds.
double polychoric_score(const Matrix& counts, const std::vector<double>& tj,
                        const std::vector<double>& tk, double rho) {
  const auto a = with_sentinels(tj);
  const auto b = with_sentinels(tk);
  double score = 0.0;
  for (int r = 0; r < counts.rows(); ++r)
    for (int c = 0; c < counts.cols(); ++c) {
      if (counts(r, c) == 0.0) continue;
      const double pr = std::max(bvn_rect(a[r], a[r + 1], b[c], b[c + 1], rho), kProbFloor);
      const double dpr = bvn_pdf(a[r + 1], b[c + 1], rho) - bvn_pdf(a[r], b[c + 1], rho) -
                         bvn_pdf(a[r + 1], b[c], rho) + bvn_pdf(a[r], b[c], rho);
      score += counts(r, c) * dpr / pr;
    }
  return score;
}

double polychoric_loglik(const Matrix& counts, const std::vector<double>& tj,
                         const std::vector<double>& tk, double rho) {
  const auto a = with_sentinels(tj);
  const auto b = with_sentinels(tk);
  double ll = 0.0;
  for (int r = 0; r < counts.rows(); ++r)
    for (int c = 0; c < counts.cols(); ++c) {
      if (counts(r, c) == 0.0) continue;
      const double pr = std::max(bvn_rect(a[r], a[r + 1], b[c], b[c + 1], rho), kProbFloor);
      ll += counts(r, c) * std::log(pr);
    }
  return ll;
}

// Per-observation d log f / d rho for an ordinal value (category) against a
// standardized continuous value z, with fixed thresholds.
double polyserial_obs_score(int category, double z, const std::vector<double>& taus,
                            double rho) {
  const double s = std::sqrt(1.0 - rho * rho);
  const double s3 = s * s * s;
  const double hi = category < static_cast<int>(taus.size()) ? taus[category] : kPosInf;
  const double lo = category > 0 ? taus[category - 1] : kNegInf;
  const double uhi = std::isinf(hi) ? hi : (hi - rho * z) / s;
  const double ulo = std::isinf(lo) ? lo : (lo - rho * z) / s;
  const double phi = norm_cdf(uhi);
  const double plo = norm_cdf(ulo);
  const double pr = std::max(phi - plo, kProbFloor);
  double num = 0.0;
  if (!std::isinf(hi)) num += norm_pdf(uhi) * (rho * hi - z) / s3;
  if (!std::isinf(lo)) num -= norm_pdf(ulo) * (rho * lo - z) / s3;
  return num / pr;
}

double polyserial_score(const Vector& ord, const Vector& cont, const std::vector<double>& taus,
                        double mu, double var, double rho) {
  const double sd = std::sqrt(var);
  double score = 0.0;
  for (Eigen::Index i = 0; i < ord.size(); ++i) {
    const double z = (cont[i] - mu) / sd;
    score += polyserial_obs_score(static_cast<int>(ord[i]), z, taus, rho);
  }
  return score;
}

// Per-observation d log f / d sigma_jk of the bivariate normal density.
double pearson_pair_score(double yj, double yk, double mu_j, double mu_k, double var_j,
                          double var_k, double cov) {
  const double det = var_j * var_k - cov * cov;
  const double i11 = var_k / det, i22 = var_j / det, i12 = -cov / det;
  const double dj = yj - mu_j, dk = yk - mu_k;
  const double wj = i11 * dj + i12 * dk;
  const double wk = i12 * dj + i22 * dk;
  return -i12 + wj * wk;
}

// Root of `score` over rho in (-1, 1): secant iteration on the Fisher-z scale
// safeguarded by bisection within a bracketing interval. Tolerance 1e-10 on
// rho. Throws StageOneError with the evaluation trace on failure.
double solve_correlation(const std::function<double(double)>& score, double init,
                         const std::string& what) {
  std::ostringstream trace;
  auto eval = [&](double rho) {
    const double s = score(rho);
    trace << "  rho=" << rho << " score=" << s << "\n";
    return s;
  };

  double lo = std::clamp(init, -0.9, 0.9);
  double s_lo = eval(lo);
  double hi = lo, s_hi = s_lo;
  // Walk toward the boundary indicated by the score sign until it flips.
  const int dir = s_lo > 0.0 ? +1 : -1;
  for (int step = 0; step < 80 && s_lo * s_hi > 0.0; ++step) {
    lo = hi;
    s_lo = s_hi;
    hi = dir > 0 ? hi + (kRhoBound - hi) * 0.5 : hi - (hi + kRhoBound) * 0.5;
    if (std::abs(hi) > kRhoBound - 1e-12) {
      hi = dir > 0 ? kRhoBound : -kRhoBound;
      s_hi = eval(hi);
      break;
    }
    s_hi = eval(hi);
  }
  if (s_lo * s_hi > 0.0) {
    if (std::abs(hi) >= kRhoBound - 1e-12)
      throw StageOneError(what + ": correlation at the boundary (perfect association)\n" +
                          trace.str());
    throw StageOneError(what + ": score has no sign change, optimizer did not converge\n" +
                        trace.str());
  }

  double zlo = std::atanh(lo), zhi = std::atanh(hi);
  double z = 0.5 * (zlo + zhi);
  double s_prev = s_lo, z_prev = zlo;
  double s_cur = s_hi, z_cur = zhi;
  for (int it = 0; it < 200; ++it) {
    double z_next;
    if (s_cur != s_prev) {
      z_next = z_cur - s_cur * (z_cur - z_prev) / (s_cur - s_prev);  // secant
    } else {
      z_next = 0.5 * (zlo + zhi);
    }
    if (!(z_next > zlo && z_next < zhi)) z_next = 0.5 * (zlo + zhi);
    const double rho_next = std::tanh(z_next);
    const double s_next = eval(rho_next);
    if (s_next * s_lo > 0.0) {
      zlo = z_next;
      s_lo = s_next;
    } else {
      zhi = z_next;
      s_hi = s_next;
    }
    if (std::abs(std::tanh(zhi) - std::tanh(zlo)) < 1e-12)
      return std::tanh(0.5 * (zlo + zhi));
    z_prev = z_cur;
    s_prev = s_cur;
    z_cur = z_next;
    s_cur = s_next;
    z = z_next;
  }
  (void)z;
  throw StageOneError(what + ": 1-D optimizer exceeded the iteration cap\n" + trace.str());
}

double pearson_correlation(const Vector& a, const Vector& b) {
  const double ma = a.mean(), mb = b.mean();
  const Vector da = a.array() - ma, db = b.array() - mb;
  const double denom = std::sqrt(da.squaredNorm() * db.squaredNorm());
  if (denom == 0.0) return 0.0;
  return std::clamp(da.dot(db) / denom, -0.9, 0.9);
}

// ------------------------------------------------------ score evaluations

// Average univariate score of an ordinal margin as a function of thresholds.
Vector ordinal_avg_score(const Vector& counts, const std::vector<double>& taus) {
  const int nt = static_cast<int>(taus.size());
  const double n = counts.sum();
  const auto t = with_sentinels(taus);
  Vector probs(nt + 1);
  for (int c = 0; c <= nt; ++c)
    probs[c] = std::max(norm_cdf(t[c + 1]) - norm_cdf(t[c]), kProbFloor);
  Vector score(nt);
  for (int k = 1; k <= nt; ++k)
    score[k - 1] =
        norm_pdf(taus[k - 1]) * (counts[k - 1] / probs[k - 1] - counts[k] / probs[k]) / n;
  return score;
}

}  // namespace

int StageOneStats::n_ordinal() const {
  int s = 0;
  for (const auto& v : vars) s += v.kind == VarKind::Ordinal ? 1 : 0;
  return s;
}

Vector StageOneStats::omega() const {
  Vector w(order.size());
  for (int pos = 0; pos < order.size(); ++pos) {
    const StatId& id = order.entries()[pos];
    switch (id.kind) {
      case StatKind::Mean:
        w[pos] = means[id.i];
        break;
      case StatKind::Threshold:
        w[pos] = thresholds[id.i][id.j];
        break;
      case StatKind::Sigma:
        w[pos] = sigma(id.i, id.j);
        break;
    }
  }
  return w;
}

StatOrder omega_order_for(const std::vector<VariableMeta>& vars) {
  const int p = static_cast<int>(vars.size());
  std::vector<int> nthr(p);
  for (int j = 0; j < p; ++j) nthr[j] = vars[j].n_thresholds();
  StatOrder order(p, nthr);
  for (int j = 0; j < p; ++j)
    if (vars[j].kind == VarKind::Continuous) order.add({StatKind::Mean, j, -1});
  for (int j = 0; j < p; ++j)
    for (int k = 0; k < vars[j].n_thresholds(); ++k) order.add({StatKind::Threshold, j, k});
  for (int j = 0; j < p; ++j)
    for (int i = j; i < p; ++i) {
      if (i == j && vars[j].kind == VarKind::Ordinal) continue;  // fixed at 1
      order.add({StatKind::Sigma, i, j});
    }
  return order;
}

UnivariateStats estimate_univariate(const Vector& column, const VariableMeta& meta) {
  const int n = static_cast<int>(column.size());
  if (n < 2) throw StageOneError("variable '" + meta.name + "': fewer than 2 observations");
  for (int i = 0; i < n; ++i)
    if (std::isnan(column[i]))
      throw StageOneError("variable '" + meta.name +
                          "' contains missing values; apply listwise deletion first");

  UnivariateStats out;
  if (meta.kind == VarKind::Continuous) {
    out.mean = column.mean();
    out.variance = (column.array() - out.mean).square().sum() / (n - 1);
    if (out.variance <= 0.0)
      throw StageOneError("variable '" + meta.name + "' has zero variance");
    return out;
  }

  const int nc = meta.n_categories();
  Vector counts = Vector::Zero(nc);
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(column[i]);
    if (column[i] != std::floor(column[i]) || c < 0 || c >= nc)
      throw StageOneError("variable '" + meta.name + "': code " + std::to_string(column[i]) +
                          " outside the declared categories 0.." + std::to_string(nc - 1));
    counts[c] += 1.0;
  }
  for (int c = 0; c < nc; ++c)
    if (counts[c] == 0.0)
      throw StageOneError("variable '" + meta.name + "': category " + std::to_string(c) +
                          " has zero frequency; collapse categories or drop the level");
  double cum = 0.0;
  out.thresholds.resize(nc - 1);
  for (int c = 0; c + 1 < nc; ++c) {
    cum += counts[c];
    out.thresholds[c] = norm_quantile(cum / n);
  }
  out.mean = 0.0;
  out.variance = 1.0;
  return out;
}

double estimate_pairwise(const Vector& col_j, const Vector& col_k,
                         const VariableMeta& meta_j, const VariableMeta& meta_k,
                         const UnivariateStats& uni_j, const UnivariateStats& uni_k) {
  const std::string what = "pair (" + meta_j.name + ", " + meta_k.name + ")";
  const bool oj = meta_j.kind == VarKind::Ordinal;
  const bool ok = meta_k.kind == VarKind::Ordinal;

  if (!oj && !ok) {
    const double mj = uni_j.mean, mk = uni_k.mean;
    return ((col_j.array() - mj) * (col_k.array() - mk)).sum() / (col_j.size() - 1);
  }

  if (oj && ok) {
    const Matrix counts =
        cell_counts(col_j, col_k, meta_j.n_categories(), meta_k.n_categories());
    auto score = [&](double rho) {
      return polychoric_score(counts, uni_j.thresholds, uni_k.thresholds, rho);
    };
    return solve_correlation(score, pearson_correlation(col_j, col_k), what);
  }

  const Vector& ord = oj ? col_j : col_k;
  const Vector& cont = oj ? col_k : col_j;
  const UnivariateStats& uo = oj ? uni_j : uni_k;
  const UnivariateStats& uc = oj ? uni_k : uni_j;
  auto score = [&](double rho) {
    return polyserial_score(ord, cont, uo.thresholds, uc.mean, uc.variance, rho);
  };
  return solve_correlation(score, pearson_correlation(ord, cont), what);
}

namespace {

// Raw-parameter scale: mixed pairs carry the polyserial correlation; the
// published omega carries the covariance rho * sd. Everything else matches.
struct PairRecord {
  int i = -1, j = -1;  // variable slots, i > j
  double raw = 0.0;    // correlation (oo, oc) or covariance (cc)
};

struct StageOneCore {
  std::vector<VariableMeta> vars;
  std::vector<UnivariateStats> uni;
  std::vector<PairRecord> pairs;
  Matrix sigma;
};

StageOneCore estimate_core(const std::vector<Vector>& cols,
                           const std::vector<VariableMeta>& vars, int threads) {
  StageOneCore core;
  core.vars = vars;
  const int p = static_cast<int>(vars.size());
  core.uni.resize(p);
  for (int j = 0; j < p; ++j) core.uni[j] = estimate_univariate(cols[j], vars[j]);

  std::vector<PairRecord> pairs;
  for (int j = 0; j < p; ++j)
    for (int i = j + 1; i < p; ++i) pairs.push_back({i, j, 0.0});
  std::vector<std::string> failures(pairs.size());
  parallel_for(
      static_cast<int>(pairs.size()),
      [&](int m) {
        PairRecord& pr = pairs[m];
        try {
          pr.raw = estimate_pairwise(cols[pr.i], cols[pr.j], vars[pr.i], vars[pr.j],
                                     core.uni[pr.i], core.uni[pr.j]);
        } catch (const std::exception& e) {
          failures[m] = e.what();
        }
      },
      threads);
  for (const auto& f : failures)
    if (!f.empty()) throw StageOneError("pairwise estimation failed: " + f);

  core.sigma = Matrix::Zero(p, p);
  for (int j = 0; j < p; ++j)
    core.sigma(j, j) = vars[j].kind == VarKind::Ordinal ? 1.0 : core.uni[j].variance;
  for (const auto& pr : pairs) {
    const bool oi = vars[pr.i].kind == VarKind::Ordinal;
    const bool oj = vars[pr.j].kind == VarKind::Ordinal;
    double value = pr.raw;
    if (oi != oj) {
      const double cont_var = oi ? core.uni[pr.j].variance : core.uni[pr.i].variance;
      value *= std::sqrt(cont_var);
    }
    core.sigma(pr.i, pr.j) = core.sigma(pr.j, pr.i) = value;
  }
  core.pairs = std::move(pairs);
  return core;
}

// ------------------------------------------------------------- sandwich

Matrix sandwich_acov(const StageOneCore& core, const StatOrder& order,
                     const std::vector<Vector>& cols) {
  const int p = static_cast<int>(core.vars.size());
  const int q = order.size();
  const int n = static_cast<int>(cols[0].size());

  // Per-observation scores on the raw scale.
  Matrix g = Matrix::Zero(q, n);
  for (int j = 0; j < p; ++j) {
    const VariableMeta& meta = core.vars[j];
    const UnivariateStats& u = core.uni[j];
    if (meta.kind == VarKind::Continuous) {
      const int rm = order.mean(j);
      const int rv = order.sigma(j, j);
      const double var = u.variance;
      for (int i = 0; i < n; ++i) {
        const double d = cols[j][i] - u.mean;
        g(rm, i) += d / var;
        g(rv, i) += (d * d - var) / (2.0 * var * var);
      }
    } else {
      const int nt = meta.n_thresholds();
      const auto t = with_sentinels(u.thresholds);
      Vector probs(nt + 1);
      for (int c = 0; c <= nt; ++c)
        probs[c] = std::max(norm_cdf(t[c + 1]) - norm_cdf(t[c]), kProbFloor);
      for (int i = 0; i < n; ++i) {
        const int c = static_cast<int>(cols[j][i]);
        if (c >= 1) g(order.threshold(j, c - 1), i) -= norm_pdf(u.thresholds[c - 1]) / probs[c];
        if (c < nt) g(order.threshold(j, c), i) += norm_pdf(u.thresholds[c]) / probs[c];
      }
    }
  }
  for (const auto& pr : core.pairs) {
    const int row = order.sigma(pr.i, pr.j);
    const VariableMeta& mi = core.vars[pr.i];
    const VariableMeta& mj = core.vars[pr.j];
    const bool oi = mi.kind == VarKind::Ordinal, oj = mj.kind == VarKind::Ordinal;
    if (oi && oj) {
      // cell-wise score lookup
      const auto a = with_sentinels(core.uni[pr.i].thresholds);
      const auto b = with_sentinels(core.uni[pr.j].thresholds);
      Matrix cell_score(mi.n_categories(), mj.n_categories());
      for (int r = 0; r < cell_score.rows(); ++r)
        for (int c = 0; c < cell_score.cols(); ++c) {
          const double prb =
              std::max(bvn_rect(a[r], a[r + 1], b[c], b[c + 1], pr.raw), kProbFloor);
          const double dpr = bvn_pdf(a[r + 1], b[c + 1], pr.raw) -
                             bvn_pdf(a[r], b[c + 1], pr.raw) -
                             bvn_pdf(a[r + 1], b[c], pr.raw) + bvn_pdf(a[r], b[c], pr.raw);
          cell_score(r, c) = dpr / prb;
        }
      for (int i = 0; i < n; ++i)
        g(row, i) =
            cell_score(static_cast<int>(cols[pr.i][i]), static_cast<int>(cols[pr.j][i]));
    } else if (oi != oj) {
      const int o = oi ? pr.i : pr.j;
      const int c = oi ? pr.j : pr.i;
      const double sd = std::sqrt(core.uni[c].variance);
      for (int i = 0; i < n; ++i) {
        const double z = (cols[c][i] - core.uni[c].mean) / sd;
        g(row, i) = polyserial_obs_score(static_cast<int>(cols[o][i]), z,
                                         core.uni[o].thresholds, pr.raw);
      }
    } else {
      for (int i = 0; i < n; ++i)
        g(row, i) = pearson_pair_score(cols[pr.i][i], cols[pr.j][i], core.uni[pr.i].mean,
                                       core.uni[pr.j].mean, core.uni[pr.i].variance,
                                       core.uni[pr.j].variance, pr.raw);
    }
  }

  Matrix bmat = (g * g.transpose()) / n;

  // A = -d(average score)/d(parameters), assembled block by block with the
  // two-stage conditioning: univariate blocks first, pair rows depend on the
  // univariate parameters of their two variables and their own correlation.
  Matrix amat = Matrix::Zero(q, q);

  std::vector<std::vector<int>> uni_cols(p);
  for (int j = 0; j < p; ++j) {
    if (core.vars[j].kind == VarKind::Continuous) {
      uni_cols[j] = {order.mean(j), order.sigma(j, j)};
    } else {
      for (int k = 0; k < core.vars[j].n_thresholds(); ++k)
        uni_cols[j].push_back(order.threshold(j, k));
    }
  }

  for (int j = 0; j < p; ++j) {
    const VariableMeta& meta = core.vars[j];
    const UnivariateStats& u = core.uni[j];
    Vector x0;
    Vector steps;
    std::function<Vector(const Vector&)> avg;
    const double h0 = std::cbrt(std::numeric_limits<double>::epsilon());
    if (meta.kind == VarKind::Continuous) {
      const double sy = cols[j].sum();
      const double syy = cols[j].squaredNorm();
      x0 = Vector(2);
      x0 << u.mean, u.variance;
      steps = Vector(2);
      steps << h0 * std::sqrt(u.variance), h0 * u.variance;
      avg = [sy, syy, n](const Vector& x) -> Vector {
        const double mu = x[0], var = x[1];
        Vector s(2);
        s[0] = (sy / n - mu) / var;
        s[1] = ((syy - 2.0 * mu * sy) / n + mu * mu - var) / (2.0 * var * var);
        return s;
      };
    } else {
      const int nc = meta.n_categories();
      Vector counts = Vector::Zero(nc);
      for (int i = 0; i < n; ++i) counts[static_cast<int>(cols[j][i])] += 1.0;
      x0 = Eigen::Map<const Vector>(u.thresholds.data(), u.thresholds.size());
      steps = Vector::Constant(x0.size(), h0);
      avg = [counts](const Vector& x) -> Vector {
        return ordinal_avg_score(counts, std::vector<double>(x.data(), x.data() + x.size()));
      };
    }
    Matrix jac = numdiff_steps(avg, x0, steps);
    for (size_t r = 0; r < uni_cols[j].size(); ++r)
      for (size_t c = 0; c < uni_cols[j].size(); ++c)
        amat(uni_cols[j][r], uni_cols[j][c]) = -jac(static_cast<int>(r), static_cast<int>(c));
  }

  parallel_for(static_cast<int>(core.pairs.size()), [&](int m) {
    const PairRecord& pr = core.pairs[m];
    const int row = order.sigma(pr.i, pr.j);
    const VariableMeta& mi = core.vars[pr.i];
    const VariableMeta& mj = core.vars[pr.j];
    const bool oi = mi.kind == VarKind::Ordinal, oj = mj.kind == VarKind::Ordinal;

    std::vector<int> pcols;
    for (int c : uni_cols[pr.j]) pcols.push_back(c);
    for (int c : uni_cols[pr.i]) pcols.push_back(c);
    pcols.push_back(row);
    const int nj = static_cast<int>(uni_cols[pr.j].size());
    const int ni = static_cast<int>(uni_cols[pr.i].size());

    Vector x0(nj + ni + 1);
    std::function<Vector(const Vector&)> avg;
    if (oi && oj) {
      const Matrix counts = cell_counts(cols[pr.i], cols[pr.j], mi.n_categories(),
                                        mj.n_categories());
      for (int k = 0; k < nj; ++k) x0[k] = core.uni[pr.j].thresholds[k];
      for (int k = 0; k < ni; ++k) x0[nj + k] = core.uni[pr.i].thresholds[k];
      x0[nj + ni] = pr.raw;
      avg = [&counts, nj, ni, n](const Vector& x) -> Vector {
        std::vector<double> tj(x.data(), x.data() + nj);
        std::vector<double> ti(x.data() + nj, x.data() + nj + ni);
        Vector s(1);
        s[0] = polychoric_score(
                   Matrix(counts), ti, tj, x[nj + ni]) /
               n;
        return s;
      };
      Matrix jac = numdiff(avg, x0);
      for (size_t c = 0; c < pcols.size(); ++c)
        amat(row, pcols[c]) = -jac(0, static_cast<int>(c));
    } else if (oi != oj) {
      const int o = oi ? pr.i : pr.j;
      const int cvar = oi ? pr.j : pr.i;
      const int nt = core.vars[o].n_thresholds();
      // layout: thresholds of the ordinal var, then (mu, var), then rho —
      // matching pcols only if we rebuild pcols in the same order.
      pcols.clear();
      for (int c : uni_cols[o]) pcols.push_back(c);
      for (int c : uni_cols[cvar]) pcols.push_back(c);
      pcols.push_back(row);
      x0.resize(nt + 3);
      for (int k = 0; k < nt; ++k) x0[k] = core.uni[o].thresholds[k];
      x0[nt] = core.uni[cvar].mean;
      x0[nt + 1] = core.uni[cvar].variance;
      x0[nt + 2] = pr.raw;
      const double h0 = std::cbrt(std::numeric_limits<double>::epsilon());
      Vector steps = Vector::Constant(nt + 3, h0);
      steps[nt] = h0 * std::sqrt(core.uni[cvar].variance);
      steps[nt + 1] = h0 * core.uni[cvar].variance;
      const Vector& ord = cols[o];
      const Vector& cont = cols[cvar];
      avg = [&ord, &cont, nt, n](const Vector& x) -> Vector {
        std::vector<double> taus(x.data(), x.data() + nt);
        Vector s(1);
        s[0] = polyserial_score(ord, cont, taus, x[nt], x[nt + 1], x[nt + 2]) / n;
        return s;
      };
      Matrix jac = numdiff_steps(avg, x0, steps);
      for (size_t c = 0; c < pcols.size(); ++c)
        amat(row, pcols[c]) = -jac(0, static_cast<int>(c));
    } else {
      x0.resize(5);
      x0 << core.uni[pr.j].mean, core.uni[pr.j].variance, core.uni[pr.i].mean,
          core.uni[pr.i].variance, pr.raw;
      const double h0 = std::cbrt(std::numeric_limits<double>::epsilon());
      const double sdj = std::sqrt(core.uni[pr.j].variance);
      const double sdi = std::sqrt(core.uni[pr.i].variance);
      Vector steps(5);
      steps << h0 * sdj, h0 * sdj * sdj, h0 * sdi, h0 * sdi * sdi, h0 * sdj * sdi;
      const Vector& yj = cols[pr.j];
      const Vector& yi = cols[pr.i];
      avg = [&yj, &yi, n](const Vector& x) -> Vector {
        double total = 0.0;
        for (int i = 0; i < n; ++i)
          total += pearson_pair_score(yj[i], yi[i], x[0], x[2], x[1], x[3], x[4]);
        Vector s(1);
        s[0] = total / n;
        return s;
      };
      Matrix jac = numdiff_steps(avg, x0, steps);
      amat(row, order.mean(pr.j)) = -jac(0, 0);
      amat(row, order.sigma(pr.j, pr.j)) = -jac(0, 1);
      amat(row, order.mean(pr.i)) = -jac(0, 2);
      amat(row, order.sigma(pr.i, pr.i)) = -jac(0, 3);
      amat(row, row) = -jac(0, 4);
    }
  });

  Eigen::PartialPivLU<Matrix> lu(amat);
  Matrix mid = lu.solve(bmat);
  Matrix raw_acov = lu.solve(mid.transpose()).transpose() / n;

  // Raw -> omega: mixed-pair rows carry sigma = rho * sd(continuous).
  Matrix t = Matrix::Identity(q, q);
  for (const auto& pr : core.pairs) {
    const bool oi = core.vars[pr.i].kind == VarKind::Ordinal;
    const bool oj = core.vars[pr.j].kind == VarKind::Ordinal;
    if (oi == oj) continue;
    const int cvar = oi ? pr.j : pr.i;
    const int row = order.sigma(pr.i, pr.j);
    const double var = core.uni[cvar].variance;
    t(row, row) = std::sqrt(var);
    t(row, order.sigma(cvar, cvar)) = pr.raw / (2.0 * std::sqrt(var));
  }
  Matrix acov = t * raw_acov * t.transpose();
  return 0.5 * (acov + acov.transpose());
}

Vector omega_from_core(const StageOneCore& core, const StatOrder& order) {
  Vector w(order.size());
  for (int pos = 0; pos < order.size(); ++pos) {
    const StatId& id = order.entries()[pos];
    switch (id.kind) {
      case StatKind::Mean:
        w[pos] = core.uni[id.i].mean;
        break;
      case StatKind::Threshold:
        w[pos] = core.uni[id.i].thresholds[id.j];
        break;
      case StatKind::Sigma:
        w[pos] = core.sigma(id.i, id.j);
        break;
    }
  }
  return w;
}

Matrix bootstrap_acov(const StageOneCore& core, const StatOrder& order,
                      const std::vector<Vector>& cols, const StageOneOptions& options) {
  const int n = static_cast<int>(cols[0].size());
  const int reps = options.bootstrap_reps;
  const int q = order.size();
  Matrix draws(reps, q);
  std::vector<char> good(reps, 0);
  parallel_for(
      reps,
      [&](int r) {
        std::mt19937_64 rng(options.seed + 0x9e3779b97f4a7c15ULL * (r + 1));
        std::uniform_int_distribution<int> pick(0, n - 1);
        std::vector<Vector> resampled(cols.size(), Vector(n));
        for (int i = 0; i < n; ++i) {
          const int src = pick(rng);
          for (size_t j = 0; j < cols.size(); ++j) resampled[j][i] = cols[j][src];
        }
        try {
          StageOneCore rcore = estimate_core(resampled, core.vars, 1);
          draws.row(r) = omega_from_core(rcore, order).transpose();
          good[r] = 1;
        } catch (const std::exception&) {
          good[r] = 0;  // rare degenerate resample; dropped from the covariance
        }
      },
      options.threads);
  int kept = 0;
  for (int r = 0; r < reps; ++r) kept += good[r];
  if (kept < std::max(10, reps / 2))
    throw StageOneError("bootstrap acov: too many degenerate resamples (" +
                        std::to_string(reps - kept) + " of " + std::to_string(reps) + ")");
  Matrix used(kept, q);
  int at = 0;
  for (int r = 0; r < reps; ++r)
    if (good[r]) used.row(at++) = draws.row(r);
  Eigen::RowVectorXd mean = used.colwise().mean();
  used.rowwise() -= mean;
  return (used.transpose() * used) / (kept - 1);
}

}  // namespace

StageOneStats assemble_omega(const DataTable& data, const std::vector<VariableMeta>& metas,
                             const StageOneOptions& options) {
  if (data.n() < 3) throw StageOneError("fewer than 3 rows of data");

  // ordinal block first, then continuous; stable within blocks
  std::vector<int> position;
  for (const auto& m : metas)
    if (m.kind == VarKind::Ordinal) position.push_back(static_cast<int>(&m - metas.data()));
  for (const auto& m : metas)
    if (m.kind == VarKind::Continuous) position.push_back(static_cast<int>(&m - metas.data()));

  const int p = static_cast<int>(metas.size());
  std::vector<Vector> cols(p);
  std::vector<VariableMeta> vars(p);
  std::vector<int> source(p);
  for (int j = 0; j < p; ++j) {
    const VariableMeta& m = metas[position[j]];
    const int c = data.column(m.name);
    if (c < 0) throw StageOneError("variable '" + m.name + "' not found in the data");
    cols[j] = data.values.col(c);
    vars[j] = m;
    source[j] = c;
  }

  StageOneCore core = estimate_core(cols, vars, options.threads);
  StatOrder order = omega_order_for(vars);

  StageOneStats out;
  out.vars = std::move(vars);
  out.source_column = std::move(source);
  out.n = data.n();
  out.means = Vector::Zero(p);
  out.variances = Vector::Ones(p);
  out.thresholds.resize(p);
  for (int j = 0; j < p; ++j) {
    out.means[j] = core.uni[j].mean;
    out.variances[j] = core.uni[j].variance;
    out.thresholds[j] = core.uni[j].thresholds;
  }
  out.sigma = core.sigma;
  out.order = order;

  switch (options.acov) {
    case AcovMethod::None:
      break;
    case AcovMethod::Sandwich:
      out.acov = sandwich_acov(core, order, cols);
      break;
    case AcovMethod::Bootstrap:
      out.acov = bootstrap_acov(core, order, cols, options);
      break;
  }
  return out;
}

}  // namespace pivsem

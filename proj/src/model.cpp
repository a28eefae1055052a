#include "pivsem/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace pivsem {

namespace {

struct Term {
  std::optional<double> coef;
  std::string name;
  int col = 0;
};

struct Statement {
  enum class Op { Measure, Regress, Covary, Threshold, Intercept };
  Op op;
  std::string lhs;
  std::vector<Term> rhs;
  int line = 0;
  int col = 0;
};

bool valid_identifier(const std::string& s) {
  if (s.empty()) return false;
  if (!(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return true;
}

std::string trim(const std::string& s, int* lead = nullptr) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (lead) *lead = b == std::string::npos ? 0 : static_cast<int>(b);
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

Term parse_term(const std::string& raw, int line, int base_col) {
  int lead = 0;
  std::string t = trim(raw, &lead);
  Term term;
  term.col = base_col + lead + 1;
  if (t.empty()) throw ParseError("empty term", line, term.col);
  const size_t star = t.find('*');
  if (star != std::string::npos) {
    const std::string num = trim(t.substr(0, star));
    const std::string name = trim(t.substr(star + 1));
    char* end = nullptr;
    const double v = std::strtod(num.c_str(), &end);
    if (end != num.c_str() + num.size() || num.empty())
      throw ParseError("'" + num + "' is not a numeric fix", line, term.col);
    term.coef = v;
    term.name = name;
  } else {
    term.name = t;
  }
  if (term.name != "1" && !valid_identifier(term.name))
    throw ParseError("'" + term.name + "' is not a valid variable name", line, term.col);
  return term;
}

std::vector<Statement> tokenize(const std::string& text) {
  std::vector<Statement> out;
  std::istringstream in(text);
  std::string rawline;
  int lineno = 0;
  while (std::getline(in, rawline)) {
    ++lineno;
    const size_t hash = rawline.find('#');
    std::string line = hash == std::string::npos ? rawline : rawline.substr(0, hash);
    if (trim(line).empty()) continue;

    Statement st;
    st.line = lineno;
    size_t oppos;
    size_t oplen = 2;
    if ((oppos = line.find("=~")) != std::string::npos) {
      st.op = Statement::Op::Measure;
    } else if ((oppos = line.find("~~")) != std::string::npos) {
      st.op = Statement::Op::Covary;
    } else if ((oppos = line.find('|')) != std::string::npos) {
      st.op = Statement::Op::Threshold;
      oplen = 1;
    } else if ((oppos = line.find('~')) != std::string::npos) {
      st.op = Statement::Op::Regress;
      oplen = 1;
    } else {
      throw ParseError("statement has no operator (=~, ~, ~~, |)", lineno, 1);
    }
    st.col = static_cast<int>(oppos) + 1;

    int lead = 0;
    st.lhs = trim(line.substr(0, oppos), &lead);
    if (!valid_identifier(st.lhs))
      throw ParseError("'" + st.lhs + "' is not a valid variable name", lineno, lead + 1);

    const std::string rhs = line.substr(oppos + oplen);
    size_t start = 0;
    while (start <= rhs.size()) {
      size_t plus = rhs.find('+', start);
      const std::string piece =
          plus == std::string::npos ? rhs.substr(start) : rhs.substr(start, plus - start);
      st.rhs.push_back(parse_term(piece, lineno, static_cast<int>(oppos + oplen + start)));
      if (plus == std::string::npos) break;
      start = plus + 1;
    }
    if (st.op == Statement::Op::Regress && st.rhs.size() == 1 && st.rhs[0].name == "1" &&
        !st.rhs[0].coef) {
      st.op = Statement::Op::Intercept;
      st.rhs.clear();
    }
    for (const Term& t : st.rhs)
      if (t.name == "1")
        throw ParseError("'1' is only valid alone on the right of '~'", lineno, t.col);
    out.push_back(st);
  }
  return out;
}

std::string format_value(double v) {
  std::ostringstream os;
  os.precision(15);
  os << v;
  return os.str();
}

}  // namespace

int ModelSpec::observed_index(const std::string& name) const {
  for (size_t i = 0; i < observed.size(); ++i)
    if (observed[i] == name) return static_cast<int>(i);
  return -1;
}

int ModelSpec::latent_index(const std::string& name) const {
  for (size_t i = 0; i < latents.size(); ++i)
    if (latents[i] == name) return static_cast<int>(i);
  return -1;
}

bool ModelSpec::is_scaling_indicator(int obs) const {
  return std::find(scaling.begin(), scaling.end(), obs) != scaling.end();
}

ModelSpec parse_model(const std::string& text) {
  const std::vector<Statement> stmts = tokenize(text);
  if (stmts.empty()) throw ParseError("model text is empty", 1, 1);

  ModelSpec model;

  // Pass 1: latent names (measurement lhs) in order of first appearance.
  for (const auto& st : stmts)
    if (st.op == Statement::Op::Measure && model.latent_index(st.lhs) < 0)
      model.latents.push_back(st.lhs);

  auto is_latent = [&](const std::string& n) { return model.latent_index(n) >= 0; };

  // Pass 2: observed names in order of appearance.
  auto note_observed = [&](const std::string& n) {
    if (!is_latent(n) && model.observed_index(n) < 0) model.observed.push_back(n);
  };
  for (const auto& st : stmts) {
    switch (st.op) {
      case Statement::Op::Measure:
        for (const Term& t : st.rhs) {
          if (is_latent(t.name))
            throw ParseError("'" + t.name + "' is a latent variable; higher-order factors are not supported",
                             st.line, t.col);
          note_observed(t.name);
        }
        break;
      case Statement::Op::Regress:
        note_observed(st.lhs);
        for (const Term& t : st.rhs) note_observed(t.name);
        break;
      case Statement::Op::Covary:
        note_observed(st.lhs);
        for (const Term& t : st.rhs) note_observed(t.name);
        break;
      case Statement::Op::Threshold:
        if (is_latent(st.lhs))
          throw ParseError("thresholds declared for latent variable '" + st.lhs + "'", st.line, 1);
        note_observed(st.lhs);
        break;
      case Statement::Op::Intercept:
        note_observed(st.lhs);
        break;
    }
  }

  // Pass 3: phantom latents for observed variables used structurally.
  std::vector<bool> is_structural(model.observed.size(), false);
  for (const auto& st : stmts) {
    if (st.op != Statement::Op::Regress) continue;
    const int lo = model.observed_index(st.lhs);
    if (lo >= 0) is_structural[lo] = true;
    for (const Term& t : st.rhs) {
      const int to = model.observed_index(t.name);
      if (to >= 0) is_structural[to] = true;
    }
  }
  model.phantom.assign(model.latents.size(), false);
  std::vector<int> phantom_of(model.observed.size(), -1);
  for (size_t v = 0; v < model.observed.size(); ++v) {
    if (!is_structural[v]) continue;
    phantom_of[v] = model.n_latent();
    model.latents.push_back(model.observed[v]);
    model.phantom.push_back(true);
  }

  const int p = model.n_observed();
  const int m = model.n_latent();
  model.lambda = ParamPattern(p, m);
  model.beta = ParamPattern(m, m);
  model.psi = ParamPattern(m, m);
  model.theta = ParamPattern(p, p);
  model.indicators.resize(m);
  model.scaling.assign(m, -1);
  model.thresholds.resize(p);
  model.intercept_decl.assign(p, false);

  ParamPattern psi_declared(m, m), theta_declared(p, p);

  auto latent_slot = [&](const std::string& n) -> int {
    const int l = model.latent_index(n);
    if (l >= 0) return l;
    const int o = model.observed_index(n);
    return o >= 0 ? phantom_of[o] : -1;
  };

  for (const auto& st : stmts) {
    switch (st.op) {
      case Statement::Op::Measure: {
        const int l = model.latent_index(st.lhs);
        for (const Term& t : st.rhs) {
          const int o = model.observed_index(t.name);
          if (model.lambda(o, l).state != CellState::Zero)
            throw ParseError("duplicate loading for '" + t.name + "' on '" + st.lhs + "'",
                             st.line, t.col);
          model.lambda(o, l) =
              t.coef ? MatCell{CellState::Fixed, *t.coef} : MatCell{CellState::Free, 0.0};
          model.indicators[l].push_back(o);
        }
        break;
      }
      case Statement::Op::Regress: {
        const int k = latent_slot(st.lhs);
        for (const Term& t : st.rhs) {
          const int l = latent_slot(t.name);
          if (k == l)
            throw ParseError("variable '" + st.lhs + "' cannot be regressed on itself",
                             st.line, t.col);
          if (model.beta(k, l).state != CellState::Zero)
            throw ParseError("duplicate regression of '" + st.lhs + "' on '" + t.name + "'",
                             st.line, t.col);
          model.beta(k, l) =
              t.coef ? MatCell{CellState::Fixed, *t.coef} : MatCell{CellState::Free, 0.0};
        }
        break;
      }
      case Statement::Op::Covary: {
        const bool lhs_lat = is_latent(st.lhs) || (model.observed_index(st.lhs) >= 0 &&
                                                   phantom_of[model.observed_index(st.lhs)] >= 0);
        for (const Term& t : st.rhs) {
          const bool rhs_lat = is_latent(t.name) || (model.observed_index(t.name) >= 0 &&
                                                     phantom_of[model.observed_index(t.name)] >= 0);
          MatCell cell = t.coef ? MatCell{CellState::Fixed, *t.coef} : MatCell{CellState::Free, 0.0};
          if (lhs_lat && rhs_lat) {
            const int a = latent_slot(st.lhs), b = latent_slot(t.name);
            if (psi_declared(a, b).state != CellState::Zero)
              throw ParseError("duplicate covariance '" + st.lhs + " ~~ " + t.name + "'",
                               st.line, t.col);
            psi_declared(a, b) = psi_declared(b, a) = MatCell{CellState::Fixed, 1.0};
            model.psi(a, b) = model.psi(b, a) = cell;
          } else if (!lhs_lat && !rhs_lat) {
            const int a = model.observed_index(st.lhs), b = model.observed_index(t.name);
            if (theta_declared(a, b).state != CellState::Zero)
              throw ParseError("duplicate covariance '" + st.lhs + " ~~ " + t.name + "'",
                               st.line, t.col);
            theta_declared(a, b) = theta_declared(b, a) = MatCell{CellState::Fixed, 1.0};
            model.theta(a, b) = model.theta(b, a) = cell;
          } else {
            throw ParseError("covariance between a latent and an observed variable is not supported",
                             st.line, t.col);
          }
        }
        break;
      }
      case Statement::Op::Threshold: {
        const int o = model.observed_index(st.lhs);
        if (!model.thresholds[o].empty())
          throw ParseError("duplicate threshold statement for '" + st.lhs + "'", st.line, 1);
        for (size_t k = 0; k < st.rhs.size(); ++k) {
          const Term& t = st.rhs[k];
          const std::string want = "t" + std::to_string(k + 1);
          if (t.name != want)
            throw ParseError("threshold terms must be named t1..tK in order; expected '" + want +
                                 "', got '" + t.name + "'",
                             st.line, t.col);
          ThresholdDecl d;
          if (t.coef) {
            d.anchored = true;
            d.value = *t.coef;
          }
          model.thresholds[o].push_back(d);
        }
        break;
      }
      case Statement::Op::Intercept: {
        const int o = model.observed_index(st.lhs);
        if (o >= 0) model.intercept_decl[o] = true;
        break;
      }
    }
  }

  // Phantom measurement blocks: the observed variable is its own error-free
  // scaling indicator.
  for (int l = 0; l < m; ++l) {
    if (!model.phantom[l]) continue;
    const int o = model.observed_index(model.latents[l]);
    if (!model.indicators[l].empty() || model.lambda.nonzero_struct(o, l))
      throw SpecError("internal: phantom latent already has indicators");
    for (int f = 0; f < m; ++f)
      if (f != l && model.lambda(o, f).state != CellState::Zero)
        throw SpecError("variable '" + model.observed[o] +
                        "' is used both as an indicator and as a structural variable");
    model.lambda(o, l) = {CellState::Fixed, 1.0};
    model.indicators[l].push_back(o);
    model.scaling[l] = o;
    model.theta(o, o) = {CellState::Fixed, 0.0};
    theta_declared(o, o) = {CellState::Fixed, 1.0};
  }

  // Scaling indicators: explicit fixed-1 loading wins, otherwise the first
  // listed indicator gets its loading fixed at 1.
  for (int l = 0; l < m; ++l) {
    if (model.phantom[l]) continue;
    if (model.indicators[l].empty())
      throw SpecError("latent variable '" + model.latents[l] + "' has no indicators");
    int chosen = -1;
    for (int o : model.indicators[l]) {
      const MatCell& c = model.lambda(o, l);
      if (c.state == CellState::Fixed && c.value == 1.0) {
        chosen = o;
        break;
      }
    }
    if (chosen < 0) {
      chosen = model.indicators[l][0];
      if (model.lambda(chosen, l).state == CellState::Fixed &&
          model.lambda(chosen, l).value != 1.0)
        throw SpecError("latent variable '" + model.latents[l] +
                        "' needs a scaling indicator with loading fixed at 1");
      model.lambda(chosen, l) = {CellState::Fixed, 1.0};
    }
    model.scaling[l] = chosen;
  }
  // A scaling indicator sets the scale of exactly one latent and loads on
  // nothing else.
  for (int l = 0; l < m; ++l) {
    const int s = model.scaling[l];
    for (int f = 0; f < m; ++f) {
      if (f == l) continue;
      if (model.scaling[f] == s)
        throw SpecError("variable '" + model.observed[s] +
                        "' is the scaling indicator of two latent variables");
      if (model.lambda(s, f).state != CellState::Zero)
        throw SpecError("scaling indicator '" + model.observed[s] +
                        "' cannot load on another latent variable");
    }
  }

  // Defaults: free disturbance variances; free covariances among exogenous
  // latents; free error variances.
  std::vector<bool> exogenous(m, true);
  for (int k = 0; k < m; ++k)
    for (int l = 0; l < m; ++l)
      if (model.beta(k, l).state != CellState::Zero) exogenous[k] = false;
  for (int k = 0; k < m; ++k)
    if (psi_declared(k, k).state == CellState::Zero) model.psi(k, k) = {CellState::Free, 0.0};
  for (int a = 0; a < m; ++a)
    for (int b = a + 1; b < m; ++b)
      if (exogenous[a] && exogenous[b] && psi_declared(a, b).state == CellState::Zero)
        model.psi(a, b) = model.psi(b, a) = {CellState::Free, 0.0};
  for (int v = 0; v < p; ++v)
    if (theta_declared(v, v).state == CellState::Zero) model.theta(v, v) = {CellState::Free, 0.0};

  return model;
}

std::string serialize_model(const ModelSpec& model) {
  std::ostringstream os;
  const int m = model.n_latent();
  auto struct_name = [&](int l) {
    return model.phantom[l] ? model.latents[l] : model.latents[l];
  };
  for (int l = 0; l < m; ++l) {
    if (model.phantom[l]) continue;
    os << model.latents[l] << " =~";
    bool first = true;
    for (int o : model.indicators[l]) {
      os << (first ? " " : " + ");
      first = false;
      const MatCell& c = model.lambda(o, l);
      if (c.state == CellState::Fixed) os << format_value(c.value) << "*";
      os << model.observed[o];
    }
    os << "\n";
  }
  for (int k = 0; k < m; ++k) {
    bool any = false;
    for (int l = 0; l < m; ++l) any = any || model.beta(k, l).state != CellState::Zero;
    if (!any) continue;
    os << struct_name(k) << " ~";
    bool first = true;
    for (int l = 0; l < m; ++l) {
      const MatCell& c = model.beta(k, l);
      if (c.state == CellState::Zero) continue;
      os << (first ? " " : " + ");
      first = false;
      if (c.state == CellState::Fixed) os << format_value(c.value) << "*";
      os << struct_name(l);
    }
    os << "\n";
  }
  for (int a = 0; a < m; ++a)
    for (int b = a; b < m; ++b) {
      const MatCell& c = model.psi(a, b);
      if (a == b) {
        if (c.state == CellState::Fixed)
          os << struct_name(a) << " ~~ " << format_value(c.value) << "*" << struct_name(a) << "\n";
        continue;
      }
      if (c.state == CellState::Zero) continue;
      os << struct_name(a) << " ~~ ";
      if (c.state == CellState::Fixed) os << format_value(c.value) << "*";
      os << struct_name(b) << "\n";
    }
  for (int a = 0; a < model.n_observed(); ++a)
    for (int b = a; b < model.n_observed(); ++b) {
      const MatCell& c = model.theta(a, b);
      if (a == b) {
        const int lat = model.latent_index(model.observed[a]);
        const bool phantom_diag = lat >= 0 && model.phantom[lat];
        if (c.state == CellState::Fixed && !phantom_diag)
          os << model.observed[a] << " ~~ " << format_value(c.value) << "*" << model.observed[a]
             << "\n";
        continue;
      }
      if (c.state == CellState::Zero) continue;
      os << model.observed[a] << " ~~ ";
      if (c.state == CellState::Fixed) os << format_value(c.value) << "*";
      os << model.observed[b] << "\n";
    }
  for (int v = 0; v < model.n_observed(); ++v) {
    if (model.thresholds[v].empty()) continue;
    os << model.observed[v] << " |";
    for (size_t k = 0; k < model.thresholds[v].size(); ++k) {
      os << (k == 0 ? " " : " + ");
      if (model.thresholds[v][k].anchored) os << format_value(model.thresholds[v][k].value) << "*";
      os << "t" << (k + 1);
    }
    os << "\n";
  }
  for (int v = 0; v < model.n_observed(); ++v)
    if (model.intercept_decl[v]) os << model.observed[v] << " ~ 1\n";
  return os.str();
}

MiivSystem to_estimating_system(const ModelSpec& model) {
  const int p = model.n_observed();
  const int m = model.n_latent();

  // I - B must be structurally invertible: no directed cycles.
  {
    std::vector<int> state(m, 0);
    std::function<void(int)> visit = [&](int k) {
      state[k] = 1;
      for (int l = 0; l < m; ++l) {
        if (!model.beta.nonzero_struct(k, l)) continue;
        if (state[l] == 1)
          throw SpecError("the regression structure contains a cycle through '" +
                          model.latents[l] + "'; I - B is singular");
        if (state[l] == 0) visit(l);
      }
      state[k] = 2;
    };
    for (int k = 0; k < m; ++k)
      if (state[k] == 0) visit(k);
  }

  auto theta_alive = [&](int v) { return model.theta.nonzero_struct(v, v); };

  MiivSystem system;

  // Measurement equations for non-scaling indicators.
  for (int o = 0; o < p; ++o) {
    if (model.is_scaling_indicator(o)) continue;
    std::vector<int> factors;
    for (int l = 0; l < m; ++l)
      if (model.lambda(o, l).state != CellState::Zero) factors.push_back(l);
    if (factors.empty()) continue;  // not an indicator (structural-only variable)
    MiivEquation eq;
    eq.dependent = o;
    eq.latent_equation = false;
    for (int l : factors) {
      const MatCell& c = model.lambda(o, l);
      const int z = model.scaling[l];
      if (c.state == CellState::Free) {
        eq.regressors.push_back(z);
        eq.coef_ids.push_back({ParamKind::Lambda, o, l,
                               "lambda(" + std::to_string(o + 1) + "," + std::to_string(l + 1) + ")"});
      } else {
        eq.fixed_regressors.push_back(z);
        eq.fixed_coefs.push_back(c.value);
      }
      if (theta_alive(z))
        eq.error_terms.push_back({ErrorTerm::Kind::Eps, z, ErrorTerm::Coef::NegLambda, o, l});
    }
    if (theta_alive(o))
      eq.error_terms.insert(eq.error_terms.begin(),
                            {ErrorTerm::Kind::Eps, o, ErrorTerm::Coef::One, -1, -1});
    eq.intercept_id = {ParamKind::AlphaY, o, -1, "alpha_y(" + std::to_string(o + 1) + ")"};
    system.push_back(std::move(eq));
  }

  // Structural equations: one per latent with predictors, dependent variable
  // its scaling indicator.
  for (int k = 0; k < m; ++k) {
    std::vector<int> preds;
    for (int l = 0; l < m; ++l)
      if (model.beta(k, l).state != CellState::Zero) preds.push_back(l);
    if (preds.empty()) continue;
    MiivEquation eq;
    eq.dependent = model.scaling[k];
    eq.latent_equation = true;
    eq.latent = k;
    eq.error_terms.push_back({ErrorTerm::Kind::Zeta, k, ErrorTerm::Coef::One, -1, -1});
    if (theta_alive(model.scaling[k]))
      eq.error_terms.push_back(
          {ErrorTerm::Kind::Eps, model.scaling[k], ErrorTerm::Coef::IMinusB, k, k});
    for (int l : preds) {
      const MatCell& c = model.beta(k, l);
      const int z = model.scaling[l];
      if (c.state == CellState::Free) {
        eq.regressors.push_back(z);
        eq.coef_ids.push_back({ParamKind::Beta, k, l,
                               "beta(" + std::to_string(k + 1) + "," + std::to_string(l + 1) + ")"});
      } else {
        eq.fixed_regressors.push_back(z);
        eq.fixed_coefs.push_back(c.value);
      }
      if (theta_alive(z))
        eq.error_terms.push_back({ErrorTerm::Kind::Eps, z, ErrorTerm::Coef::IMinusB, k, l});
    }
    eq.intercept_id = {ParamKind::AlphaEta, k, -1, "alpha_eta(" + std::to_string(k + 1) + ")"};
    system.push_back(std::move(eq));
  }

  return system;
}

void find_miivs(MiivSystem& system, const ModelSpec& model) {
  const int p = model.n_observed();
  const int m = model.n_latent();

  // reach(f, l): a directed path l -> f in B (or l == f).
  std::vector<std::vector<bool>> reach(m, std::vector<bool>(m, false));
  for (int f = 0; f < m; ++f) reach[f][f] = true;
  for (bool changed = true; changed;) {
    changed = false;
    for (int k = 0; k < m; ++k)
      for (int l = 0; l < m; ++l) {
        if (!model.beta.nonzero_struct(k, l)) continue;
        for (int src = 0; src < m; ++src)
          if (reach[l][src] && !reach[k][src]) {
            reach[k][src] = true;
            changed = true;
          }
      }
  }
  // cov(eta_f, zeta_k) != 0 iff some l reaches f and Psi(l, k) is structural.
  auto eta_zeta = [&](int f, int k) {
    for (int l = 0; l < m; ++l)
      if (reach[f][l] && model.psi.nonzero_struct(l, k)) return true;
    return false;
  };
  auto cov_y_zeta = [&](int v, int k) {
    for (int f = 0; f < m; ++f)
      if (model.lambda.nonzero_struct(v, f) && eta_zeta(f, k)) return true;
    return false;
  };
  auto cov_y_eps = [&](int v, int t) {
    if (v == t) return model.theta.nonzero_struct(t, t);
    return model.theta.nonzero_struct(v, t);
  };

  for (MiivEquation& eq : system) {
    eq.instruments.clear();
    for (int v = 0; v < p; ++v) {
      if (v == eq.dependent) continue;
      bool excluded = false;
      for (const ErrorTerm& term : eq.error_terms) {
        if (term.kind == ErrorTerm::Kind::Eps ? cov_y_eps(v, term.index)
                                              : cov_y_zeta(v, term.index)) {
          excluded = true;
          break;
        }
      }
      if (!excluded) eq.instruments.push_back(v);
    }
    // A regressor can only instrument itself when it carries no error at all
    // (error-free observed structural variable); anything else violates (a).
    for (int z : eq.regressors)
      if (model.theta.nonzero_struct(z, z) &&
          std::find(eq.instruments.begin(), eq.instruments.end(), z) != eq.instruments.end())
        throw SpecError("internal: regressor selected as its own instrument");
    if (eq.instruments.size() < eq.regressors.size()) {
      std::ostringstream msg;
      msg << "equation for '" << model.observed[eq.dependent] << "' is underidentified: "
          << eq.instruments.size() << " instruments for " << eq.regressors.size()
          << " regressors";
      throw IdentificationError(msg.str());
    }
  }
}

Vector shea_r2(const MiivEquation& eq, const Matrix& sigma_star) {
  const std::vector<int>& v = eq.instruments;
  const std::vector<int>& x = eq.regressors;
  if (x.empty()) return Vector();
  Matrix svv(v.size(), v.size()), svx(v.size(), x.size()), sxx(x.size(), x.size());
  for (size_t a = 0; a < v.size(); ++a)
    for (size_t b = 0; b < v.size(); ++b) svv(a, b) = sigma_star(v[a], v[b]);
  for (size_t a = 0; a < v.size(); ++a)
    for (size_t b = 0; b < x.size(); ++b) svx(a, b) = sigma_star(v[a], x[b]);
  for (size_t a = 0; a < x.size(); ++a)
    for (size_t b = 0; b < x.size(); ++b) sxx(a, b) = sigma_star(x[a], x[b]);
  Eigen::LLT<Matrix> llt(svv);
  if (llt.info() != Eigen::Success)
    throw EstimationError("instrument covariance matrix is singular (MIIV condition (c))");
  Matrix proj = svx.transpose() * llt.solve(svx);  // S_vx' S_vv^-1 S_vx
  return (proj * sxx.inverse()).diagonal();
}

}  // namespace pivsem

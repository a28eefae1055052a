#include <doctest.h>

#include "pivsem/gauss.hpp"
#include "pivsem/reparam.hpp"
#include "test_util.hpp"

#include <cmath>
#include <random>

using namespace pivsem;

namespace {

VariableMeta ordinal_meta(const std::string& name, int ncat) {
  VariableMeta m{name, VarKind::Ordinal, {}};
  for (int c = 0; c < ncat; ++c) m.categories.push_back(c);
  return m;
}

VariableMeta cont_meta(const std::string& name) { return {name, VarKind::Continuous, {}}; }

// Fabricated stage-1 statistics with sorted thresholds and a PD mixed moment
// matrix (unit ordinal diagonal).
StageOneStats fabricate_stage1(std::mt19937_64& rng, const std::vector<VariableMeta>& vars,
                               bool with_acov = false) {
  const int p = static_cast<int>(vars.size());
  StageOneStats s;
  s.vars = vars;
  s.n = 1000;
  s.means = Vector::Zero(p);
  s.variances = Vector::Ones(p);
  s.thresholds.resize(p);
  std::uniform_real_distribution<double> uthr(-2.0, 2.0), umean(-1.0, 1.0), usd(0.6, 1.8);
  for (int j = 0; j < p; ++j) {
    if (vars[j].kind == VarKind::Ordinal) {
      std::vector<double> t(vars[j].n_thresholds());
      for (auto& v : t) v = uthr(rng);
      std::sort(t.begin(), t.end());
      for (size_t k = 1; k < t.size(); ++k)
        if (t[k] - t[k - 1] < 0.2) t[k] = t[k - 1] + 0.2;
      s.thresholds[j] = t;
    } else {
      s.means[j] = umean(rng);
      s.variances[j] = usd(rng) * usd(rng);
    }
  }
  Matrix a = testutil::random_matrix(rng, p, p);
  Matrix spd = a * a.transpose() + static_cast<double>(p) * Matrix::Identity(p, p);
  Vector d = spd.diagonal().cwiseSqrt().cwiseInverse();
  Matrix corr = d.asDiagonal() * spd * d.asDiagonal();
  Vector scale = Vector::Ones(p);
  for (int j = 0; j < p; ++j)
    if (vars[j].kind == VarKind::Continuous) scale[j] = std::sqrt(s.variances[j]);
  s.sigma = scale.asDiagonal() * corr * scale.asDiagonal();
  for (int j = 0; j < p; ++j)
    if (vars[j].kind == VarKind::Ordinal) s.sigma(j, j) = 1.0;
  s.order = omega_order_for(vars);
  if (with_acov) {
    Matrix b = testutil::random_matrix(rng, s.order.size(), s.order.size());
    s.acov = (b * b.transpose() + Matrix::Identity(s.order.size(), s.order.size())) /
             static_cast<double>(s.n);
  }
  return s;
}

// Scatters an omega vector back into a stage-1 clone (numdiff plumbing).
StageOneStats with_omega(const StageOneStats& tmpl, const Vector& w) {
  StageOneStats s = tmpl;
  for (int pos = 0; pos < s.order.size(); ++pos) {
    const StatId& id = s.order.entries()[pos];
    switch (id.kind) {
      case StatKind::Mean:
        s.means[id.i] = w[pos];
        break;
      case StatKind::Threshold:
        s.thresholds[id.i][id.j] = w[pos];
        break;
      case StatKind::Sigma:
        s.sigma(id.i, id.j) = w[pos];
        s.sigma(id.j, id.i) = w[pos];
        if (id.i == id.j) s.variances[id.i] = w[pos];
        break;
    }
  }
  return s;
}

}  // namespace

TEST_CASE("compute_q: continuous slots stay at the identity") {
  std::mt19937_64 rng(1);
  auto s1 = fabricate_stage1(rng, {cont_meta("x"), ordinal_meta("y", 4)});
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[1] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
  auto [q1, q2] = compute_q(s1, spec);
  CHECK(q1[0] == 0.0);
  CHECK(q2[0] == 1.0);
}

TEST_CASE("compute_q: worked two-anchor examples") {
  std::mt19937_64 rng(2);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y", 4)});
  s1.thresholds[0] = {-0.5, 0.3, 1.0};
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
  {
    auto [q1, q2] = compute_q(s1, spec);
    CHECK(q1[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(q2[0] == doctest::Approx(1.25).epsilon(1e-14));
  }
  // education-style anchors at 12 and 16
  s1.thresholds[0] = {-0.2, 0.9, 1.5};
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, 12.0, 16.0};
  auto [q1, q2] = compute_q(s1, spec);
  CHECK(q1[0] == doctest::Approx(3.5).epsilon(1e-13));
  CHECK(q2[0] == doctest::Approx(4.0 / 1.1).epsilon(1e-13));
  CHECK((-0.2 + q1[0]) * q2[0] == doctest::Approx(12.0).epsilon(1e-13));
  CHECK((0.9 + q1[0]) * q2[0] == doctest::Approx(16.0).epsilon(1e-13));
}

TEST_CASE("degenerate stage-1 thresholds make the transform singular") {
  std::mt19937_64 rng(3);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y", 4)});
  s1.thresholds[0] = {0.4, 0.4, 1.0};
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
  CHECK_THROWS_AS(compute_q(s1, spec), EstimationError);
}

TEST_CASE("binary variables reject the two-anchor request") {
  std::mt19937_64 rng(4);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("b", 2)});
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
  CHECK_THROWS_AS(validate_reparam_spec(s1.vars, spec), SpecError);
  // mean-only shift is allowed
  spec.anchors[0] = {AnchorKind::MeanOnly, 0, -1, 0.0, 0.0};
  CHECK_NOTHROW(validate_reparam_spec(s1.vars, spec));
}

TEST_CASE("identity spec reproduces the stage-1 statistics exactly") {
  std::mt19937_64 rng(5);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y1", 5), cont_meta("x"), ordinal_meta("y2", 3)});
  ReparamStats r = transform_moments(s1, ReparamSpec::identity(s1.vars));
  CHECK(r.order == s1.order);
  CHECK((r.pi() - s1.omega()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r.sigma_ddot - s1.sigma).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("worked transform: remaining threshold, mean and variance") {
  std::mt19937_64 rng(6);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y", 4)});
  s1.thresholds[0] = {-0.5, 0.3, 1.0};
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
  ReparamStats r = transform_moments(s1, spec);
  CHECK(r.tau_ddot[0][0] == 0.0);  // anchored exactly
  CHECK(r.tau_ddot[0][1] == 1.0);
  CHECK(r.tau_ddot[0][2] == doctest::Approx(1.875).epsilon(1e-14));
  CHECK(r.mu_ddot[0] == doctest::Approx(0.625).epsilon(1e-14));
  CHECK(r.sigma_ddot(0, 0) == doctest::Approx(1.5625).epsilon(1e-14));
}

TEST_CASE("correlation of the transformed variables is invariant") {
  std::mt19937_64 rng(7);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y1", 4), ordinal_meta("y2", 5), cont_meta("x")});
  ReparamSpec spec = ReparamSpec::default_anchors(s1.vars);
  ReparamStats r = transform_moments(s1, spec);
  for (int j = 0; j < 3; ++j)
    for (int i = j + 1; i < 3; ++i) {
      const double before = s1.sigma(i, j) / std::sqrt(s1.sigma(i, i) * s1.sigma(j, j));
      const double after =
          r.sigma_ddot(i, j) / std::sqrt(r.sigma_ddot(i, i) * r.sigma_ddot(j, j));
      CHECK(std::abs(before - after) < 1e-12);
    }
}

TEST_CASE("anchoring at the stage-1 values recovers the identity transform") {
  std::mt19937_64 rng(8);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y", 5), cont_meta("x")});
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, s1.thresholds[0][0],
                     s1.thresholds[0][1]};
  auto [q1, q2] = compute_q(s1, spec);
  CHECK(std::abs(q1[0]) < 1e-12);
  CHECK(std::abs(q2[0] - 1.0) < 1e-12);
  ReparamStats r = transform_moments(s1, spec);
  // same free set as omega except the ordinal mean/variance become free and
  // the two anchored thresholds drop out; compare overlapping entries
  for (size_t k = 0; k < s1.thresholds[0].size(); ++k)
    CHECK(std::abs(r.tau_ddot[0][k] - s1.thresholds[0][k]) < 1e-12);
  CHECK(std::abs(r.mu_ddot[0]) < 1e-12);
  CHECK((r.sigma_ddot - s1.sigma).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("reparam Jacobian is the identity under the identity spec") {
  std::mt19937_64 rng(9);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y1", 4), cont_meta("x"), ordinal_meta("y2", 3)});
  Matrix jac = reparam_jacobian(s1, ReparamSpec::identity(s1.vars));
  CHECK(jac.rows() == s1.order.size());
  CHECK(jac.isIdentity(1e-14));
}

TEST_CASE("reparam Jacobian matches finite differences, single variable") {
  std::mt19937_64 rng(10);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y", 5)});
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  spec.anchors[0] = {AnchorKind::MeanAndVariance, 0, 1, 0.0, 1.0};
  Matrix analytic = reparam_jacobian(s1, spec);
  auto f = [&](const Vector& w) { return transform_moments(with_omega(s1, w), spec).pi(); };
  Matrix numeric = numdiff(f, s1.omega());
  CHECK(testutil::rel_error(analytic, numeric) < 1e-6);
}

TEST_CASE("reparam Jacobian matches finite differences on randomized mixed sets") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 8; ++rep) {
    std::vector<VariableMeta> vars = {ordinal_meta("y1", 5), ordinal_meta("y2", 3),
                                      ordinal_meta("y3", 2), cont_meta("x1"), cont_meta("x2")};
    auto s1 = fabricate_stage1(rng, vars);
    ReparamSpec spec = ReparamSpec::identity(vars);
    // randomized anchor configuration
    spec.anchors[0] = {AnchorKind::MeanAndVariance, static_cast<int>(rng() % 2),
                       2 + static_cast<int>(rng() % 2), 0.0, 1.0};
    if (rep % 2 == 0) spec.anchors[1] = {AnchorKind::MeanAndVariance, 0, 1, 12.0, 16.0};
    if (rep % 3 == 0) spec.anchors[2] = {AnchorKind::MeanOnly, 0, -1, 0.0, 0.0};
    Matrix analytic = reparam_jacobian(s1, spec);
    auto f = [&](const Vector& w) { return transform_moments(with_omega(s1, w), spec).pi(); };
    Matrix numeric = numdiff(f, s1.omega());
    CHECK(testutil::rel_error(analytic, numeric) < 1e-6);
  }
}

TEST_CASE("var_pi equals Var(omega) under the identity spec") {
  std::mt19937_64 rng(12);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y", 4), cont_meta("x")}, true);
  ReparamSpec spec = ReparamSpec::identity(s1.vars);
  Matrix v = var_pi(s1, reparam_jacobian(s1, spec));
  CHECK((v - s1.acov).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("variance rows scale by q2^4 when thresholds carry no uncertainty") {
  std::mt19937_64 rng(13);
  auto s1 = fabricate_stage1(rng, {ordinal_meta("y1", 4), ordinal_meta("y2", 4)}, true);
  // zero out the threshold block so the transform acts as a fixed linear map
  for (int pos = 0; pos < s1.order.size(); ++pos)
    if (s1.order.entries()[pos].kind == StatKind::Threshold) {
      s1.acov.row(pos).setZero();
      s1.acov.col(pos).setZero();
    }
  ReparamSpec spec = ReparamSpec::default_anchors(s1.vars);
  ReparamStats r = transform_moments(s1, spec);
  Matrix v = var_pi(s1, reparam_jacobian(s1, spec));
  const int row = r.order.sigma(1, 0);
  const int col = s1.order.sigma(1, 0);
  const double scale = r.q2[0] * r.q2[1];
  CHECK(v(row, row) ==
        doctest::Approx(scale * scale * s1.acov(col, col)).epsilon(1e-12));
}

TEST_CASE("Var(pi) calibrates against Monte Carlo variability") {
  // 2 ordinal + 1 continuous, default anchors; reduced-scale version of the
  // simulation-based check.
  const int n = 1200, reps = 300;
  const std::vector<double> cuts5 = {norm_quantile(0.3), norm_quantile(0.7),
                                     norm_quantile(0.9), norm_quantile(0.96)};
  const std::vector<double> cuts3 = {norm_quantile(0.4), norm_quantile(0.8)};
  std::vector<VariableMeta> metas = {ordinal_meta("o1", 5), ordinal_meta("o2", 3),
                                     cont_meta("c1")};
  std::mt19937_64 rng(321);
  std::normal_distribution<double> normal;

  Matrix pis;
  Matrix var_diag_sum;
  int kept = 0;
  ReparamSpec spec;
  for (int r = 0; r < reps; ++r) {
    DataTable data;
    data.names = {"o1", "o2", "c1"};
    data.values.resize(n, 3);
    for (int i = 0; i < n; ++i) {
      const double f = normal(rng);
      const double z1 = 0.7 * f + std::sqrt(1 - 0.49) * normal(rng);
      const double z2 = 0.6 * f + std::sqrt(1 - 0.36) * normal(rng);
      const double z3 = 0.5 * f + std::sqrt(1 - 0.25) * normal(rng);
      int c1 = 0;
      while (c1 < 4 && z1 > cuts5[c1]) ++c1;
      int c2 = 0;
      while (c2 < 2 && z2 > cuts3[c2]) ++c2;
      data.values(i, 0) = c1;
      data.values(i, 1) = c2;
      data.values(i, 2) = 2.0 + 1.5 * z3;
    }
    StageOneStats s1 = assemble_omega(data, metas);
    spec = ReparamSpec::default_anchors(s1.vars);
    ReparamStats rp = apply_reparam(s1, spec);
    if (pis.size() == 0) {
      pis.resize(reps, rp.order.size());
      var_diag_sum = Matrix::Zero(1, rp.order.size());
    }
    pis.row(kept) = rp.pi().transpose();
    var_diag_sum += rp.acov.diagonal().transpose();
    ++kept;
  }
  REQUIRE(kept == reps);
  Eigen::RowVectorXd mean = pis.topRows(kept).colwise().mean();
  Matrix centered = pis.topRows(kept).rowwise() - mean;
  Eigen::RowVectorXd emp_var = centered.colwise().squaredNorm() / (kept - 1);
  Eigen::RowVectorXd avg_var = var_diag_sum / kept;
  for (int d = 0; d < emp_var.size(); ++d)
    CHECK(avg_var[d] / emp_var[d] == doctest::Approx(1.0).epsilon(0.25));
}

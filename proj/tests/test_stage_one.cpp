#include <doctest.h>

#include "pivsem/gauss.hpp"
#include "pivsem/stage_one.hpp"

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

// Bivariate normal draws discretized at fixed cutpoints (ordinal side).
struct BvnSampler {
  std::mt19937_64 rng;
  std::normal_distribution<double> normal;
  explicit BvnSampler(std::uint64_t seed) : rng(seed), normal(0.0, 1.0) {}
  std::pair<double, double> draw(double rho) {
    const double z1 = normal(rng);
    const double z2 = rho * z1 + std::sqrt(1.0 - rho * rho) * normal(rng);
    return {z1, z2};
  }
};

int discretize(double z, const std::vector<double>& cuts) {
  int c = 0;
  while (c < static_cast<int>(cuts.size()) && z > cuts[c]) ++c;
  return c;
}

const std::vector<double> kSimCuts = {norm_quantile(0.3), norm_quantile(0.7),
                                      norm_quantile(0.9), norm_quantile(0.96)};

}  // namespace

TEST_CASE("univariate margins: binary thresholds at quantiles") {
  Vector col(10);
  col << 0, 0, 0, 1, 1, 1, 1, 1, 1, 1;  // 30% zeros
  UnivariateStats u = estimate_univariate(col, ordinal_meta("y", 2));
  CHECK(u.mean == 0.0);
  CHECK(u.variance == 1.0);
  REQUIRE(u.thresholds.size() == 1);
  CHECK(u.thresholds[0] == doctest::Approx(-0.524400512708041).epsilon(1e-12));
}

TEST_CASE("univariate margins: continuous mean and n-1 variance") {
  Vector col(3);
  col << 1, 2, 3;
  UnivariateStats u = estimate_univariate(col, cont_meta("x"));
  CHECK(u.mean == doctest::Approx(2.0));
  CHECK(u.variance == doctest::Approx(1.0));
  CHECK(u.thresholds.empty());
}

TEST_CASE("univariate margins: five-category thresholds match the quantile oracle") {
  // proportions .3 .4 .2 .06 .04 built exactly from counts
  std::vector<int> counts = {150, 200, 100, 30, 20};
  Vector col(500);
  int at = 0;
  for (int c = 0; c < 5; ++c)
    for (int k = 0; k < counts[c]; ++k) col[at++] = c;
  UnivariateStats u = estimate_univariate(col, ordinal_meta("y", 5));
  REQUIRE(u.thresholds.size() == 4);
  const double cums[4] = {0.3, 0.7, 0.9, 0.96};
  for (int k = 0; k < 4; ++k)
    CHECK(u.thresholds[k] == doctest::Approx(norm_quantile(cums[k])).epsilon(1e-12));
}

TEST_CASE("zero-frequency category raises a collapse error naming the category") {
  Vector col(6);
  col << 0, 0, 2, 2, 2, 0;  // category 1 unobserved under a declared 3-level coding
  try {
    estimate_univariate(col, ordinal_meta("grade", 3));
    FAIL("expected StageOneError");
  } catch (const StageOneError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("grade") != std::string::npos);
    CHECK(msg.find("category 1") != std::string::npos);
  }
}

TEST_CASE("pairwise: exact linear continuous columns give covariance 2") {
  Vector a(3), b(3);
  a << 1, 2, 3;
  b << 2, 4, 6;
  const auto ma = cont_meta("a"), mb = cont_meta("b");
  const auto ua = estimate_univariate(a, ma), ub = estimate_univariate(b, mb);
  CHECK(estimate_pairwise(a, b, ma, mb, ua, ub) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("pairwise: polychoric recovery at rho = 0.5") {
  const int n = 100000;
  BvnSampler s(91);
  Vector a(n), b(n);
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(0.5);
    a[i] = discretize(z1, kSimCuts);
    b[i] = discretize(z2, kSimCuts);
  }
  const auto meta = ordinal_meta("y", 5);
  const auto ua = estimate_univariate(a, meta), ub = estimate_univariate(b, meta);
  const double rho = estimate_pairwise(a, b, meta, meta, ua, ub);
  CHECK(rho > 0.48);
  CHECK(rho < 0.52);
}

TEST_CASE("pairwise: polyserial on independent columns is near zero") {
  const int n = 100000;
  BvnSampler s(17);
  Vector a(n), b(n);
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(0.0);
    a[i] = discretize(z1, kSimCuts);
    b[i] = 3.0 + 2.0 * z2;
  }
  const auto mo = ordinal_meta("y", 5);
  const auto mc = cont_meta("x");
  const auto ua = estimate_univariate(a, mo), ub = estimate_univariate(b, mc);
  CHECK(std::abs(estimate_pairwise(a, b, mo, mc, ua, ub)) < 0.02);
}

TEST_CASE("pairwise: polyserial recovery with a scaled continuous variable") {
  const int n = 60000;
  BvnSampler s(33);
  Vector a(n), b(n);
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(-0.6);
    a[i] = discretize(z1, kSimCuts);
    b[i] = 10.0 - 3.0 * z2;  // flips the sign of the correlation
  }
  const auto mo = ordinal_meta("y", 5);
  const auto mc = cont_meta("x");
  const auto ua = estimate_univariate(a, mo), ub = estimate_univariate(b, mc);
  const double rho = estimate_pairwise(a, b, mo, mc, ua, ub);
  CHECK(rho == doctest::Approx(0.6).epsilon(0.04));
}

TEST_CASE("pairwise estimation is a pure function of data and thresholds") {
  const int n = 5000;
  BvnSampler s(7);
  Vector a(n), b(n);
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(0.4);
    a[i] = discretize(z1, kSimCuts);
    b[i] = discretize(z2, {0.0});
  }
  const auto ma = ordinal_meta("a", 5), mb = ordinal_meta("b", 2);
  auto ua = estimate_univariate(a, ma);
  const auto ub = estimate_univariate(b, mb);
  const double first = estimate_pairwise(a, b, ma, mb, ua, ub);
  // perturb then restore
  ua.thresholds[0] += 0.25;
  ua.thresholds[0] -= 0.25;
  const double second = estimate_pairwise(a, b, ma, mb, ua, ub);
  CHECK(first == second);
}

TEST_CASE("perfect association hits the boundary error") {
  Vector a(40), b(40);
  for (int i = 0; i < 40; ++i) {
    a[i] = i < 20 ? 0 : 1;
    b[i] = a[i];
  }
  const auto m = ordinal_meta("y", 2);
  const auto ua = estimate_univariate(a, m), ub = estimate_univariate(b, m);
  CHECK_THROWS_AS(static_cast<void>(estimate_pairwise(a, b, m, m, ua, ub)), StageOneError);
}

TEST_CASE("assemble_omega: all-continuous reduces to sample moments") {
  const int n = 4000;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  DataTable data;
  data.names = {"x1", "x2", "x3"};
  data.values.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    const double f = normal(rng);
    data.values(i, 0) = f + 0.5 * normal(rng);
    data.values(i, 1) = 0.8 * f + normal(rng) + 1.0;
    data.values(i, 2) = 2.0 * normal(rng) - 2.0;
  }
  std::vector<VariableMeta> metas = {cont_meta("x1"), cont_meta("x2"), cont_meta("x3")};
  StageOneStats s1 = assemble_omega(data, metas);

  Eigen::RowVectorXd mean = data.values.colwise().mean();
  Matrix centered = data.values.rowwise() - mean;
  Matrix cov = centered.transpose() * centered / (n - 1);
  CHECK((s1.sigma - cov).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((s1.means - mean.transpose()).cwiseAbs().maxCoeff() < 1e-12);

  // sandwich acov vs normal-theory expressions
  REQUIRE(s1.acov.rows() == s1.order.size());
  for (int j = 0; j < 3; ++j) {
    const double want_mu = cov(j, j) / n;
    CHECK(s1.acov(s1.order.mean(j), s1.order.mean(j)) ==
          doctest::Approx(want_mu).epsilon(0.2));
    const double want_var = 2.0 * cov(j, j) * cov(j, j) / n;
    CHECK(s1.acov(s1.order.sigma(j, j), s1.order.sigma(j, j)) ==
          doctest::Approx(want_var).epsilon(0.25));
  }
  const double want_cov01 = (cov(0, 0) * cov(1, 1) + cov(0, 1) * cov(0, 1)) / n;
  CHECK(s1.acov(s1.order.sigma(0, 1), s1.order.sigma(0, 1)) ==
        doctest::Approx(want_cov01).epsilon(0.25));
  // means uncorrelated with second moments under normality
  const double scale = std::sqrt(s1.acov(s1.order.mean(0), s1.order.mean(0)) *
                                 s1.acov(s1.order.sigma(0, 1), s1.order.sigma(0, 1)));
  CHECK(std::abs(s1.acov(s1.order.mean(0), s1.order.sigma(0, 1))) < 0.15 * scale * 10);
}

TEST_CASE("assemble_omega: two ordinal variables give a unit-diagonal 2x2") {
  const int n = 4000;
  BvnSampler s(5);
  DataTable data;
  data.names = {"u", "v"};
  data.values.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(0.35);
    data.values(i, 0) = discretize(z1, kSimCuts);
    data.values(i, 1) = discretize(z2, {-0.4, 0.6});
  }
  std::vector<VariableMeta> metas = {ordinal_meta("u", 5), ordinal_meta("v", 3)};
  StageOneStats s1 = assemble_omega(data, metas);
  CHECK(s1.sigma(0, 0) == 1.0);
  CHECK(s1.sigma(1, 1) == 1.0);
  CHECK(s1.sigma(0, 1) == s1.sigma(1, 0));
  CHECK(std::abs(s1.sigma(0, 1) - 0.35) < 0.05);
  // omega layout: thresholds then the single correlation
  CHECK(s1.order.size() == 4 + 2 + 1);
  CHECK(s1.order.sigma(1, 0) == 6);
  // acov symmetric PSD within tolerance
  Eigen::SelfAdjointEigenSolver<Matrix> es(s1.acov);
  CHECK(es.eigenvalues().minCoeff() > -1e-8);
}

TEST_CASE("assemble_omega reorders mixed variables ordinal-first") {
  const int n = 500;
  BvnSampler s(11);
  DataTable data;
  data.names = {"c1", "o1", "c2"};
  data.values.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(0.3);
    data.values(i, 0) = z1 * 1.5 + 2.0;
    data.values(i, 1) = discretize(z2, {-0.5, 0.5});
    data.values(i, 2) = z2 + 0.5 * z1;
  }
  std::vector<VariableMeta> metas = {cont_meta("c1"), ordinal_meta("o1", 3), cont_meta("c2")};
  StageOneStats s1 = assemble_omega(data, metas, {AcovMethod::None});
  CHECK(s1.vars[0].name == "o1");
  CHECK(s1.vars[1].name == "c1");
  CHECK(s1.vars[2].name == "c2");
  CHECK(s1.source_column == std::vector<int>({1, 0, 2}));
  CHECK(s1.sigma(0, 0) == 1.0);
  // polyserial band entries are covariances: rho * sd(continuous)
  CHECK(std::abs(s1.sigma(0, 1)) < 1.5);
}

TEST_CASE("sandwich acov matches bootstrap on a mixed 3-variable set") {
  const int n = 2500;
  BvnSampler s(23);
  DataTable data;
  data.names = {"o1", "o2", "c1"};
  data.values.resize(n, 3);
  std::normal_distribution<double> extra;
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = s.draw(0.5);
    const double z3 = 0.4 * z1 + 0.3 * z2 +
                      std::sqrt(1.0 - 0.4 * 0.4 - 0.3 * 0.3 - 2 * 0.4 * 0.3 * 0.5) *
                          extra(s.rng);
    data.values(i, 0) = discretize(z1, kSimCuts);
    data.values(i, 1) = discretize(z2, {-0.6, 0.4});
    data.values(i, 2) = 1.0 + 2.0 * z3;
  }
  std::vector<VariableMeta> metas = {ordinal_meta("o1", 5), ordinal_meta("o2", 3),
                                     cont_meta("c1")};
  StageOneOptions sw;
  sw.acov = AcovMethod::Sandwich;
  StageOneStats s_sand = assemble_omega(data, metas, sw);

  StageOneOptions bs;
  bs.acov = AcovMethod::Bootstrap;
  bs.bootstrap_reps = 400;
  bs.seed = 99;
  StageOneStats s_boot = assemble_omega(data, metas, bs);

  REQUIRE(s_sand.acov.rows() == s_boot.acov.rows());
  for (int k = 0; k < s_sand.acov.rows(); ++k) {
    const double a = s_sand.acov(k, k);
    const double b = s_boot.acov(k, k);
    CHECK(std::abs(a - b) / b < 0.25);  // bootstrap noise at 400 reps
  }
}

TEST_CASE("omega RMSE shrinks like n^{-1/2}") {
  // one ordinal / one continuous pair with rho = 0.4
  const double rho = 0.4;
  const std::vector<int> sizes = {400, 1600, 6400};
  const int reps = 120;
  std::vector<double> rmse;
  for (int n : sizes) {
    double sq = 0.0;
    int cnt = 0;
    BvnSampler s(1000 + n);
    for (int r = 0; r < reps; ++r) {
      Vector a(n), b(n);
      for (int i = 0; i < n; ++i) {
        auto [z1, z2] = s.draw(rho);
        a[i] = discretize(z1, kSimCuts);
        b[i] = z2;
      }
      const auto mo = ordinal_meta("o", 5);
      const auto mc = cont_meta("c");
      const auto ua = estimate_univariate(a, mo), ub = estimate_univariate(b, mc);
      const double rh = estimate_pairwise(a, b, mo, mc, ua, ub);
      sq += (rh - rho) * (rh - rho);
      ++cnt;
    }
    rmse.push_back(std::sqrt(sq / cnt));
  }
  const double slope = std::log(rmse.back() / rmse.front()) /
                       std::log(static_cast<double>(sizes.back()) / sizes.front());
  CHECK(slope > -0.6);
  CHECK(slope < -0.4);
}

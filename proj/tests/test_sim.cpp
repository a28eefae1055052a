#include <doctest.h>

#include "pivsem/gauss.hpp"
#include "pivsem/sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace pivsem;

TEST_CASE("same seed gives byte-identical datasets") {
  StudyConfig cfg = mixed5_design();
  DataTable a = generate_dataset(cfg, 500, 3);
  DataTable b = generate_dataset(cfg, 500, 3);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);
  DataTable c = generate_dataset(cfg, 500, 4);
  CHECK((a.values - c.values).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("ordinal margins and continuous covariances match the population") {
  StudyConfig cfg = mixed5_design();
  const int n = 100000;
  DataTable data = generate_dataset(cfg, n, 0);
  // marginal frequencies of an ordinal column
  const int col = data.column("y8");
  Vector counts = Vector::Zero(5);
  for (int i = 0; i < n; ++i) counts[static_cast<int>(data.values(i, col))] += 1.0;
  const double want[5] = {0.3, 0.4, 0.2, 0.06, 0.04};
  for (int c = 0; c < 5; ++c) CHECK(std::abs(counts[c] / n - want[c]) < 0.01);

  // continuous block sample covariance vs implied population
  auto [sigma, mu] = implied_moments(cfg.theta.lambda, cfg.theta.beta, cfg.theta.psi,
                                     cfg.theta.theta_eps, cfg.theta.alpha_eta, cfg.theta.alpha_y);
  for (int a = 0; a < 5; ++a)
    for (int b = a; b < 5; ++b) {
      Vector ca = data.values.col(a), cb = data.values.col(b);
      const double sab =
          ((ca.array() - ca.mean()) * (cb.array() - cb.mean())).sum() / (n - 1);
      CHECK(std::abs(sab - sigma(a, b)) < 0.02);
    }
}

TEST_CASE("population targets carry the generating values and groups") {
  StudyConfig cfg = mixed5_design();
  PopulationTargets pop = population_targets(cfg, Parameterization::Standard);
  CHECK(pop.value.at("beta(3,1)") == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(pop.value.at("lambda(2,1)") == doctest::Approx(0.4).epsilon(1e-10));
  CHECK(pop.group.at("lambda(2,1)") == "lambda(c)");
  CHECK(pop.group.at("lambda(7,3)") == "lambda(o)");
  CHECK(pop.group.at("sigma_zeta(2,1)") == "sigma_zeta");
  CHECK(pop.group.at("tau(7,2)") == "tau");
  CHECK(pop.group.at("sigma_eps(3,3)") == "sigma_eps(c)");
  // thresholds at the design quantiles
  CHECK(pop.value.at("tau(6,1)") == doctest::Approx(norm_quantile(0.3)).epsilon(1e-12));
}

TEST_CASE("oracle estimator yields zero relative bias") {
  StudyConfig cfg = mixed5_design();
  PopulationTargets pop = population_targets(cfg, Parameterization::Standard);
  std::vector<RepResult> reps;
  for (int r = 0; r < 25; ++r) {
    RepResult rep;
    rep.replication = r;
    rep.converged = true;
    rep.npd = false;
    for (const auto& [label, value] : pop.value) {
      rep.estimate[label] = value;       // inject theta-hat == theta
      rep.se[label] = 0.01 + 0.001 * r;  // arbitrary positive SEs
    }
    reps.push_back(rep);
  }
  StudyCell cell =
      summarize_cell(reps, pop, 100, Parameterization::Standard, NpdPolicy::Exclude);
  for (const auto& [group, gs] : cell.groups) {
    if (std::isnan(gs.rb)) continue;  // groups with population value zero
    CHECK(std::abs(gs.rb) < 1e-12);
  }
  CHECK(cell.nonconv_pct == 0.0);
  CHECK(cell.npd_pct == 0.0);
  // standard parameterization: latent intercepts have population value zero,
  // so their RB is undefined while their RBSE is not
  REQUIRE(cell.groups.count("alpha_eta") == 1);
  CHECK(std::isnan(cell.groups.at("alpha_eta").rb));
}

TEST_CASE("summary is invariant to replication execution order") {
  StudyConfig cfg = mixed5_design();
  PopulationTargets pop = population_targets(cfg, Parameterization::Standard);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<RepResult> reps;
  for (int r = 0; r < 40; ++r) {
    RepResult rep;
    rep.replication = r;
    rep.converged = r % 11 != 0;
    rep.npd = r % 7 == 0;
    for (const auto& [label, value] : pop.value) {
      rep.estimate[label] = value + noise(rng);
      rep.se[label] = 0.05 + 0.01 * std::abs(noise(rng));
    }
    rep.shea = {0.2 + 0.001 * r, 0.5};
    reps.push_back(rep);
  }
  StudyCell a = summarize_cell(reps, pop, 200, Parameterization::Standard, NpdPolicy::Include);
  std::shuffle(reps.begin(), reps.end(), rng);
  StudyCell b = summarize_cell(reps, pop, 200, Parameterization::Standard, NpdPolicy::Include);
  REQUIRE(a.groups.size() == b.groups.size());
  for (const auto& [group, gs] : a.groups) {
    const GroupSummary& other = b.groups.at(group);
    if (!std::isnan(gs.rb)) CHECK(gs.rb == other.rb);
    if (!std::isnan(gs.rbse)) CHECK(gs.rbse == other.rbse);
  }
  CHECK(a.npd_pct == b.npd_pct);
  CHECK(a.shea_median == b.shea_median);
}

TEST_CASE("smoke study run emits both policy blocks and csv/table output") {
  StudyConfig cfg = mixed5_design();
  cfg.sample_sizes = {200};
  cfg.replications = 10;
  cfg.seed = 7;
  StudySummary summary = run_study(cfg);
  REQUIRE(summary.cells.size() == 2);
  const StudyCell* ex = summary.cell(200, Parameterization::Standard, NpdPolicy::Exclude);
  const StudyCell* in = summary.cell(200, Parameterization::Standard, NpdPolicy::Include);
  REQUIRE(ex != nullptr);
  REQUIRE(in != nullptr);
  CHECK(ex->nonconv_pct == 0.0);
  CHECK(ex->groups.count("lambda(o)") == 1);
  CHECK(std::isfinite(ex->groups.at("lambda(o)").rb));
  CHECK(ex->groups.count("tau") == 1);
  const std::string csv = summary.to_csv();
  CHECK(csv.find("lambda(o)") != std::string::npos);
  const std::string table = summary.to_table();
  CHECK(table.find("standard parameterization") != std::string::npos);
  // identical seeds reproduce identical summaries
  StudySummary again = run_study(cfg);
  CHECK(again.to_csv() == csv);
}

TEST_CASE("alternative parameterization study at a small scale") {
  StudyConfig cfg = mixed5_design();
  cfg.sample_sizes = {400};
  cfg.replications = 6;
  cfg.parameterizations = {Parameterization::Alternative};
  cfg.seed = 21;
  StudySummary summary = run_study(cfg);
  const StudyCell* ex = summary.cell(400, Parameterization::Alternative, NpdPolicy::Exclude);
  REQUIRE(ex != nullptr);
  // intercept and ordinal error-variance groups exist under the alternative
  // parameterization
  CHECK(ex->groups.count("alpha_y(o)") == 1);
  CHECK(ex->groups.count("sigma_eps(o)") == 1);
  CHECK(std::isfinite(ex->groups.at("alpha_y(o)").rb));
}

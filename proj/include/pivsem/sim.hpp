#pragma once

// Monte Carlo harness: deterministic data generation from a structural model,
// replication management, and relative-bias bookkeeping for point estimates
// and standard errors with both improper-solution policies.

#include "pivsem/fit.hpp"

#include <cstdint>
#include <map>

namespace pivsem {

struct GeneratingTheta {
  Matrix lambda, beta, psi, theta_eps;
  Vector alpha_eta, alpha_y;
};

enum class NpdPolicy { Exclude, Include };

struct StudyConfig {
  std::string model_text;
  GeneratingTheta theta;
  std::vector<int> sample_sizes;
  int replications = 200;
  std::vector<std::string> ordinal_vars;           // names of discretized indicators
  std::vector<std::vector<double>> probabilities;  // response probabilities per ordinal var
  std::vector<Parameterization> parameterizations = {Parameterization::Standard};
  std::uint64_t seed = 1;
  WeightMode weight = WeightMode::Full;
  int threads = 0;

  void validate() const;  // throws SpecError
};

// The bundled mixed-data design: five factors, indicators y1-y5 continuous
// and y6-y12 five-category ordinal with response probabilities
// (.3, .4, .2, .06, .04); every indicator has unit total variance.
StudyConfig mixed5_design();

// Byte-deterministic in (config.seed, n, replication), independent of thread
// scheduling.
DataTable generate_dataset(const StudyConfig& config, int n, int replication);

// Population values and reporting groups, obtained by fitting the model at
// the exact population moments of the requested parameterization.
struct PopulationTargets {
  std::map<std::string, double> value;       // label -> population value
  std::map<std::string, std::string> group;  // label -> parameter group
  FitResult fit;                             // the population fit itself
};
PopulationTargets population_targets(const StudyConfig& config, Parameterization par);

struct RepResult {
  int replication = -1;
  bool converged = false;
  bool npd = false;
  std::map<std::string, double> estimate;
  std::map<std::string, double> se;
  std::vector<double> shea;  // pooled across equations/regressors
};

struct GroupSummary {
  double rb = std::numeric_limits<double>::quiet_NaN();
  double rbse = std::numeric_limits<double>::quiet_NaN();
  int n_params = 0;
};

struct StudyCell {
  int n = 0;
  Parameterization parameterization = Parameterization::Standard;
  NpdPolicy policy = NpdPolicy::Exclude;
  std::map<std::string, GroupSummary> groups;
  double npd_pct = 0.0;      // share of converged replications flagged NPD
  double nonconv_pct = 0.0;  // share of replications that failed to converge
  double shea_min = 0.0, shea_median = 0.0, shea_max = 0.0;
};

struct StudySummary {
  std::vector<StudyCell> cells;

  const StudyCell* cell(int n, Parameterization par, NpdPolicy policy) const;
  std::string to_csv() const;
  std::string to_table() const;
};

// Deterministic aggregation: replications are sorted by index before any
// reduction, so the summary does not depend on execution order.
StudyCell summarize_cell(std::vector<RepResult> reps, const PopulationTargets& pop, int n,
                         Parameterization par, NpdPolicy policy);

StudySummary run_study(const StudyConfig& config);

}  // namespace pivsem

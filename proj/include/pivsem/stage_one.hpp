#pragma once

// Step 1 of the estimation algorithm: univariate thresholds/means/variances,
// pairwise polychoric / polyserial / Pearson moments, and the asymptotic
// covariance of the stacked statistics vector omega = (mu, tau, v(Sigma)).

#include "pivsem/data.hpp"

#include <cstdint>

namespace pivsem {

struct UnivariateStats {
  double mean = 0.0;
  double variance = 1.0;
  std::vector<double> thresholds;  // C-1 strictly increasing values (ordinal)
};

struct StageOneStats {
  std::vector<VariableMeta> vars;   // ordinal block first, then continuous
  std::vector<int> source_column;   // position of each var in the input table
  int n = 0;

  Vector means;                                  // p, zero on ordinal slots
  Vector variances;                              // p, one on ordinal slots
  std::vector<std::vector<double>> thresholds;   // per variable
  Matrix sigma;                                  // p x p mixed moment matrix

  StatOrder order;  // layout of the free statistics omega
  Matrix acov;      // Var(omega_hat), finite-sample scale; 0x0 when skipped

  int p() const { return static_cast<int>(vars.size()); }
  int n_ordinal() const;
  Vector omega() const;  // stacked free statistics per `order`
};

enum class AcovMethod { None, Sandwich, Bootstrap };

struct StageOneOptions {
  AcovMethod acov = AcovMethod::Sandwich;
  int bootstrap_reps = 500;
  std::uint64_t seed = 20260801;  // bootstrap resampling only
  int threads = 0;
};

// Layout of the free stage-1 statistics for a variable set: continuous
// means, then thresholds variable-major, then the free lower triangle of
// Sigma column-major (ordinal diagonals are fixed at 1 and skipped).
StatOrder omega_order_for(const std::vector<VariableMeta>& vars);

// Univariate margins. Ordinal: ML thresholds at normal quantiles of the
// cumulative proportions, mean 0, variance 1; a declared category with zero
// frequency is an error naming the category. Continuous: sample mean and
// (n-1)-denominator variance.
UnivariateStats estimate_univariate(const Vector& column, const VariableMeta& meta);

// Pairwise moment with thresholds/means/variances held at the univariate
// estimates: polychoric correlation (ordinal-ordinal), polyserial correlation
// (ordinal-continuous, either argument order), sample covariance
// (continuous-continuous).
double estimate_pairwise(const Vector& col_j, const Vector& col_k,
                         const VariableMeta& meta_j, const VariableMeta& meta_k,
                         const UnivariateStats& uni_j, const UnivariateStats& uni_k);

// Full step 1. Variables are reordered ordinal-first; `source_column` records
// the permutation. Any pairwise failure aborts naming the offending pair.
StageOneStats assemble_omega(const DataTable& data, const std::vector<VariableMeta>& metas,
                             const StageOneOptions& options = {});

}  // namespace pivsem

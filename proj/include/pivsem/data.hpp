#pragma once

#include "pivsem/errors.hpp"
#include "pivsem/patterns.hpp"

#include <string>
#include <vector>

namespace pivsem {

enum class VarKind { Continuous, Ordinal };

struct VariableMeta {
  std::string name;
  VarKind kind = VarKind::Continuous;
  std::vector<int> categories;  // observed codes, sorted (ordinal only)

  int n_categories() const { return static_cast<int>(categories.size()); }
  int n_thresholds() const {
    return kind == VarKind::Ordinal ? n_categories() - 1 : 0;
  }
};

// n x p column table; ordinal columns hold category codes 0..C-1.
struct DataTable {
  std::vector<std::string> names;
  Matrix values;

  int n() const { return static_cast<int>(values.rows()); }
  int p() const { return static_cast<int>(values.cols()); }
  int column(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }
};

// Ordinal meta from an observed column: distinct sorted codes. The column is
// recoded in place to ranks 0..C-1 when codes are not contiguous.
VariableMeta ordinal_meta_from_column(const std::string& name, Eigen::Ref<Vector> column);

// One slot of a stacked statistics vector (omega or pi).
enum class StatKind { Mean, Threshold, Sigma };

struct StatId {
  StatKind kind;
  int i = -1;  // variable (Mean, Threshold) or row (Sigma)
  int j = -1;  // threshold index (Threshold) or column (Sigma, i >= j)
};

// Explicit index map between statistics and their positions in a stacked
// vector / covariance matrix. No positional conventions cross module
// boundaries without one of these.
class StatOrder {
 public:
  StatOrder() = default;
  StatOrder(int p, const std::vector<int>& n_thresholds);

  int add(const StatId& id);

  int size() const { return static_cast<int>(entries_.size()); }
  const std::vector<StatId>& entries() const { return entries_; }

  // -1 when the statistic is not free under the layout.
  int mean(int var) const { return mean_pos_[var]; }
  int threshold(int var, int k) const { return thr_pos_[var][k]; }
  int sigma(int i, int j) const { return sigma_pos_(std::max(i, j), std::min(i, j)); }

  bool operator==(const StatOrder& other) const;

 private:
  std::vector<StatId> entries_;
  std::vector<int> mean_pos_;
  std::vector<std::vector<int>> thr_pos_;
  Eigen::MatrixXi sigma_pos_;
};

}  // namespace pivsem

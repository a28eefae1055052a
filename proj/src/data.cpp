#include "pivsem/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace pivsem {

VariableMeta ordinal_meta_from_column(const std::string& name, Eigen::Ref<Vector> column) {
  std::set<int> codes;
  for (Eigen::Index i = 0; i < column.size(); ++i) {
    const double v = column[i];
    if (!(v == std::floor(v)) || v < 0.0)
      throw InputError("ordinal variable '" + name + "' has a non-integer or negative code: " +
                       std::to_string(v));
    codes.insert(static_cast<int>(v));
  }
  if (codes.size() < 2)
    throw InputError("ordinal variable '" + name + "' has fewer than 2 observed categories");
  VariableMeta meta{name, VarKind::Ordinal, std::vector<int>(codes.begin(), codes.end())};
  const bool contiguous = meta.categories.front() == 0 &&
                          meta.categories.back() == meta.n_categories() - 1;
  if (!contiguous) {
    for (Eigen::Index i = 0; i < column.size(); ++i) {
      const int code = static_cast<int>(column[i]);
      const auto it = std::lower_bound(meta.categories.begin(), meta.categories.end(), code);
      column[i] = static_cast<double>(it - meta.categories.begin());
    }
  }
  return meta;
}

StatOrder::StatOrder(int p, const std::vector<int>& n_thresholds)
    : mean_pos_(p, -1), thr_pos_(p), sigma_pos_(Eigen::MatrixXi::Constant(p, p, -1)) {
  for (int j = 0; j < p; ++j) thr_pos_[j].assign(std::max(0, n_thresholds[j]), -1);
}

int StatOrder::add(const StatId& id) {
  const int pos = static_cast<int>(entries_.size());
  entries_.push_back(id);
  switch (id.kind) {
    case StatKind::Mean:
      mean_pos_[id.i] = pos;
      break;
    case StatKind::Threshold:
      thr_pos_[id.i][id.j] = pos;
      break;
    case StatKind::Sigma:
      sigma_pos_(std::max(id.i, id.j), std::min(id.i, id.j)) = pos;
      break;
  }
  return pos;
}

bool StatOrder::operator==(const StatOrder& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t k = 0; k < entries_.size(); ++k) {
    const StatId& a = entries_[k];
    const StatId& b = other.entries_[k];
    if (a.kind != b.kind || a.i != b.i || a.j != b.j) return false;
  }
  return true;
}

}  // namespace pivsem

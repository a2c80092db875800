#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mddl/core.hpp"

namespace mddl {

/// Per-feed-position exposure probability and click-through rate.
/// Index 0 holds global position j = 1.
struct PositionTable {
  std::vector<double> exposure;
  std::vector<double> ctr;

  std::size_t positions() const { return exposure.size(); }

  void validate() const {
    if (exposure.size() != ctr.size())
      throw ConfigError("position table: exposure and ctr lengths differ");
    for (std::size_t i = 0; i < exposure.size(); ++i) {
      if (!(exposure[i] >= 0.0 && exposure[i] <= 1.0) || !(ctr[i] >= 0.0 && ctr[i] <= 1.0))
        throw ConfigError("position table: entry " + std::to_string(i + 1) + " outside [0, 1]");
      if (i > 0 && exposure[i] > exposure[i - 1])
        throw ConfigError("position table: exposure increases at position " + std::to_string(i + 1));
    }
  }

  friend bool operator==(const PositionTable&, const PositionTable&) = default;
};

/// Weighted exposure ratio of a screen's action: the exposure- and
/// CTR-weighted count of video slots at positions j = t*K + k.
inline double wer(const Action& action, int t, const PositionTable& table) {
  const int slots = action.slots();
  if (t < 0) throw RangeError("negative screen index");
  const std::size_t last = static_cast<std::size_t>(t) * slots + slots;
  if (last > table.positions())
    throw RangeError("position table covers " + std::to_string(table.positions()) +
                     " positions, screen " + std::to_string(t) + " needs " + std::to_string(last));
  double sum = 0.0;
  for (int k = 1; k <= slots; ++k) {
    if (!action.video_at(k)) continue;
    const std::size_t j = static_cast<std::size_t>(t) * slots + k;  // 1-based
    sum += table.exposure[j - 1] * table.ctr[j - 1];
  }
  return sum;
}

/// Softmax(beta * q)-weighted mean of wers, computed with the max shift.
inline double soft_expected_wer(std::span<const double> qvalues, std::span<const double> wers,
                                double beta) {
  if (qvalues.size() != wers.size())
    throw UsageError("soft_expected_wer: " + std::to_string(qvalues.size()) + " q-values vs " +
                     std::to_string(wers.size()) + " WER values");
  if (qvalues.empty()) throw UsageError("soft_expected_wer: empty action set");
  if (!std::isfinite(beta)) throw UsageError("soft_expected_wer: beta must be finite");
  double top = -INFINITY;
  for (double q : qvalues) top = std::max(top, beta * q);
  double z = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < qvalues.size(); ++i) {
    const double w = std::exp(beta * qvalues[i] - top);
    z += w;
    acc += w * wers[i];
  }
  return acc / z;
}

/// WER of every action at every screen: row t, column action index.
class WerTable {
 public:
  WerTable(const PositionTable& table, int slots, int screens)
      : slots_(slots), screens_(screens), values_(static_cast<std::size_t>(screens) << slots) {
    const int n = action_count(slots);
    for (int t = 0; t < screens; ++t)
      for (int a = 0; a < n; ++a)
        values_[static_cast<std::size_t>(t) * n + a] = wer(Action::from_index(a, slots), t, table);
  }

  int slots() const { return slots_; }
  int screens() const { return screens_; }
  int actions() const { return action_count(slots_); }

  std::span<const double> row(int t) const {
    if (t < 0 || t >= screens_) throw RangeError("WER table has no screen " + std::to_string(t));
    return {values_.data() + static_cast<std::size_t>(t) * actions(),
            static_cast<std::size_t>(actions())};
  }

  double at(int t, int action_index) const { return row(t)[static_cast<std::size_t>(action_index)]; }

 private:
  int slots_;
  int screens_;
  std::vector<double> values_;
};

}  // namespace mddl

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace mddl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid action vector or index.
class CodingError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset, model or log file.
class LoadError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kMaxSlots = 16;

inline int action_count(int slots) { return 1 << slots; }

/// Maps a slot assignment (slot k -> bit k-1, little-endian) to its index.
inline int encode_action(std::span<const int> bits, int slots) {
  if (slots < 1 || slots > kMaxSlots)
    throw CodingError("slot count " + std::to_string(slots) + " outside [1, 16]");
  if (static_cast<int>(bits.size()) != slots)
    throw CodingError("action has " + std::to_string(bits.size()) + " slots, expected " +
                      std::to_string(slots));
  int index = 0;
  for (int k = 0; k < slots; ++k) {
    if (bits[k] != 0 && bits[k] != 1)
      throw CodingError("action slot " + std::to_string(k + 1) + " is not binary");
    index |= bits[k] << k;
  }
  return index;
}

inline std::vector<int> decode_action(std::int64_t index, int slots) {
  if (slots < 1 || slots > kMaxSlots)
    throw CodingError("slot count " + std::to_string(slots) + " outside [1, 16]");
  if (index < 0 || index >= action_count(slots))
    throw CodingError("action index " + std::to_string(index) + " outside [0, " +
                      std::to_string(action_count(slots)) + ")");
  std::vector<int> bits(static_cast<std::size_t>(slots));
  for (int k = 0; k < slots; ++k) bits[k] = static_cast<int>((index >> k) & 1);
  return bits;
}

/// A screen's slot assignment: 1 = video, 0 = graphic-text.
class Action {
 public:
  Action(std::vector<int> bits) : bits_(std::move(bits)) {
    index_ = encode_action(bits_, static_cast<int>(bits_.size()));
  }

  static Action from_index(int index, int slots) { return Action(decode_action(index, slots)); }

  int index() const { return index_; }
  int slots() const { return static_cast<int>(bits_.size()); }
  std::span<const int> bits() const { return bits_; }
  /// Slot k is 1-based.
  bool video_at(int k) const { return bits_.at(static_cast<std::size_t>(k - 1)) == 1; }

  int video_count() const {
    int n = 0;
    for (int b : bits_) n += b;
    return n;
  }

  friend bool operator==(const Action&, const Action&) = default;

 private:
  std::vector<int> bits_;
  int index_ = 0;
};

struct StateVec {
  std::vector<double> features;
  int t = 0;  // screen index, 0-based

  friend bool operator==(const StateVec&, const StateVec&) = default;
};

enum class Source { strategy, random };

inline std::string_view to_string(Source s) {
  return s == Source::strategy ? "strategy" : "random";
}

inline std::optional<Source> parse_source(std::string_view s) {
  if (s == "strategy") return Source::strategy;
  if (s == "random") return Source::random;
  return std::nullopt;
}

struct Transition {
  std::int64_t episode_id = 0;
  int t = 0;
  StateVec state;
  int action_index = 0;
  double reward = 0.0;
  std::optional<StateVec> next_state;
  bool terminal = true;
  Source source = Source::random;
  std::optional<double> realized_return;

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct DatasetMeta {
  int version = 1;
  int feature_dim = 0;
  int slots = 0;
  std::uint64_t seed = 0;
  std::string env_hash;
  std::string policy_id;
  // Left empty by the tools so that output files stay byte-reproducible.
  std::string created;

  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Transition> transitions;

  std::size_t size() const { return transitions.size(); }
  bool empty() const { return transitions.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Checks one transition against the record invariants. Returns an empty
// string when valid, else a description of the first violation.
inline std::string transition_problem(const Transition& tr, int feature_dim, int slots) {
  if (tr.terminal != !tr.next_state.has_value())
    return "terminal flag disagrees with next_state presence";
  if (!(tr.reward >= 0.0) || !std::isfinite(tr.reward)) return "reward must be finite and >= 0";
  if (tr.action_index < 0 || tr.action_index >= action_count(slots))
    return "action_index out of range";
  if (tr.state.t != tr.t) return "state screen index disagrees with t";
  if (static_cast<int>(tr.state.features.size()) != feature_dim)
    return "state dimension " + std::to_string(tr.state.features.size()) + " != " +
           std::to_string(feature_dim);
  for (double f : tr.state.features)
    if (!std::isfinite(f)) return "non-finite state feature";
  if (tr.next_state) {
    if (static_cast<int>(tr.next_state->features.size()) != feature_dim)
      return "next_state dimension " + std::to_string(tr.next_state->features.size()) +
             " != " + std::to_string(feature_dim);
    for (double f : tr.next_state->features)
      if (!std::isfinite(f)) return "non-finite next_state feature";
  }
  if (tr.realized_return && !std::isfinite(*tr.realized_return)) return "non-finite realized_return";
  return {};
}

// Tracks episode contiguity while scanning transitions in order.
class EpisodeOrderChecker {
 public:
  std::string feed(const Transition& tr) {
    if (started_ && tr.episode_id == current_) {
      if (tr.t != last_t_ + 1) return "episode " + std::to_string(tr.episode_id) + " not ordered by t";
    } else {
      if (!seen_.insert(tr.episode_id).second)
        return "episode " + std::to_string(tr.episode_id) + " is not contiguous";
      if (tr.t != 0) return "episode " + std::to_string(tr.episode_id) + " does not start at t=0";
      current_ = tr.episode_id;
      started_ = true;
    }
    last_t_ = tr.t;
    return {};
  }

 private:
  std::unordered_set<std::int64_t> seen_;
  std::int64_t current_ = 0;
  int last_t_ = 0;
  bool started_ = false;
};

inline void validate_dataset(const Dataset& ds) {
  EpisodeOrderChecker order;
  for (std::size_t i = 0; i < ds.transitions.size(); ++i) {
    const auto& tr = ds.transitions[i];
    auto problem = transition_problem(tr, ds.meta.feature_dim, ds.meta.slots);
    if (problem.empty()) problem = order.feed(tr);
    if (!problem.empty())
      throw UsageError("transition " + std::to_string(i) + ": " + problem);
  }
}

/// Concatenates two datasets whose episode ids are disjoint.
inline Dataset merge_datasets(const Dataset& a, const Dataset& b) {
  if (a.meta.feature_dim != b.meta.feature_dim || a.meta.slots != b.meta.slots)
    throw UsageError("cannot merge datasets with different feature dimension or slot count");
  std::unordered_set<std::int64_t> ids;
  for (const auto& tr : a.transitions) ids.insert(tr.episode_id);
  for (const auto& tr : b.transitions)
    if (ids.contains(tr.episode_id))
      throw UsageError("episode id " + std::to_string(tr.episode_id) + " present in both datasets");
  Dataset out;
  out.meta = a.meta;
  if (a.meta.policy_id != b.meta.policy_id)
    out.meta.policy_id = a.meta.policy_id + "+" + b.meta.policy_id;
  out.transitions.reserve(a.size() + b.size());
  out.transitions.insert(out.transitions.end(), a.transitions.begin(), a.transitions.end());
  out.transitions.insert(out.transitions.end(), b.transitions.begin(), b.transitions.end());
  return out;
}

}  // namespace mddl

#pragma once

// Environment, position-table and training configuration, plus the JSON
// config file that carries all three:
//
//   { "env": {...}, "position_table": {...}, "train": {...} }
//
// Every section and key is optional; missing keys take the defaults below.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mddl/core.hpp"
#include "mddl/text.hpp"
#include "mddl/wer.hpp"

namespace mddl {

struct Archetype {
  double probability = 1.0;
  double video_affinity = 0.5;

  friend bool operator==(const Archetype&, const Archetype&) = default;
};

enum class RewardMode { expected, sampled };

struct PoolConfig {
  int n_video = 30;
  int n_text = 60;
  double quality_lo = 0.5;
  double quality_hi = 1.0;
  double price_lo = 10.0;
  double price_hi = 50.0;

  friend bool operator==(const PoolConfig&, const PoolConfig&) = default;
};

struct EnvConfig {
  int slots = 5;
  int max_screens = 6;
  std::vector<Archetype> archetypes{{0.3, 0.1}, {0.4, 0.5}, {0.3, 0.9}};
  double position_decay = 0.85;
  double base_ctr = 0.12;
  double buy_coeff = 0.3;
  double continue_base = 0.85;
  double fatigue_weight = 0.5;
  PoolConfig pools;
  RewardMode reward_mode = RewardMode::expected;
  std::uint64_t seed = 0;
  // Allowed action indices; empty means all 2^K actions.
  std::vector<int> action_mask;

  int feature_dim() const { return static_cast<int>(archetypes.size()) + 6; }
  int actions() const { return action_count(slots); }

  bool action_allowed(int a) const {
    if (a < 0 || a >= actions()) return false;
    if (action_mask.empty()) return true;
    for (int m : action_mask)
      if (m == a) return true;
    return false;
  }

  std::vector<int> valid_actions() const {
    std::vector<int> out;
    for (int a = 0; a < actions(); ++a)
      if (action_allowed(a)) out.push_back(a);
    return out;
  }

  void validate() const {
    auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
    auto open_unit = [](double x) { return x > 0.0 && x <= 1.0; };
    if (slots < 1 || slots > kMaxSlots) throw ConfigError("env.K must be in [1, 16]");
    if (max_screens < 1) throw ConfigError("env.T_max must be >= 1");
    if (archetypes.empty()) throw ConfigError("env.archetypes is empty");
    double total = 0.0;
    for (const auto& a : archetypes) {
      if (!unit(a.probability) || !unit(a.video_affinity))
        throw ConfigError("env.archetypes: probability and video_affinity must lie in [0, 1]");
      total += a.probability;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("env.archetypes: probabilities must sum to 1");
    if (!open_unit(position_decay)) throw ConfigError("env.position_decay must lie in (0, 1]");
    if (!open_unit(continue_base)) throw ConfigError("env.continue_base must lie in (0, 1]");
    if (!open_unit(base_ctr)) throw ConfigError("env.base_ctr must lie in (0, 1]");
    if (!unit(buy_coeff)) throw ConfigError("env.buy_coeff must lie in [0, 1]");
    if (!(fatigue_weight >= 0.0 && std::isfinite(fatigue_weight)))
      throw ConfigError("env.fatigue_weight must be finite and >= 0");
    // Largest click probability is c0 * 1.5 * q_max; it must remain a probability.
    if (base_ctr * 1.5 * pools.quality_hi > 1.0 || buy_coeff * pools.quality_hi > 1.0)
      throw ConfigError("env: click or purchase probability exceeds 1");
    if (pools.n_video < 1 || pools.n_text < 1) throw ConfigError("env.pools: both channel pools must be non-empty");
    if (pools.n_video + pools.n_text < slots * max_screens)
      throw ConfigError("env.pools: fewer items than K * T_max slots");
    if (!(pools.quality_lo > 0.0 && pools.quality_lo <= pools.quality_hi && pools.quality_hi <= 1.0))
      throw ConfigError("env.pools.quality_range must be a nonempty subrange of (0, 1]");
    if (!(pools.price_lo >= 0.0 && pools.price_lo <= pools.price_hi && std::isfinite(pools.price_hi)))
      throw ConfigError("env.pools.price_range must be nonempty and nonnegative");
    for (int a : action_mask)
      if (a < 0 || a >= actions()) throw ConfigError("env.action_mask holds an out-of-range index");
    if (!action_mask.empty() && valid_actions().empty()) throw ConfigError("env.action_mask is empty");
  }

  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

// How a training batch is routed to the two losses.
enum class LossRouting {
  gated,   // strategy samples -> imitation loss, random samples -> Bellman loss
  rl_all,  // Bellman loss on every sample regardless of source
};

enum class BatchSampler {
  uniform,     // uniform over the concatenated datasets
  stratified,  // fixed strategy share per batch
};

struct TrainConfig {
  double alpha1 = 1.0;  // Bellman-loss weight
  double alpha2 = 1.0;  // imitation-loss weight
  double beta = 10.0;   // soft-argmax temperature
  double gamma = 0.9;
  double lr = 1e-3;
  // Rewards enter the Bellman targets multiplied by this. 0 means one over
  // the per-screen reward bound, so beta acts on Q gaps well below 1.
  double reward_scale = 0.0;
  int batch_size = 256;
  int steps = 20000;
  int target_sync_period = 500;
  std::uint64_t seed = 0;
  std::vector<int> hidden{64, 64};
  LossRouting routing = LossRouting::gated;
  BatchSampler sampler = BatchSampler::uniform;
  double strategy_share = 0.5;  // stratified sampler only

  void validate() const {
    if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0)) throw ConfigError("train: alpha1 and alpha2 must be >= 0");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("train: beta must be finite and >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("train: gamma must lie in [0, 1]");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (!(reward_scale >= 0.0) || !std::isfinite(reward_scale))
      throw ConfigError("train: reward_scale must be finite and >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (target_sync_period < 1) throw ConfigError("train: target_sync_period must be >= 1");
    for (int h : hidden)
      if (h < 1) throw ConfigError("train: hidden layer sizes must be positive");
    if (!(strategy_share >= 0.0 && strategy_share <= 1.0))
      throw ConfigError("train: strategy_share must lie in [0, 1]");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Exposure p_j = decay^(j-1) and a constant position CTR equal to the
/// population-average video click rate c0 * (0.5 + mean affinity).
inline PositionTable default_position_table(const EnvConfig& env) {
  double mean_affinity = 0.0;
  for (const auto& a : env.archetypes) mean_affinity += a.probability * a.video_affinity;
  const int n = env.slots * env.max_screens;
  PositionTable table;
  table.exposure.resize(static_cast<std::size_t>(n));
  table.ctr.assign(static_cast<std::size_t>(n), env.base_ctr * (0.5 + mean_affinity));
  for (int j = 1; j <= n; ++j) table.exposure[j - 1] = std::pow(env.position_decay, j - 1);
  return table;
}

// ---------------------------------------------------------------------------
// JSON mapping

inline nlohmann::json to_json(const EnvConfig& c) {
  nlohmann::json j;
  j["K"] = c.slots;
  j["T_max"] = c.max_screens;
  j["archetypes"] = nlohmann::json::array();
  for (const auto& a : c.archetypes)
    j["archetypes"].push_back({{"probability", a.probability}, {"video_affinity", a.video_affinity}});
  j["position_decay"] = c.position_decay;
  j["base_ctr"] = c.base_ctr;
  j["buy_coeff"] = c.buy_coeff;
  j["continue_base"] = c.continue_base;
  j["fatigue_weight"] = c.fatigue_weight;
  j["pools"] = {{"n_video", c.pools.n_video},
                {"n_text", c.pools.n_text},
                {"quality_range", {c.pools.quality_lo, c.pools.quality_hi}},
                {"price_range", {c.pools.price_lo, c.pools.price_hi}}};
  j["reward_mode"] = c.reward_mode == RewardMode::expected ? "expected" : "sampled";
  j["seed"] = c.seed;
  j["action_mask"] = c.action_mask;
  return j;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["alpha1"] = c.alpha1;
  j["alpha2"] = c.alpha2;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["lr"] = c.lr;
  j["reward_scale"] = c.reward_scale;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["target_sync_period"] = c.target_sync_period;
  j["seed"] = c.seed;
  j["hidden"] = c.hidden;
  j["routing"] = c.routing == LossRouting::gated ? "gated" : "rl_all";
  j["sampler"] = c.sampler == BatchSampler::uniform ? "uniform" : "stratified";
  j["strategy_share"] = c.strategy_share;
  return j;
}

inline nlohmann::json to_json(const PositionTable& t) {
  return {{"exposure", t.exposure}, {"ctr", t.ctr}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("unknown key '" + section + "." + it.key() + "'");
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const std::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

inline std::pair<double, double> read_range(const nlohmann::json& j, const std::string& name) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError(name + " must be a two-element numeric array");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace detail

inline EnvConfig env_config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  detail::reject_unknown(j, {"K", "T_max", "archetypes", "position_decay", "base_ctr", "buy_coeff",
                             "continue_base", "fatigue_weight", "pools", "reward_mode", "seed",
                             "action_mask"},
                         "env");
  EnvConfig c;
  read_opt(j, "K", c.slots, "env");
  read_opt(j, "T_max", c.max_screens, "env");
  if (j.contains("archetypes")) {
    c.archetypes.clear();
    for (const auto& a : j["archetypes"]) {
      detail::reject_unknown(a, {"probability", "video_affinity"}, "env.archetypes[]");
      Archetype arch;
      read_opt(a, "probability", arch.probability, "env.archetypes[]");
      read_opt(a, "video_affinity", arch.video_affinity, "env.archetypes[]");
      c.archetypes.push_back(arch);
    }
  }
  read_opt(j, "position_decay", c.position_decay, "env");
  read_opt(j, "base_ctr", c.base_ctr, "env");
  read_opt(j, "buy_coeff", c.buy_coeff, "env");
  read_opt(j, "continue_base", c.continue_base, "env");
  read_opt(j, "fatigue_weight", c.fatigue_weight, "env");
  if (j.contains("pools")) {
    const auto& p = j["pools"];
    detail::reject_unknown(p, {"n_video", "n_text", "quality_range", "price_range"}, "env.pools");
    read_opt(p, "n_video", c.pools.n_video, "env.pools");
    read_opt(p, "n_text", c.pools.n_text, "env.pools");
    if (p.contains("quality_range"))
      std::tie(c.pools.quality_lo, c.pools.quality_hi) = detail::read_range(p["quality_range"], "env.pools.quality_range");
    if (p.contains("price_range"))
      std::tie(c.pools.price_lo, c.pools.price_hi) = detail::read_range(p["price_range"], "env.pools.price_range");
  }
  if (j.contains("reward_mode")) {
    const auto mode = j["reward_mode"].get<std::string>();
    if (mode == "expected") c.reward_mode = RewardMode::expected;
    else if (mode == "sampled") c.reward_mode = RewardMode::sampled;
    else throw ConfigError("env.reward_mode must be 'expected' or 'sampled'");
  }
  read_opt(j, "seed", c.seed, "env");
  read_opt(j, "action_mask", c.action_mask, "env");
  c.validate();
  return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  detail::reject_unknown(j, {"alpha1", "alpha2", "beta", "gamma", "lr", "reward_scale", "batch_size", "steps",
                             "target_sync_period", "seed", "hidden", "routing", "sampler",
                             "strategy_share"},
                         "train");
  TrainConfig c;
  read_opt(j, "alpha1", c.alpha1, "train");
  read_opt(j, "alpha2", c.alpha2, "train");
  read_opt(j, "beta", c.beta, "train");
  read_opt(j, "gamma", c.gamma, "train");
  read_opt(j, "lr", c.lr, "train");
  read_opt(j, "reward_scale", c.reward_scale, "train");
  read_opt(j, "batch_size", c.batch_size, "train");
  read_opt(j, "steps", c.steps, "train");
  read_opt(j, "target_sync_period", c.target_sync_period, "train");
  read_opt(j, "seed", c.seed, "train");
  read_opt(j, "hidden", c.hidden, "train");
  if (j.contains("routing")) {
    const auto r = j["routing"].get<std::string>();
    if (r == "gated") c.routing = LossRouting::gated;
    else if (r == "rl_all") c.routing = LossRouting::rl_all;
    else throw ConfigError("train.routing must be 'gated' or 'rl_all'");
  }
  if (j.contains("sampler")) {
    const auto s = j["sampler"].get<std::string>();
    if (s == "uniform") c.sampler = BatchSampler::uniform;
    else if (s == "stratified") c.sampler = BatchSampler::stratified;
    else throw ConfigError("train.sampler must be 'uniform' or 'stratified'");
  }
  read_opt(j, "strategy_share", c.strategy_share, "train");
  c.validate();
  return c;
}

inline PositionTable position_table_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"exposure", "ctr"}, "position_table");
  PositionTable t;
  try {
    t.exposure = j.at("exposure").get<std::vector<double>>();
    t.ctr = j.at("ctr").get<std::vector<double>>();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("position_table: ") + e.what());
  }
  t.validate();
  return t;
}

/// Content hash of the fully-resolved environment (defaults included).
inline std::string env_hash(const EnvConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }
inline std::string train_hash(const TrainConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

struct ConfigBundle {
  EnvConfig env;
  PositionTable table;
  TrainConfig train;
};

inline ConfigBundle config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"env", "position_table", "train"}, "config");
  ConfigBundle b;
  b.env = env_config_from_json(j.value("env", nlohmann::json::object()));
  b.train = train_config_from_json(j.value("train", nlohmann::json::object()));
  b.table = j.contains("position_table") ? position_table_from_json(j["position_table"])
                                         : default_position_table(b.env);
  if (b.table.positions() < static_cast<std::size_t>(b.env.slots * b.env.max_screens))
    throw ConfigError("position_table shorter than K * T_max");
  return b;
}

inline ConfigBundle load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline ConfigBundle default_config() { return config_from_json(nlohmann::json::object()); }

}  // namespace mddl

#pragma once

// Synthetic two-channel feed. One step fills the K slots of a screen; the
// user then either pulls down to the next screen or leaves.
//
// Per-slot expected GMV at global position j = t*K + k:
//   rho^(j-1) * ctr_channel(u) * q * buy_coeff * q * price
// with ctr_video(u) = c0 * (0.5 + v_u) and ctr_text(u) = c0 * (1.5 - v_u).
// Continuation probability: clamp(sigma0 * (1 - lambda * |videoFrac - v_u|), 0, 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "mddl/config.hpp"
#include "mddl/core.hpp"
#include "mddl/rng.hpp"

namespace mddl {

struct Item {
  double quality = 0.0;
  double price = 0.0;

  friend bool operator==(const Item&, const Item&) = default;
};

/// Per-slot exposure and click indicators of one displayed screen.
struct ScreenLog {
  std::int64_t episode_id = 0;
  int t = 0;
  std::vector<std::uint8_t> exposed;
  std::vector<std::uint8_t> clicked;

  friend bool operator==(const ScreenLog&, const ScreenLog&) = default;
};

struct EpisodeState {
  std::int64_t episode_id = 0;
  int archetype = 0;
  int t = 0;
  // Remaining items, sorted by ascending quality so the best is at the back.
  std::vector<Item> videos;
  std::vector<Item> texts;
  int videos_shown = 0;
  bool alive = true;
  bool pool_exhausted = false;  // a slot fell back to the other channel
  Rng continuation_rng{0};
  Rng event_rng{0};

  friend bool operator==(const EpisodeState&, const EpisodeState&) = default;
};

struct StepResult {
  double reward = 0.0;
  std::optional<StateVec> next;  // empty when the episode terminated
  ScreenLog log;
  int videos_filled = 0;
};

class FeedSim {
 public:
  explicit FeedSim(EnvConfig config) : config_(std::move(config)) { config_.validate(); }

  const EnvConfig& config() const { return config_; }
  int feature_dim() const { return config_.feature_dim(); }

  double exposure(int position) const { return std::pow(config_.position_decay, position - 1); }

  double video_ctr(int archetype) const {
    return config_.base_ctr * (0.5 + config_.archetypes[archetype].video_affinity);
  }
  double text_ctr(int archetype) const {
    return config_.base_ctr * (1.5 - config_.archetypes[archetype].video_affinity);
  }

  double continuation_probability(int archetype, int videos_in_action) const {
    const double frac = static_cast<double>(videos_in_action) / config_.slots;
    const double v = config_.archetypes[archetype].video_affinity;
    return std::clamp(config_.continue_base * (1.0 - config_.fatigue_weight * std::abs(frac - v)), 0.0, 1.0);
  }

  /// Starts an episode. The episode is a pure function of (config, episode_seed).
  std::pair<EpisodeState, StateVec> reset(std::uint64_t episode_seed, std::int64_t episode_id = 0) const {
    EpisodeState st;
    st.episode_id = episode_id;
    Rng init(derive_seed(episode_seed, {1}));
    st.continuation_rng = Rng(derive_seed(episode_seed, {2}));
    st.event_rng = Rng(derive_seed(episode_seed, {3}));

    const double u = init.uniform();
    double acc = 0.0;
    st.archetype = static_cast<int>(config_.archetypes.size()) - 1;
    for (std::size_t i = 0; i < config_.archetypes.size(); ++i) {
      acc += config_.archetypes[i].probability;
      if (u < acc) {
        st.archetype = static_cast<int>(i);
        break;
      }
    }
    auto draw_pool = [&](int n) {
      std::vector<Item> pool(static_cast<std::size_t>(n));
      for (auto& item : pool) {
        item.quality = init.uniform(config_.pools.quality_lo, config_.pools.quality_hi);
        item.price = init.uniform(config_.pools.price_lo, config_.pools.price_hi);
      }
      std::stable_sort(pool.begin(), pool.end(),
                       [](const Item& a, const Item& b) { return a.quality < b.quality; });
      return pool;
    };
    st.videos = draw_pool(config_.pools.n_video);
    st.texts = draw_pool(config_.pools.n_text);
    StateVec s = observe(st);
    return {std::move(st), std::move(s)};
  }

  StateVec observe(const EpisodeState& st) const {
    const int k = config_.slots;
    auto top_mean = [k](const std::vector<Item>& pool) {
      const int n = std::min<int>(k, static_cast<int>(pool.size()));
      if (n == 0) return 0.0;
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += pool[pool.size() - 1 - i].quality;
      return s / n;
    };
    StateVec s;
    s.t = st.t;
    s.features.assign(config_.archetypes.size(), 0.0);
    s.features[static_cast<std::size_t>(st.archetype)] = 1.0;
    s.features.push_back(static_cast<double>(st.t) / config_.max_screens);
    s.features.push_back(static_cast<double>(st.videos_shown) / (k * config_.max_screens));
    s.features.push_back(top_mean(st.videos));
    s.features.push_back(top_mean(st.texts));
    s.features.push_back(static_cast<double>(st.videos.size()) / config_.pools.n_video);
    s.features.push_back(static_cast<double>(st.texts.size()) / config_.pools.n_text);
    return s;
  }

  StepResult step(EpisodeState& st, const Action& action) const {
    if (!st.alive) throw UsageError("env step after episode termination");
    if (action.slots() != config_.slots)
      throw UsageError("action has " + std::to_string(action.slots()) + " slots, env has " +
                       std::to_string(config_.slots));
    StepResult out;
    out.log.episode_id = st.episode_id;
    out.log.t = st.t;
    out.log.exposed.assign(static_cast<std::size_t>(config_.slots), 0);
    out.log.clicked.assign(static_cast<std::size_t>(config_.slots), 0);
    double expected = 0.0, sampled = 0.0;
    for (int k = 1; k <= config_.slots; ++k) {
      bool video = action.video_at(k);
      if ((video ? st.videos : st.texts).empty()) {
        video = !video;
        st.pool_exhausted = true;
      }
      auto& pool = video ? st.videos : st.texts;
      const Item item = pool.back();
      pool.pop_back();
      if (video) {
        ++st.videos_shown;
        ++out.videos_filled;
      }
      const int j = st.t * config_.slots + k;
      const double p = exposure(j);
      const double click = (video ? video_ctr(st.archetype) : text_ctr(st.archetype)) * item.quality;
      const double buy = config_.buy_coeff * item.quality;
      expected += p * click * buy * item.price;
      // Three draws per slot regardless of outcome keep the stream aligned across policies.
      const double u_exp = st.event_rng.uniform();
      const double u_click = st.event_rng.uniform();
      const double u_buy = st.event_rng.uniform();
      const bool exposed = u_exp < p;
      const bool clicked = exposed && u_click < click;
      const bool bought = clicked && u_buy < buy;
      out.log.exposed[k - 1] = exposed;
      out.log.clicked[k - 1] = clicked;
      if (bought) sampled += item.price;
    }
    out.reward = config_.reward_mode == RewardMode::expected ? expected : sampled;

    const double cont = continuation_probability(st.archetype, action.video_count());
    const bool leaves = !(st.continuation_rng.uniform() < cont);
    if (leaves || st.t + 1 >= config_.max_screens) {
      st.alive = false;
    } else {
      ++st.t;
      out.next = observe(st);
    }
    return out;
  }

  /// Upper bound on any single slot's expected GMV.
  double max_slot_gmv() const {
    double best_ctr = 0.0;
    for (std::size_t a = 0; a < config_.archetypes.size(); ++a)
      best_ctr = std::max({best_ctr, video_ctr(static_cast<int>(a)), text_ctr(static_cast<int>(a))});
    const double q = config_.pools.quality_hi;
    return best_ctr * q * config_.buy_coeff * q * config_.pools.price_hi;
  }

 private:
  EnvConfig config_;
};

/// Chooses an action index for a state; the Rng is the episode's policy stream.
using Policy = std::function<int(const StateVec&, Rng&)>;

struct RolloutResult {
  Dataset dataset;
  std::vector<ScreenLog> click_log;
  double mean_return = 0.0;
  int fallback_episodes = 0;
};

inline std::uint64_t episode_seed(std::uint64_t seed, std::int64_t episode_id) {
  return derive_seed(seed, {static_cast<std::uint64_t>(episode_id), 0x5eed});
}

/// Runs `episodes` episodes with ids first_id, first_id+1, ...; each episode's
/// randomness derives from (seed, episode_id) only.
inline RolloutResult rollout(const FeedSim& sim, const Policy& policy, int episodes, double gamma,
                             std::uint64_t seed, Source source = Source::random,
                             std::int64_t first_id = 0) {
  if (episodes < 1) throw UsageError("rollout needs at least one episode");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("rollout: gamma must lie in [0, 1]");
  const auto& cfg = sim.config();
  RolloutResult out;
  out.dataset.meta.feature_dim = cfg.feature_dim();
  out.dataset.meta.slots = cfg.slots;
  out.dataset.meta.seed = seed;
  out.dataset.meta.env_hash = env_hash(cfg);
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const std::int64_t id = first_id + e;
    const std::uint64_t es = episode_seed(seed, id);
    auto [st, s] = sim.reset(es, id);
    Rng policy_rng(derive_seed(es, {4}));
    double ret = 0.0, disc = 1.0;
    while (true) {
      const int a = policy(s, policy_rng);
      if (!cfg.action_allowed(a))
        throw UsageError("policy returned invalid action index " + std::to_string(a));
      auto res = sim.step(st, Action::from_index(a, cfg.slots));
      ret += disc * res.reward;
      disc *= gamma;
      Transition tr;
      tr.episode_id = id;
      tr.t = s.t;
      tr.state = s;
      tr.action_index = a;
      tr.reward = res.reward;
      tr.next_state = res.next;
      tr.terminal = !res.next.has_value();
      tr.source = source;
      out.dataset.transitions.push_back(std::move(tr));
      out.click_log.push_back(std::move(res.log));
      if (!res.next) break;
      s = *res.next;
    }
    if (st.pool_exhausted) ++out.fallback_episodes;
    total += ret;
  }
  out.mean_return = total / episodes;
  return out;
}

}  // namespace mddl

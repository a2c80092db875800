#pragma once

#include <cstdint>
#include <string>

#include "mddl/config.hpp"
#include "mddl/feedsim.hpp"
#include "mddl/qfunc.hpp"
#include "mddl/trainer.hpp"

namespace mddl {

inline Policy uniform_policy(const EnvConfig& env) {
  return [actions = env.valid_actions()](const StateVec&, Rng& rng) {
    return actions[rng.below(actions.size())];
  };
}

/// Greedy over the model's Q-values (lowest index on ties); with
/// probability epsilon a uniformly random valid action instead.
inline Policy epsilon_greedy_policy(const QModel& model, const EnvConfig& env, double epsilon) {
  return [&model, env, epsilon, actions = env.valid_actions()](const StateVec& s, Rng& rng) {
    // Both draws happen every step so the stream does not depend on epsilon.
    const double u = rng.uniform();
    const std::size_t pick = rng.below(actions.size());
    if (u < epsilon) return actions[pick];
    const auto q = q_values(model, s);
    return greedy_action(q, &env);
  };
}

inline Policy greedy_policy(const QModel& model, const EnvConfig& env) {
  return [&model, env](const StateVec& s, Rng&) { return greedy_action(q_values(model, s), &env); };
}

struct Collected {
  Dataset dataset;
  std::vector<ScreenLog> click_log;
};

inline Collected collect_random(const EnvConfig& env, int episodes, std::uint64_t seed,
                                std::int64_t first_id = 0) {
  FeedSim sim(env);
  auto r = rollout(sim, uniform_policy(env), episodes, 1.0, seed, Source::random, first_id);
  r.dataset.meta.policy_id = "random";
  return {std::move(r.dataset), std::move(r.click_log)};
}

inline Collected collect_strategy(const EnvConfig& env, const QModel& base, int episodes, double epsilon,
                                  std::uint64_t seed, std::int64_t first_id = 0) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw UsageError("collect_strategy: epsilon must lie in [0, 1]");
  if (base.input_dim() != env.feature_dim() || base.output_dim() != env.actions())
    throw UsageError("collect_strategy: base model shape does not match the environment");
  FeedSim sim(env);
  auto r = rollout(sim, epsilon_greedy_policy(base, env, epsilon), episodes, 1.0, seed, Source::strategy,
                   first_id);
  r.dataset.meta.policy_id = "model:" + model_hash(base);
  return {std::move(r.dataset), std::move(r.click_log)};
}

/// The logging model: pure Bellman training on random data.
inline QModel train_base_model(const Dataset& d_r, TrainConfig cfg, const TrainingContext& ctx) {
  if (d_r.empty()) throw UsageError("train_base_model: random dataset is empty");
  for (const auto& tr : d_r.transitions)
    if (tr.source != Source::random) throw UsageError("train_base_model: strategy-tagged transition present");
  cfg.alpha1 = 1.0;
  cfg.alpha2 = 0.0;
  cfg.routing = LossRouting::gated;
  QModel model(d_r.meta.feature_dim, cfg.hidden, action_count(d_r.meta.slots), cfg.seed);
  train(model, Dataset{}, d_r, cfg, ctx);
  return model;
}

}  // namespace mddl

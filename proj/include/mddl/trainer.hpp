#pragma once

// Training losses and loop.
//
//   imitation: (WER(a_t) - sum_i softmax(beta * Q(s_t, .))_i * WER(a_i))^2
//   Bellman:   (r_t + gamma * max_a' Q_target(s_{t+1}, a') - Q(s_t, a_t))^2
//
// With gated routing, strategy-source samples only feed the imitation term
// and random-source samples only feed the Bellman term; the step loss is
// alpha1 * mean(Bellman over random samples) + alpha2 * mean(imitation over
// strategy samples).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mddl/config.hpp"
#include "mddl/core.hpp"
#include "mddl/feedsim.hpp"
#include "mddl/qfunc.hpp"
#include "mddl/rng.hpp"
#include "mddl/wer.hpp"

namespace mddl {

/// Column-major copy of a set of transitions, ready for batched evaluation.
struct TransitionBlock {
  Eigen::MatrixXd states;  // D x N
  Eigen::MatrixXd next;    // D x N, zero columns for terminal transitions
  std::vector<int> actions;
  std::vector<int> screens;
  std::vector<double> rewards;
  std::vector<std::uint8_t> terminal;
  std::vector<Source> sources;

  std::size_t size() const { return actions.size(); }
};

inline TransitionBlock make_block(std::span<const Transition> trs) {
  TransitionBlock b;
  if (trs.empty()) return b;
  const auto d = static_cast<Eigen::Index>(trs.front().state.features.size());
  const auto n = static_cast<Eigen::Index>(trs.size());
  b.states.resize(d, n);
  b.next = Eigen::MatrixXd::Zero(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& tr = trs[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(tr.state.features.size()) != d)
      throw UsageError("transition batch has mixed feature dimensions");
    for (Eigen::Index r = 0; r < d; ++r) b.states(r, i) = tr.state.features[r];
    if (tr.next_state) {
      if (static_cast<Eigen::Index>(tr.next_state->features.size()) != d)
        throw UsageError("transition batch has mixed feature dimensions");
      for (Eigen::Index r = 0; r < d; ++r) b.next(r, i) = tr.next_state->features[r];
    }
    b.actions.push_back(tr.action_index);
    b.screens.push_back(tr.t);
    b.rewards.push_back(tr.reward);
    b.terminal.push_back(tr.terminal ? 1 : 0);
    b.sources.push_back(tr.source);
  }
  return b;
}

inline TransitionBlock gather(const TransitionBlock& pool, std::span<const std::size_t> idx) {
  TransitionBlock b;
  const auto n = static_cast<Eigen::Index>(idx.size());
  b.states.resize(pool.states.rows(), n);
  b.next.resize(pool.next.rows(), n);
  b.actions.reserve(idx.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto j = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]);
    b.states.col(i) = pool.states.col(j);
    b.next.col(i) = pool.next.col(j);
    b.actions.push_back(pool.actions[j]);
    b.screens.push_back(pool.screens[j]);
    b.rewards.push_back(pool.rewards[j]);
    b.terminal.push_back(pool.terminal[j]);
    b.sources.push_back(pool.sources[j]);
  }
  return b;
}

inline TransitionBlock concat(const TransitionBlock& a, const TransitionBlock& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.states.rows() != b.states.rows()) throw ConfigError("datasets have different feature dimensions");
  TransitionBlock out;
  out.states.resize(a.states.rows(), a.states.cols() + b.states.cols());
  out.states << a.states, b.states;
  out.next.resize(a.next.rows(), a.next.cols() + b.next.cols());
  out.next << a.next, b.next;
  auto join = [](auto x, const auto& y) {
    x.insert(x.end(), y.begin(), y.end());
    return x;
  };
  out.actions = join(a.actions, b.actions);
  out.screens = join(a.screens, b.screens);
  out.rewards = join(a.rewards, b.rewards);
  out.terminal = join(a.terminal, b.terminal);
  out.sources = join(a.sources, b.sources);
  return out;
}

/// Precomputed WER values plus the valid action set.
struct TrainingContext {
  WerTable wer;
  std::vector<int> actions;

  TrainingContext(const PositionTable& table, int slots, int screens)
      : wer(table, slots, screens) {
    for (int a = 0; a < action_count(slots); ++a) actions.push_back(a);
  }

  // Upper bound on one screen's reward; an unset TrainConfig::reward_scale
  // normalizes rewards by it.
  double reward_unit = 1.0;

  TrainingContext(const PositionTable& table, const EnvConfig& env)
      : wer(table, env.slots, env.max_screens),
        actions(env.valid_actions()),
        reward_unit(env.slots * FeedSim(env).max_slot_gmv()) {}
};

inline double resolved_reward_scale(const TrainConfig& c, const TrainingContext& ctx) {
  if (c.reward_scale > 0.0) return c.reward_scale;
  return ctx.reward_unit > 0.0 ? 1.0 / ctx.reward_unit : 1.0;
}

struct LossWeights {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double beta = 10.0;
  double gamma = 0.9;
  LossRouting routing = LossRouting::gated;
  double reward_scale = 1.0;

  static LossWeights from(const TrainConfig& c, const TrainingContext& ctx) {
    return {c.alpha1, c.alpha2, c.beta, c.gamma, c.routing, resolved_reward_scale(c, ctx)};
  }
};

struct LossBreakdown {
  double rl_loss = 0.0;  // unweighted mean over Bellman-routed samples
  double il_loss = 0.0;  // unweighted mean over imitation-routed samples
  double total = 0.0;    // alpha1 * rl_loss + alpha2 * il_loss
  int rl_count = 0;
  int il_count = 0;
  // d(alpha1 * rl_loss)/dQ and d(alpha2 * il_loss)/dQ, 2^K x B.
  Eigen::MatrixXd upstream_rl;
  Eigen::MatrixXd upstream_il;
};

enum class Route { rl, il };

inline Route route_of(Source s, LossRouting routing) {
  if (routing == LossRouting::rl_all) return Route::rl;
  return s == Source::strategy ? Route::il : Route::rl;
}

/// Bellman targets c*r + gamma * max_a' Q_target(s', a') for the given columns.
inline std::vector<double> bellman_targets(const QModel& model, const TransitionBlock& b,
                                           std::span<const std::size_t> cols, double gamma,
                                           std::span<const int> actions, double reward_scale = 1.0) {
  std::vector<double> y(cols.size());
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    y[i] = reward_scale * b.rewards[cols[i]];
    if (!b.terminal[cols[i]]) live.push_back(i);
  }
  if (live.empty() || gamma == 0.0) return y;
  Eigen::MatrixXd next(b.next.rows(), static_cast<Eigen::Index>(live.size()));
  for (std::size_t i = 0; i < live.size(); ++i)
    next.col(static_cast<Eigen::Index>(i)) = b.next.col(static_cast<Eigen::Index>(cols[live[i]]));
  const Eigen::MatrixXd qn = model.forward(next, /*use_target=*/true);
  for (std::size_t i = 0; i < live.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    double best = qn(actions.front(), c);
    for (int a : actions) best = std::max(best, qn(a, c));
    y[live[i]] += gamma * best;
  }
  return y;
}

/// Evaluates both loss terms and their gradients w.r.t. the Q outputs.
inline LossBreakdown compute_losses(const QModel& model, const TransitionBlock& b, const LossWeights& w,
                                    const TrainingContext& ctx, ForwardCache* cache = nullptr) {
  if (b.size() == 0) throw UsageError("empty batch");
  const auto n = static_cast<Eigen::Index>(b.size());
  const Eigen::MatrixXd q = model.forward(b.states, false, cache);
  LossBreakdown out;
  out.upstream_rl = Eigen::MatrixXd::Zero(q.rows(), n);
  out.upstream_il = Eigen::MatrixXd::Zero(q.rows(), n);

  std::vector<std::size_t> rl_cols, il_cols;
  for (std::size_t i = 0; i < b.size(); ++i)
    (route_of(b.sources[i], w.routing) == Route::rl ? rl_cols : il_cols).push_back(i);
  out.rl_count = static_cast<int>(rl_cols.size());
  out.il_count = static_cast<int>(il_cols.size());

  if (!rl_cols.empty()) {
    const auto y = bellman_targets(model, b, rl_cols, w.gamma, ctx.actions, w.reward_scale);
    const double scale = w.alpha1 / static_cast<double>(rl_cols.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < rl_cols.size(); ++i) {
      const auto c = static_cast<Eigen::Index>(rl_cols[i]);
      const int a = b.actions[rl_cols[i]];
      const double delta = y[i] - q(a, c);
      sum += delta * delta;
      out.upstream_rl(a, c) = -2.0 * delta * scale;
    }
    out.rl_loss = sum / static_cast<double>(rl_cols.size());
  }

  if (!il_cols.empty()) {
    const double scale = w.alpha2 / static_cast<double>(il_cols.size());
    std::vector<double> weights(ctx.actions.size());
    double sum = 0.0;
    for (std::size_t col : il_cols) {
      const auto c = static_cast<Eigen::Index>(col);
      const auto werrow = ctx.wer.row(b.screens[col]);
      double top = -INFINITY;
      for (int a : ctx.actions) top = std::max(top, w.beta * q(a, c));
      double z = 0.0;
      for (std::size_t k = 0; k < ctx.actions.size(); ++k) {
        weights[k] = std::exp(w.beta * q(ctx.actions[k], c) - top);
        z += weights[k];
      }
      double est = 0.0;
      for (std::size_t k = 0; k < ctx.actions.size(); ++k) {
        weights[k] /= z;
        est += weights[k] * werrow[ctx.actions[k]];
      }
      const double diff = werrow[b.actions[col]] - est;
      sum += diff * diff;
      // d est / d q_a = beta * w_a * (WER_a - est)
      const double outer = -2.0 * diff * scale * w.beta;
      for (std::size_t k = 0; k < ctx.actions.size(); ++k) {
        const int a = ctx.actions[k];
        out.upstream_il(a, c) = outer * weights[k] * (werrow[a] - est);
      }
    }
    out.il_loss = sum / static_cast<double>(il_cols.size());
  }
  out.total = w.alpha1 * out.rl_loss + w.alpha2 * out.il_loss;
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  ParamSet gradients;
};

/// Imitation loss on strategy-source transitions.
inline LossAndGrad il_loss(const QModel& model, std::span<const Transition> batch, const TrainingContext& ctx,
                           double beta) {
  for (const auto& tr : batch)
    if (tr.source != Source::strategy) throw UsageError("il_loss: batch holds a random-source transition");
  ForwardCache cache;
  const auto parts = compute_losses(model, make_block(batch), {0.0, 1.0, beta, 0.0, LossRouting::gated}, ctx, &cache);
  return {parts.il_loss, model.backward(cache, parts.upstream_il)};
}

/// Bellman loss on random-source transitions; the target network is frozen.
inline LossAndGrad rl_loss(const QModel& model, std::span<const Transition> batch, const TrainingContext& ctx,
                           double gamma, double reward_scale = 1.0) {
  for (const auto& tr : batch)
    if (tr.source != Source::random) throw UsageError("rl_loss: batch holds a strategy-source transition");
  ForwardCache cache;
  const auto parts = compute_losses(model, make_block(batch), {1.0, 0.0, 0.0, gamma, LossRouting::gated, reward_scale}, ctx, &cache);
  return {parts.rl_loss, model.backward(cache, parts.upstream_rl)};
}

/// One optimizer step on a mixed batch. Syncs the target network every
/// target_sync_period optimizer steps.
inline LossBreakdown combined_step(QModel& model, const TransitionBlock& batch, const TrainConfig& cfg,
                                   const TrainingContext& ctx) {
  if (batch.size() == 0) throw UsageError("combined_step: empty batch");
  const auto weights = LossWeights::from(cfg, ctx);
  if (model.step_count() == 0) model.set_value_scale(weights.reward_scale);
  else if (model.value_scale() != weights.reward_scale)
    throw ConfigError("combined_step: reward scale differs from the one the model was trained with");
  ForwardCache cache;
  auto parts = compute_losses(model, batch, weights, ctx, &cache);
  const Eigen::MatrixXd upstream = parts.upstream_rl + parts.upstream_il;
  model.adam_step(model.backward(cache, upstream), cfg.lr);
  if (model.step_count() % cfg.target_sync_period == 0) model.sync_target();
  return parts;
}

inline LossBreakdown combined_step(QModel& model, std::span<const Transition> batch, const TrainConfig& cfg,
                                   const TrainingContext& ctx) {
  return combined_step(model, make_block(batch), cfg, ctx);
}

struct TrainResult {
  std::vector<double> loss_trace;
};

/// Runs cfg.steps combined steps on batches drawn from d_m and d_r.
inline TrainResult train(QModel& model, const Dataset& d_m, const Dataset& d_r, const TrainConfig& cfg,
                         const TrainingContext& ctx) {
  cfg.validate();
  if (d_m.empty() && d_r.empty()) throw UsageError("train: both datasets are empty");
  if (!d_m.empty() && !d_r.empty() && d_m.meta.feature_dim != d_r.meta.feature_dim)
    throw ConfigError("train: strategy and random datasets have different feature dimensions");
  const int dim = d_m.empty() ? d_r.meta.feature_dim : d_m.meta.feature_dim;
  if (dim != model.input_dim()) throw ConfigError("train: dataset dimension does not match the model");

  const TransitionBlock strat = make_block(d_m.transitions);
  const TransitionBlock rand = make_block(d_r.transitions);
  const TransitionBlock pool = concat(strat, rand);
  const std::size_t n_strat = strat.size();
  const std::size_t n_total = pool.size();

  Rng rng(derive_seed(cfg.seed, {0x7a1}));
  TrainResult out;
  out.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  for (int step = 0; step < cfg.steps; ++step) {
    if (cfg.sampler == BatchSampler::uniform || n_strat == 0 || n_strat == n_total) {
      for (auto& i : idx) i = rng.below(n_total);
    } else {
      const auto n_s = static_cast<std::size_t>(std::lround(cfg.strategy_share * cfg.batch_size));
      for (std::size_t k = 0; k < idx.size(); ++k)
        idx[k] = k < n_s ? rng.below(n_strat) : n_strat + rng.below(n_total - n_strat);
    }
    const auto parts = combined_step(model, gather(pool, idx), cfg, ctx);
    if (!std::isfinite(parts.total)) throw TrainingError("non-finite loss at step " + std::to_string(step));
    out.loss_trace.push_back(parts.total);
  }
  return out;
}

}  // namespace mddl

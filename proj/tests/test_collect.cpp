#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "mddl/collect.hpp"
#include "mddl/evalkit.hpp"
#include "mddl/experiment.hpp"
#include "test_support.hpp"

using namespace mddl;

namespace {

std::vector<double> action_counts(const Dataset& ds, int actions) {
  std::vector<double> c(static_cast<std::size_t>(actions), 0.0);
  for (const auto& tr : ds.transitions) c[static_cast<std::size_t>(tr.action_index)] += 1.0;
  return c;
}

void expect_uniform(const Dataset& ds, int actions) {
  const auto c = action_counts(ds, actions);
  const double n = static_cast<double>(ds.size());
  const double p = 1.0 / actions;
  const double sd = std::sqrt(n * p * (1 - p));
  for (int a = 0; a < actions; ++a) EXPECT_NEAR(c[static_cast<std::size_t>(a)], n * p, 5.0 * sd) << "action " << a;
}

double entropy(const std::map<int, double>& counts) {
  double n = 0.0, h = 0.0;
  for (const auto& [a, c] : counts) n += c;
  for (const auto& [a, c] : counts) h -= c / n * std::log(c / n);
  return h;
}

QModel small_base(const EnvConfig& env, int steps) {
  auto d_r = collect_random(env, 500, 77).dataset;
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.seed = 5;
  return train_base_model(d_r, cfg, TrainingContext(default_position_table(env), env));
}

}  // namespace

TEST(CollectRandom, UniformActionFrequency) {
  const EnvConfig env;
  const auto ds = collect_random(env, 34000, 1).dataset;
  ASSERT_GE(ds.size(), 100000u);
  expect_uniform(ds, 32);
}

TEST(CollectRandom, TagsAndDeterminism) {
  const EnvConfig env;
  const auto a = collect_random(env, 300, 9);
  const auto b = collect_random(env, 300, 9);
  EXPECT_EQ(a.dataset, b.dataset);
  EXPECT_EQ(a.click_log, b.click_log);
  EXPECT_EQ(a.dataset.meta.policy_id, "random");
  for (const auto& tr : a.dataset.transitions) EXPECT_EQ(tr.source, Source::random);
  EXPECT_FALSE(collect_random(env, 300, 10).dataset == a.dataset);
}

TEST(CollectRandom, RespectsActionMask) {
  EnvConfig env;
  env.action_mask = {0, 3, 31};
  const auto ds = collect_random(env, 2000, 2).dataset;
  for (const auto& tr : ds.transitions) EXPECT_TRUE(env.action_allowed(tr.action_index));
}

TEST(BaseModel, EquivalentToPureBellmanTraining) {
  const EnvConfig env;
  const TrainingContext ctx(default_position_table(env), env);
  const auto d_r = collect_random(env, 200, 3).dataset;
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.seed = 4;
  const QModel base = train_base_model(d_r, cfg, ctx);
  const QModel ref = train_variant(Variant::random_rl, Dataset{}, d_r, cfg, ctx);
  EXPECT_EQ(base.params(), ref.params());
}

TEST(BaseModel, ZeroStepsReturnsInitialModel) {
  const EnvConfig env;
  const TrainingContext ctx(default_position_table(env), env);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 8;
  const QModel base = train_base_model(collect_random(env, 50, 3).dataset, cfg, ctx);
  EXPECT_EQ(base.params(), QModel(env.feature_dim(), cfg.hidden, 32, cfg.seed).params());
}

TEST(BaseModel, RejectsStrategyData) {
  const EnvConfig env;
  auto d = collect_random(env, 50, 3).dataset;
  d.transitions[3].source = Source::strategy;
  EXPECT_THROW(train_base_model(d, TrainConfig{}, TrainingContext(default_position_table(env), env)), UsageError);
}

TEST(BaseModel, ToyGreedyPolicyIsOptimal) {
  const auto env = fixture::toy_env();
  const TrainingContext ctx(default_position_table(env), env);
  const auto data = fixture::toy_exhaustive_data(env);
  TrainConfig cfg;
  cfg.steps = fixture::kToySteps;
  const QModel base = train_base_model(data, cfg, ctx);
  const fixture::ToyOracle oracle{cfg.gamma, env};
  for (const auto& tr : data.transitions) {
    const int greedy = greedy_action(q_values(base, tr.state));
    EXPECT_EQ(greedy, tr.t == 0 ? oracle.best_first() : oracle.best_last());
  }
}

TEST(CollectStrategy, EpsilonZeroIsGreedyAndDeterministic) {
  const EnvConfig env;
  const QModel base = small_base(env, 100);
  const auto a = collect_strategy(env, base, 200, 0.0, 5);
  const auto b = collect_strategy(env, base, 200, 0.0, 5);
  EXPECT_EQ(a.dataset, b.dataset);
  EXPECT_EQ(a.dataset.meta.policy_id, "model:" + model_hash(base));
  for (const auto& tr : a.dataset.transitions) {
    EXPECT_EQ(tr.source, Source::strategy);
    EXPECT_EQ(tr.action_index, greedy_action(q_values(base, tr.state)));
  }
}

TEST(CollectStrategy, EpsilonOneIsUniform) {
  const EnvConfig env;
  const QModel base = small_base(env, 100);
  const auto ds = collect_strategy(env, base, 34000, 1.0, 6).dataset;
  ASSERT_GE(ds.size(), 100000u);
  expect_uniform(ds, 32);
}

TEST(CollectStrategy, LowerActionEntropyPerCluster) {
  const EnvConfig env;
  const QModel base = small_base(env, 1500);
  const auto strat = collect_strategy(env, base, 10000, 0.05, 7, 1'000'000).dataset;
  const auto rand = collect_random(env, 10000, 8).dataset;
  const auto clustering = kmeans_states(merge_datasets(strat, rand), 10, 3);
  const auto cs = assign_clusters(clustering.centroids, strat);
  const auto cr = assign_clusters(clustering.centroids, rand);
  std::map<int, std::map<int, double>> hs, hr;
  for (std::size_t i = 0; i < strat.size(); ++i) hs[cs[i]][strat.transitions[i].action_index] += 1;
  for (std::size_t i = 0; i < rand.size(); ++i) hr[cr[i]][rand.transitions[i].action_index] += 1;
  int compared = 0;
  for (const auto& [c, counts] : hs) {
    if (!hr.count(c)) continue;
    EXPECT_LT(entropy(counts), entropy(hr[c])) << "cluster " << c;
    ++compared;
  }
  EXPECT_GT(compared, 0);
}

TEST(CollectStrategy, RejectsBadInputs) {
  const EnvConfig env;
  const QModel wrong(env.feature_dim() + 1, {4}, 32, 1);
  EXPECT_THROW(collect_strategy(env, wrong, 10, 0.05, 1), UsageError);
  const QModel base(env.feature_dim(), {4}, 32, 1);
  EXPECT_THROW(collect_strategy(env, base, 10, 1.5, 1), UsageError);
}

#pragma once

// Five-variant comparison and hyperparameter sweeps.
//
// Per seed: collect random data -> train the logging model on a separate
// prior-period random set -> collect strategy data with it -> train each
// variant -> evaluate reward and overestimation on held-out data that all
// variants share, typed by one shared clustering.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "mddl/collect.hpp"
#include "mddl/config.hpp"
#include "mddl/core.hpp"
#include "mddl/dataset_io.hpp"
#include "mddl/evalkit.hpp"
#include "mddl/qfunc.hpp"
#include "mddl/trainer.hpp"

namespace mddl {

enum class Variant { random_rl, strategy_rl, strategy_il, mixed_rl, mddl };

inline constexpr std::array<Variant, 5> kAllVariants{Variant::random_rl, Variant::strategy_rl, Variant::strategy_il,
                                                     Variant::mixed_rl, Variant::mddl};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::random_rl: return "random_rl";
    case Variant::strategy_rl: return "strategy_rl";
    case Variant::strategy_il: return "strategy_il";
    case Variant::mixed_rl: return "mixed_rl";
    case Variant::mddl: return "mddl";
  }
  return "?";
}

inline std::string_view variant_label(Variant v) {
  switch (v) {
    case Variant::random_rl: return "Random Data & RL";
    case Variant::strategy_rl: return "Strategy Data & RL";
    case Variant::strategy_il: return "Strategy Data & IL";
    case Variant::mixed_rl: return "Mixed Data & RL";
    case Variant::mddl: return "MDDL";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (auto v : kAllVariants)
    if (variant_name(v) == s) return v;
  return std::nullopt;
}

struct VariantPlan {
  bool uses_strategy = false;
  bool uses_random = false;
};

inline VariantPlan plan_for(Variant v) {
  switch (v) {
    case Variant::random_rl: return {false, true};
    case Variant::strategy_rl:
    case Variant::strategy_il: return {true, false};
    case Variant::mixed_rl:
    case Variant::mddl: return {true, true};
  }
  return {};
}

/// Loss weights and routing of a variant. MDDL keeps the configured alphas;
/// the baselines pin them.
inline TrainConfig configure_variant(Variant v, TrainConfig cfg) {
  switch (v) {
    case Variant::random_rl:
      cfg.alpha1 = 1.0, cfg.alpha2 = 0.0, cfg.routing = LossRouting::gated;
      break;
    case Variant::strategy_rl:
    case Variant::mixed_rl:
      cfg.alpha1 = 1.0, cfg.alpha2 = 0.0, cfg.routing = LossRouting::rl_all;
      break;
    case Variant::strategy_il:
      cfg.alpha1 = 0.0, cfg.alpha2 = 1.0, cfg.routing = LossRouting::gated;
      break;
    case Variant::mddl:
      cfg.routing = LossRouting::gated;
      break;
  }
  return cfg;
}

inline QModel train_variant(Variant v, const Dataset& d_m, const Dataset& d_r, const TrainConfig& base_cfg,
                            const TrainingContext& ctx, std::vector<double>* loss_trace = nullptr) {
  const auto plan = plan_for(v);
  if (plan.uses_strategy && d_m.empty())
    throw UsageError(std::string("variant ") + std::string(variant_name(v)) + " needs strategy data");
  if (plan.uses_random && d_r.empty())
    throw UsageError(std::string("variant ") + std::string(variant_name(v)) + " needs random data");
  const Dataset empty;
  const Dataset& dm = plan.uses_strategy ? d_m : empty;
  const Dataset& dr = plan.uses_random ? d_r : empty;
  const auto cfg = configure_variant(v, base_cfg);
  const auto& meta = dm.empty() ? dr.meta : dm.meta;
  QModel model(meta.feature_dim, cfg.hidden, action_count(meta.slots), cfg.seed);
  auto result = train(model, dm, dr, cfg, ctx);
  if (loss_trace) *loss_trace = std::move(result.loss_trace);
  return model;
}

struct ExperimentScale {
  int random_episodes = 2000;
  int strategy_episodes = 20000;
  int base_random_episodes = 20000;  // prior-period random data the logging model learns from
  int steps = 20000;
  int eval_episodes = 2000;
  int od_random_episodes = 500;
  int od_strategy_episodes = 2000;
  double epsilon = 0.05;
  int n_clusters = 10;
};

// Distinct episode-id ranges so every dataset of one seed can be merged.
inline constexpr std::int64_t kStrategyIdBase = 10'000'000;
inline constexpr std::int64_t kOdRandomIdBase = 20'000'000;
inline constexpr std::int64_t kOdStrategyIdBase = 30'000'000;
inline constexpr std::int64_t kBaseRandomIdBase = 40'000'000;

struct SeedData {
  std::uint64_t seed = 0;
  Dataset d_r;
  Dataset d_m;
  QModel base;
  Dataset od_data;  // held-out random + strategy transitions with realized returns
  Clustering clustering;
};

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) { return derive_seed(seed, {tag}); }

enum : std::uint64_t {
  kTagRandom = 1,
  kTagBaseRandom,
  kTagBaseTrain,
  kTagStrategy,
  kTagOdRandom,
  kTagOdStrategy,
  kTagTrain,
  kTagEval,
  kTagCluster,
};

inline SeedData prepare_seed(const ConfigBundle& cfg, const ExperimentScale& scale, std::uint64_t seed) {
  const TrainingContext ctx(cfg.table, cfg.env);
  SeedData sd;
  sd.seed = seed;
  sd.d_r = collect_random(cfg.env, scale.random_episodes, stream_seed(seed, kTagRandom)).dataset;

  auto prior = collect_random(cfg.env, scale.base_random_episodes, stream_seed(seed, kTagBaseRandom),
                              kBaseRandomIdBase).dataset;
  TrainConfig base_cfg = cfg.train;
  base_cfg.steps = scale.steps;
  base_cfg.seed = stream_seed(seed, kTagBaseTrain);
  sd.base = train_base_model(prior, base_cfg, ctx);

  sd.d_m = collect_strategy(cfg.env, sd.base, scale.strategy_episodes, scale.epsilon,
                            stream_seed(seed, kTagStrategy), kStrategyIdBase).dataset;

  const auto od_r = collect_random(cfg.env, scale.od_random_episodes, stream_seed(seed, kTagOdRandom),
                                   kOdRandomIdBase).dataset;
  const auto od_m = collect_strategy(cfg.env, sd.base, scale.od_strategy_episodes, scale.epsilon,
                                     stream_seed(seed, kTagOdStrategy), kOdStrategyIdBase).dataset;
  sd.od_data = realized_returns(merge_datasets(od_r, od_m), cfg.train.gamma);
  sd.clustering = kmeans_states(sd.od_data, scale.n_clusters, stream_seed(seed, kTagCluster));
  return sd;
}

struct CellResult {
  Variant variant = Variant::mddl;
  std::uint64_t seed = 0;
  double reward = 0.0;
  double avg_od = 0.0;
  double std_od = 0.0;
  ODReport report;
};

inline CellResult run_cell(const ConfigBundle& cfg, const ExperimentScale& scale, const SeedData& sd, Variant v,
                           const TrainConfig& train_cfg) {
  const TrainingContext ctx(cfg.table, cfg.env);
  TrainConfig tc = train_cfg;
  tc.steps = scale.steps;
  tc.seed = stream_seed(sd.seed, kTagTrain);
  const QModel model = train_variant(v, sd.d_m, sd.d_r, tc, ctx);
  CellResult r;
  r.variant = v;
  r.seed = sd.seed;
  r.reward = reward_eval(cfg.env, model, scale.eval_episodes, tc.gamma, stream_seed(sd.seed, kTagEval));
  r.report = od_metrics(model, sd.od_data, sd.clustering.centroids, OdWeighting::per_type, sd.clustering.seed);
  r.avg_od = r.report.avg_od;
  r.std_od = r.report.std_od;
  return r;
}

/// Number of worker threads; MDDL_SINGLE_THREADED (any value but "0")
/// forces one.
inline int effective_threads(int requested) {
  if (const char* s = std::getenv("MDDL_SINGLE_THREADED"); s && std::string_view(s) != "0") return 1;
  return std::max(1, requested);
}

// Runs fn(0..n-1); results must be written to per-index slots.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  threads = effective_threads(threads);
  if (threads == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads && static_cast<std::size_t>(t) < n; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(v / static_cast<double>(xs.size() - 1));
  }
  return m;
}

inline std::string pm(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f±%.3f", m.mean, m.std);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("write to " + path.string() + " failed");
}

struct Table2Result {
  std::vector<std::uint64_t> seeds;
  // cells[seed_index][variant_index], variants in kAllVariants order.
  std::vector<std::array<CellResult, 5>> cells;

  std::vector<double> column(Variant v, double CellResult::*field) const {
    std::vector<double> out;
    for (const auto& row : cells) out.push_back(row[static_cast<std::size_t>(v)].*field);
    return out;
  }
};

inline std::string table2_csv(const Table2Result& r) {
  std::string s = "variant,reward,avg_od,std_od\n";
  for (auto v : kAllVariants)
    s += std::string(variant_label(v)) + "," + pm(mean_std(r.column(v, &CellResult::reward))) + "," +
         pm(mean_std(r.column(v, &CellResult::avg_od))) + "," + pm(mean_std(r.column(v, &CellResult::std_od))) +
         "\n";
  return s;
}

inline std::string table2_runs_csv(const Table2Result& r) {
  std::string s = "variant,seed,reward,avg_od,std_od\n";
  for (const auto& row : r.cells)
    for (const auto& c : row)
      s += std::string(variant_name(c.variant)) + "," + std::to_string(c.seed) + "," + format_real(c.reward) + "," +
           format_real(c.avg_od) + "," + format_real(c.std_od) + "\n";
  return s;
}

inline std::vector<SeedData> prepare_seeds(const ConfigBundle& cfg, const ExperimentScale& scale,
                                           const std::vector<std::uint64_t>& seeds, int threads) {
  std::vector<SeedData> data(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) { data[i] = prepare_seed(cfg, scale, seeds[i]); });
  return data;
}

inline Table2Result run_table2(const ConfigBundle& cfg, const ExperimentScale& scale,
                               const std::vector<std::uint64_t>& seeds, const std::vector<SeedData>& data,
                               int threads = 1) {
  Table2Result r;
  r.seeds = seeds;
  r.cells.resize(seeds.size());
  parallel_for(seeds.size() * kAllVariants.size(), threads, [&](std::size_t cell) {
    const std::size_t si = cell / kAllVariants.size(), vi = cell % kAllVariants.size();
    r.cells[si][vi] = run_cell(cfg, scale, data[si], kAllVariants[vi], cfg.train);
  });
  return r;
}

inline void write_table2(const std::filesystem::path& out_dir, const Table2Result& r,
                         const std::vector<SeedData>& data) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "table2.csv", table2_csv(r));
  write_text(out_dir / "table2_runs.csv", table2_runs_csv(r));
  for (std::size_t si = 0; si < r.cells.size(); ++si) {
    const auto dir = out_dir / ("seed_" + std::to_string(r.seeds[si]));
    std::filesystem::create_directories(dir);
    write_centroids(dir / "centroids.csv", data[si].clustering);
    for (const auto& c : r.cells[si])
      write_text(dir / ("od_" + std::string(variant_name(c.variant)) + ".csv"), od_report_csv(c.report));
  }
}

enum class SweepParam { alpha2, beta };

inline std::vector<double> default_sweep_grid(SweepParam p) {
  return p == SweepParam::alpha2 ? std::vector<double>{0.25, 0.5, 1.0, 2.0, 4.0}
                                 : std::vector<double>{0.1, 1.0, 10.0, 100.0};
}

struct SweepResult {
  SweepParam param = SweepParam::alpha2;
  std::vector<double> grid;
  std::vector<std::uint64_t> seeds;
  // rewards[grid_index][seed_index]
  std::vector<std::vector<double>> rewards;

  std::vector<double> mean_rewards() const {
    std::vector<double> out;
    for (const auto& row : rewards) out.push_back(mean_std(row).mean);
    return out;
  }
};

/// Trains MDDL at each grid value with everything else fixed.
inline SweepResult run_sweep(const ConfigBundle& cfg, const ExperimentScale& scale, SweepParam param,
                             const std::vector<double>& grid, const std::vector<std::uint64_t>& seeds,
                             const std::vector<SeedData>& data, int threads = 1) {
  SweepResult r;
  r.param = param;
  r.grid = grid;
  r.seeds = seeds;
  r.rewards.assign(grid.size(), std::vector<double>(seeds.size(), 0.0));
  parallel_for(grid.size() * seeds.size(), threads, [&](std::size_t cell) {
    const std::size_t gi = cell / seeds.size(), si = cell % seeds.size();
    TrainConfig tc = cfg.train;
    (param == SweepParam::alpha2 ? tc.alpha2 : tc.beta) = grid[gi];
    tc.alpha1 = 1.0;
    r.rewards[gi][si] = run_cell(cfg, scale, data[si], Variant::mddl, tc).reward;
  });
  return r;
}

inline std::string sweep_csv(const SweepResult& r) {
  const std::string name = r.param == SweepParam::alpha2 ? "alpha2" : "beta";
  std::string s = name + ",reward_mean,reward_std,n_seeds\n";
  for (std::size_t gi = 0; gi < r.grid.size(); ++gi) {
    const auto m = mean_std(r.rewards[gi]);
    s += format_real(r.grid[gi]) + "," + format_real(m.mean) + "," + format_real(m.std) + "," +
         std::to_string(r.seeds.size()) + "\n";
  }
  return s;
}

inline std::string sweep_runs_csv(const SweepResult& r) {
  const std::string name = r.param == SweepParam::alpha2 ? "alpha2" : "beta";
  std::string s = name + ",seed,reward\n";
  for (std::size_t gi = 0; gi < r.grid.size(); ++gi)
    for (std::size_t si = 0; si < r.seeds.size(); ++si)
      s += format_real(r.grid[gi]) + "," + std::to_string(r.seeds[si]) + "," + format_real(r.rewards[gi][si]) + "\n";
  return s;
}

}  // namespace mddl

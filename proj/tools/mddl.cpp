// mddl: data generation, training, evaluation and experiment runner.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mddl/collect.hpp"
#include "mddl/config.hpp"
#include "mddl/dataset_io.hpp"
#include "mddl/evalkit.hpp"
#include "mddl/experiment.hpp"
#include "mddl/qfunc.hpp"
#include "mddl/trainer.hpp"

namespace fs = std::filesystem;
using namespace mddl;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct CliUsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ConfigBundle load_or_default(const std::string& path) {
  return path.empty() ? default_config() : load_config(path);
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CliUsageError("bad seed '" + item + "' in --seeds");
    }
  }
  if (out.empty()) throw CliUsageError("--seeds is empty");
  return out;
}

struct GenOptions {
  std::string policy;
  int episodes = 1000;
  std::string config;
  std::string base_model;
  std::string out;
  std::uint64_t seed = 0;
  double epsilon = 0.05;
  std::string click_log;
  std::int64_t first_id = 0;
};

int cmd_gen(const GenOptions& o) {
  const auto cfg = load_or_default(o.config);
  Collected c;
  if (o.policy == "random") {
    c = collect_random(cfg.env, o.episodes, o.seed, o.first_id);
  } else {
    if (o.base_model.empty()) throw CliUsageError("gen --policy strategy requires --base-model");
    const auto base = read_model(o.base_model);
    c = collect_strategy(cfg.env, base.model, o.episodes, o.epsilon, o.seed, o.first_id);
  }
  write_dataset(o.out, c.dataset);
  if (!o.click_log.empty()) write_click_log(o.click_log, c.click_log);
  return 0;
}

struct TrainOptions {
  std::string variant;
  std::string random_data;
  std::string strategy_data;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::optional<int> steps;
  std::optional<double> alpha2;
  std::optional<double> beta;
  std::string loss_trace;
};

int cmd_train(const TrainOptions& o) {
  const auto variant = parse_variant(o.variant);
  if (!variant) throw CliUsageError("unknown variant '" + o.variant + "'");
  const auto plan = plan_for(*variant);
  if (plan.uses_random && o.random_data.empty())
    throw CliUsageError("variant " + o.variant + " requires --random-data");
  if (plan.uses_strategy && o.strategy_data.empty())
    throw CliUsageError("variant " + o.variant + " requires --strategy-data");
  const auto cfg = load_or_default(o.config);
  TrainConfig tc = cfg.train;
  tc.seed = o.seed;
  if (o.steps) tc.steps = *o.steps;
  if (o.alpha2) tc.alpha2 = *o.alpha2;
  if (o.beta) tc.beta = *o.beta;
  tc.validate();
  const Dataset d_r = plan.uses_random ? read_dataset(o.random_data) : Dataset{};
  const Dataset d_m = plan.uses_strategy ? read_dataset(o.strategy_data) : Dataset{};
  for (const Dataset* d : {&d_r, &d_m})
    if (!d->empty() && d->meta.feature_dim != cfg.env.feature_dim())
      throw ConfigError("dataset feature dimension does not match the environment config");
  const TrainingContext ctx(cfg.table, cfg.env);
  std::vector<double> trace;
  const QModel model = train_variant(*variant, d_m, d_r, tc, ctx, &trace);
  const TrainConfig echoed = configure_variant(*variant, tc);
  write_model(o.out, model, &echoed);
  if (!o.loss_trace.empty()) {
    std::string s = "step,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) s += std::to_string(i + 1) + "," + format_real(trace[i]) + "\n";
    write_text(o.loss_trace, s);
  }
  return 0;
}

struct EvalOptions {
  std::string model;
  std::string config;
  std::vector<std::string> data;
  std::optional<double> gamma;
  int episodes = 2000;
  std::string report;
  std::string out;
  std::uint64_t seed = 0;
  std::string variant = "model";
  std::string centroids_in;
  std::string centroids_out;
  int n_clusters = 10;
  std::string weighting = "per_type";
};

int cmd_eval(const EvalOptions& o) {
  const auto cfg = load_or_default(o.config);
  const double gamma = o.gamma.value_or(cfg.train.gamma);
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw CliUsageError("--gamma must lie in [0, 1]");
  const auto mf = read_model(o.model);
  if (mf.model.input_dim() != cfg.env.feature_dim() || mf.model.output_dim() != cfg.env.actions())
    throw CliUsageError("model shape " + std::to_string(mf.model.input_dim()) + "->" +
                        std::to_string(mf.model.output_dim()) + " does not match the environment config");
  const double reward = reward_eval(cfg.env, mf.model, o.episodes, gamma, o.seed);

  double avg_od = 0.0, std_od = 0.0;
  bool have_od = false;
  if (!o.data.empty()) {
    Dataset merged = read_dataset(o.data.front());
    for (std::size_t i = 1; i < o.data.size(); ++i) merged = merge_datasets(merged, read_dataset(o.data[i]));
    merged = realized_returns(std::move(merged), gamma);
    std::vector<std::vector<double>> centroids;
    std::uint64_t cluster_seed = o.seed;
    if (!o.centroids_in.empty()) {
      centroids = read_centroids(o.centroids_in);
    } else {
      auto clustering = kmeans_states(merged, o.n_clusters, o.seed);
      centroids = clustering.centroids;
      if (!o.centroids_out.empty()) write_centroids(o.centroids_out, clustering);
    }
    const auto weighting = o.weighting == "per_transition" ? OdWeighting::per_transition : OdWeighting::per_type;
    const auto rep = od_metrics(mf.model, merged, centroids, weighting, cluster_seed);
    if (!o.report.empty()) write_text(o.report, od_report_csv(rep));
    avg_od = rep.avg_od;
    std_od = rep.std_od;
    have_od = true;
  }
  std::string csv = "variant,seed,reward,avg_od,std_od\n";
  csv += o.variant + "," + std::to_string(o.seed) + "," + format_real(reward) + "," +
         (have_od ? format_real(avg_od) : "") + "," + (have_od ? format_real(std_od) : "") + "\n";
  if (o.out.empty())
    std::cout << csv;
  else
    write_text(o.out, csv);
  return 0;
}

struct ExperimentOptions {
  std::string name;
  std::string config;
  std::string seeds = "1,2,3,4,5";
  std::string out_dir;
  ExperimentScale scale;
  int threads = 1;
};

int cmd_experiment(const ExperimentOptions& o) {
  const auto cfg = load_or_default(o.config);
  const auto seeds = parse_seeds(o.seeds);
  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  if (ec || !fs::is_directory(o.out_dir)) throw CliUsageError("cannot use output directory '" + o.out_dir + "'");
  const auto data = prepare_seeds(cfg, o.scale, seeds, o.threads);
  if (o.name == "table2") {
    const auto r = run_table2(cfg, o.scale, seeds, data, o.threads);
    write_table2(o.out_dir, r, data);
    std::cout << table2_csv(r);
  } else {
    const auto param = o.name == "sweep_alpha2" ? SweepParam::alpha2 : SweepParam::beta;
    const auto r = run_sweep(cfg, o.scale, param, default_sweep_grid(param), seeds, data, o.threads);
    write_text(fs::path(o.out_dir) / (o.name + ".csv"), sweep_csv(r));
    write_text(fs::path(o.out_dir) / (o.name + "_runs.csv"), sweep_runs_csv(r));
    std::cout << sweep_csv(r);
  }
  return 0;
}

struct EstimateOptions {
  std::string click_log;
  std::string config;
  std::string out;
};

int cmd_estimate_table(const EstimateOptions& o) {
  const auto cfg = load_or_default(o.config);
  const auto table = estimate_position_table(read_click_log(o.click_log), cfg.env.max_screens, cfg.env.slots);
  std::string s = "{\"position_table\":{\"exposure\":";
  append_real_array(s, table.exposure);
  s += ",\"ctr\":";
  append_real_array(s, table.ctr);
  s += "}}\n";
  if (o.out.empty())
    std::cout << s;
  else
    write_text(o.out, s);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-distribution offline RL lab for feed position allocation"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "Collect a dataset with the random or strategy policy");
  g->add_option("--policy", gen.policy, "random | strategy")->required()->check(CLI::IsMember({"random", "strategy"}));
  g->add_option("--episodes", gen.episodes, "Episodes to collect")->check(CLI::PositiveNumber);
  g->add_option("--config", gen.config, "Config file (JSON)");
  g->add_option("--base-model", gen.base_model, "Logging model for --policy strategy");
  g->add_option("--out", gen.out, "Output dataset file")->required();
  g->add_option("--seed", gen.seed, "Collection seed");
  g->add_option("--epsilon", gen.epsilon, "Exploration rate of the strategy policy")->check(CLI::Range(0.0, 1.0));
  g->add_option("--click-log", gen.click_log, "Also write the per-position exposure/click log");
  g->add_option("--first-episode-id", gen.first_id, "Id of the first episode");

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train one variant");
  t->add_option("--variant", tr.variant, "random_rl | strategy_rl | strategy_il | mixed_rl | mddl")
      ->required()
      ->check(CLI::IsMember({"random_rl", "strategy_rl", "strategy_il", "mixed_rl", "mddl"}));
  t->add_option("--random-data", tr.random_data, "Random-policy dataset");
  t->add_option("--strategy-data", tr.strategy_data, "Strategy-policy dataset");
  t->add_option("--config", tr.config, "Config file (JSON)");
  t->add_option("--out", tr.out, "Output model file")->required();
  t->add_option("--seed", tr.seed, "Training seed");
  t->add_option("--steps", tr.steps, "Override train.steps");
  t->add_option("--alpha2", tr.alpha2, "Override train.alpha2");
  t->add_option("--beta", tr.beta, "Override train.beta");
  t->add_option("--loss-trace", tr.loss_trace, "Write step,loss CSV");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate reward and overestimation of a model");
  e->add_option("--model", ev.model, "Model file")->required();
  e->add_option("--config", ev.config, "Config file (JSON)");
  e->add_option("--data", ev.data, "Dataset(s) for overestimation statistics");
  e->add_option("--gamma", ev.gamma, "Discount (default: train.gamma)");
  e->add_option("--episodes", ev.episodes, "Reward evaluation episodes")->check(CLI::PositiveNumber);
  e->add_option("--report", ev.report, "Per-type overestimation CSV");
  e->add_option("--out", ev.out, "Metrics CSV (default: stdout)");
  e->add_option("--seed", ev.seed, "Evaluation and clustering seed");
  e->add_option("--variant", ev.variant, "Label written to the metrics row");
  e->add_option("--centroids-in", ev.centroids_in, "Reuse a saved clustering");
  e->add_option("--centroids-out", ev.centroids_out, "Save the fitted clustering");
  e->add_option("--n-clusters", ev.n_clusters, "State clusters")->check(CLI::PositiveNumber);
  e->add_option("--weighting", ev.weighting, "per_type | per_transition")
      ->check(CLI::IsMember({"per_type", "per_transition"}));

  ExperimentOptions ex;
  auto* x = app.add_subcommand("experiment", "Run the variant comparison or a sweep");
  x->add_option("--name", ex.name, "table2 | sweep_alpha2 | sweep_beta")
      ->required()
      ->check(CLI::IsMember({"table2", "sweep_alpha2", "sweep_beta"}));
  x->add_option("--config", ex.config, "Config file (JSON)");
  x->add_option("--seeds", ex.seeds, "Comma-separated seed list");
  x->add_option("--out-dir", ex.out_dir, "Report directory")->required();
  x->add_option("--random-episodes", ex.scale.random_episodes)->check(CLI::PositiveNumber);
  x->add_option("--strategy-episodes", ex.scale.strategy_episodes)->check(CLI::PositiveNumber);
  x->add_option("--base-random-episodes", ex.scale.base_random_episodes)->check(CLI::PositiveNumber);
  x->add_option("--steps", ex.scale.steps)->check(CLI::NonNegativeNumber);
  x->add_option("--eval-episodes", ex.scale.eval_episodes)->check(CLI::PositiveNumber);
  x->add_option("--od-random-episodes", ex.scale.od_random_episodes)->check(CLI::PositiveNumber);
  x->add_option("--od-strategy-episodes", ex.scale.od_strategy_episodes)->check(CLI::PositiveNumber);
  x->add_option("--epsilon", ex.scale.epsilon)->check(CLI::Range(0.0, 1.0));
  x->add_option("--n-clusters", ex.scale.n_clusters)->check(CLI::PositiveNumber);
  x->add_option("--threads", ex.threads, "Concurrent cells (MDDL_SINGLE_THREADED overrides)")
      ->check(CLI::PositiveNumber);

  EstimateOptions es;
  auto* s = app.add_subcommand("estimate-table", "Estimate a position table from a click log");
  s->add_option("--click-log", es.click_log, "Click log written by gen --click-log")->required();
  s->add_option("--config", es.config, "Config file (JSON) for K and T_max");
  s->add_option("--out", es.out, "Output JSON (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*x) return cmd_experiment(ex);
    if (*s) return cmd_estimate_table(es);
  } catch (const CliUsageError& err) {
    std::cerr << "error: " << err.what() << "\n\n";
    for (auto* sub : app.get_subcommands()) std::cerr << sub->help();
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

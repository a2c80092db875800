// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset. Exit status is nonzero if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mddl/experiment.hpp"
#include "test_support.hpp"

using namespace mddl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [x]");
  }
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// Direct summation, no library WER code.
double wer_by_hand(int action, int t, int slots, const PositionTable& table) {
  double s = 0.0;
  for (int k = 1; k <= slots; ++k)
    if ((action >> (k - 1)) & 1) s += table.exposure[t * slots + k - 1] * table.ctr[t * slots + k - 1];
  return s;
}

PositionTable random_positive_table(Rng& rng, int n) {
  PositionTable t;
  double p = 1.0;
  for (int j = 0; j < n; ++j) {
    t.exposure.push_back(p);
    t.ctr.push_back(rng.uniform(0.01, 0.3));
    p *= rng.uniform(0.6, 0.99);
  }
  return t;
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  const auto t0 = Clock::now();
  const TrainingContext ctx(default_position_table(EnvConfig{}), 5, 6);
  const std::vector<std::vector<int>> shapes{{8}, {10, 6}, {16, 8}, {12, 12}};
  double worst_il = 0.0, worst_rl = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng rng(derive_seed(0xacc1, {i}));
    QModel m(9, shapes[i % shapes.size()], 32, 100 + i);
    // Online weights away from the target so the Bellman target is a distinct constant.
    for (auto& layer : m.params()) layer.weight *= rng.uniform(1.1, 1.6);
    const auto strat = fixture::random_batch(rng, 8, 9, Source::strategy);
    const auto rand = fixture::random_batch(rng, 8, 9, Source::random);
    const double beta = rng.uniform(0.5, 10.0), gamma = rng.uniform(0.5, 0.99);
    const auto il = il_loss(m, strat, ctx, beta);
    const auto rl = rl_loss(m, rand, ctx, gamma);
    const auto il_num = fixture::numeric_gradient(m, [&] { return il_loss(m, strat, ctx, beta).loss; });
    const auto rl_num = fixture::numeric_gradient(m, [&] { return rl_loss(m, rand, ctx, gamma).loss; });
    worst_il = std::max(worst_il, fixture::max_relative_error(il.gradients, il_num));
    worst_rl = std::max(worst_rl, fixture::max_relative_error(rl.gradients, rl_num));
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.check(worst_il < 1e-4, "il max rel err " + fmt("%.2e", worst_il));
  v.check(worst_rl < 1e-4, "rl max rel err " + fmt("%.2e", worst_rl));
  v.check(secs < 60.0, "runtime " + fmt("%.1fs", secs));
  return v;
}

Verdict soft_argmax_limit() {
  const EnvConfig env;
  const auto table = default_position_table(env);
  const int n_actions = action_count(env.slots);
  const std::vector<double> betas{0.1, 1.0, 10.0, 100.0, 1000.0};
  std::vector<double> gap_sum(betas.size(), 0.0);
  double worst_limit = 0.0;
  Rng rng(0xacc2);
  for (int i = 0; i < 1000; ++i) {
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(env.max_screens)));
    std::vector<double> wers(static_cast<std::size_t>(n_actions));
    for (int a = 0; a < n_actions; ++a) wers[a] = wer_by_hand(a, t, env.slots, table);
    std::vector<double> q(static_cast<std::size_t>(n_actions));
    while (true) {
      for (auto& x : q) x = rng.uniform(-3.0, 3.0);
      auto sorted = q;
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[0] - sorted[1] >= 0.1) break;
    }
    const auto best = std::max_element(q.begin(), q.end()) - q.begin();
    const double hard = wers[static_cast<std::size_t>(best)];
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const double soft = soft_expected_wer(q, wers, betas[b]);
      gap_sum[b] += std::abs(soft - hard);
      if (betas[b] == 1000.0) worst_limit = std::max(worst_limit, std::abs(soft - hard));
    }
  }
  Verdict v;
  v.check(worst_limit < 1e-6, "max |soft(1e3) - hard| " + fmt("%.2e", worst_limit));
  bool monotone = true;
  std::string trail;
  for (std::size_t b = 0; b < betas.size(); ++b) {
    if (b > 0 && gap_sum[b] > gap_sum[b - 1]) monotone = false;
    trail += (b ? "," : "") + fmt("%.3g", gap_sum[b] / 1000.0);
  }
  v.check(monotone, "mean gap over beta {" + trail + "} non-increasing");
  return v;
}

Verdict gating() {
  const TrainingContext ctx(default_position_table(EnvConfig{}), 5, 6);
  Verdict v;
  bool cols_zero = true, params_zero = true, reward_blind = true;
  for (std::uint64_t i = 0; i < 10; ++i) {
    Rng rng(derive_seed(0xacc3, {i}));
    const QModel m(9, {16, 16}, 32, 200 + i);
    auto batch = fixture::random_batch(rng, 12, 9, Source::strategy);
    for (auto& tr : fixture::random_batch(rng, 12, 9, Source::random)) batch.push_back(tr);
    std::swap(batch[1], batch[20]);
    std::swap(batch[5], batch[14]);
    const TrainConfig cfg;
    const auto w = LossWeights::from(cfg, ctx);
    ForwardCache cache;
    const auto parts = compute_losses(m, make_block(batch), w, ctx, &cache);
    // Per-source masks applied to each term's upstream gradient.
    Eigen::MatrixXd il_from_random = Eigen::MatrixXd::Zero(parts.upstream_il.rows(), parts.upstream_il.cols());
    Eigen::MatrixXd rl_from_strategy = il_from_random;
    for (std::size_t c = 0; c < batch.size(); ++c) {
      const auto col = static_cast<Eigen::Index>(c);
      if (batch[c].source == Source::random) il_from_random.col(col) = parts.upstream_il.col(col);
      else rl_from_strategy.col(col) = parts.upstream_rl.col(col);
    }
    cols_zero = cols_zero && il_from_random.isZero(0.0) && rl_from_strategy.isZero(0.0);
    for (const auto* up : {&il_from_random, &rl_from_strategy})
      for (const auto& layer : m.backward(cache, *up))
        params_zero = params_zero && layer.weight.isZero(0.0) && layer.bias.isZero(0.0);
    // Strategy samples' rewards and next states never reach the gradient.
    auto altered = batch;
    for (auto& tr : altered)
      if (tr.source == Source::strategy) {
        tr.reward += 100.0;
        if (tr.next_state)
          for (auto& x : tr.next_state->features) x = -x;
      }
    ForwardCache c2;
    const auto p2 = compute_losses(m, make_block(altered), w, ctx, &c2);
    const auto g1 = m.backward(cache, Eigen::MatrixXd(parts.upstream_rl + parts.upstream_il));
    const auto g2 = m.backward(c2, Eigen::MatrixXd(p2.upstream_rl + p2.upstream_il));
    reward_blind = reward_blind && g1 == g2;
  }
  v.check(cols_zero, "cross-source upstream columns == 0");
  v.check(params_zero, "cross-source parameter gradients == 0");
  v.check(reward_blind, "strategy rewards do not touch the gradient");
  return v;
}

Verdict toy_oracle() {
  const auto t0 = Clock::now();
  const auto env = fixture::toy_env();
  const TrainingContext ctx(default_position_table(env), env);
  const TrainConfig cfg;
  const auto data = fixture::toy_exhaustive_data(env);
  const QModel m = train_variant(Variant::random_rl, Dataset{}, data, cfg, ctx);
  const fixture::ToyOracle oracle{cfg.gamma, env};

  double worst = 0.0;
  bool greedy_ok = true;
  for (const auto& tr : data.transitions) {
    const auto q = q_values(m, tr.state);
    for (int a = 0; a < 4; ++a)
      worst = std::max(worst, std::abs(q[a] - (tr.t == 0 ? oracle.q_first(a) : oracle.q_last(a))));
    greedy_ok = greedy_ok && greedy_action(q) == (tr.t == 0 ? oracle.best_first() : oracle.best_last());
  }

  // Every first action once, then the learned greedy continuation.
  const FeedSim sim(env);
  Dataset od;
  for (int a0 = 0; a0 < 4; ++a0) {
    auto [st, s] = sim.reset(1, a0);
    int a = a0;
    for (int t = 0; st.alive; ++t) {
      const auto r = sim.step(st, Action::from_index(a, env.slots));
      Transition tr;
      tr.episode_id = a0;
      tr.t = t;
      tr.state = s;
      tr.action_index = a;
      tr.reward = r.reward;
      tr.terminal = !r.next;
      tr.next_state = r.next;
      od.transitions.push_back(tr);
      if (!r.next) break;
      s = *r.next;
      a = greedy_action(q_values(m, s));
    }
  }
  od.meta.feature_dim = env.feature_dim();
  od.meta.slots = env.slots;
  od = realized_returns(std::move(od), cfg.gamma);
  const auto clustering = kmeans_states(od, 2, 7);
  const auto rep = od_metrics(m, od, clustering.centroids, OdWeighting::per_type, clustering.seed);
  const double secs = seconds_since(t0);

  Verdict v;
  v.check(worst < 1e-3, "max |Q - Q*| " + fmt("%.2e", worst));
  v.check(std::abs(rep.avg_od) <= 0.05, "AVG-OD " + fmt("%.2e", rep.avg_od));
  v.check(greedy_ok, "greedy policy is optimal");
  v.check(secs < 120.0, "runtime " + fmt("%.1fs", secs));
  return v;
}

// Criteria 5 and 6 share the per-seed data and the default MDDL cell.
struct DeskScale {
  ConfigBundle cfg = default_config();
  ExperimentScale scale;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<SeedData> data;
  Table2Result table2;
  double table2_secs = 0.0;
  bool ready = false;

  void run() {
    if (ready) return;
    const auto t0 = Clock::now();
    data = prepare_seeds(cfg, scale, seeds, 1);
    table2 = run_table2(cfg, scale, seeds, data, 1);
    table2_secs = seconds_since(t0);
    ready = true;
  }

  std::vector<double> mddl_rewards(double alpha2, double beta) {
    TrainConfig tc = cfg.train;
    tc.alpha2 = alpha2;
    tc.beta = beta;
    std::vector<double> out;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      if (tc == cfg.train) out.push_back(table2.cells[si][4].reward);
      else out.push_back(run_cell(cfg, scale, data[si], Variant::mddl, tc).reward);
    }
    return out;
  }
};

Verdict table2_ordering(DeskScale& desk) {
  desk.run();
  const auto& r = desk.table2;
  auto col = [&](Variant v, double CellResult::*f) { return mean(r.column(v, f)); };
  const double od_s = col(Variant::strategy_rl, &CellResult::avg_od);
  const double od_m = col(Variant::mixed_rl, &CellResult::avg_od);
  const double od_r = col(Variant::random_rl, &CellResult::avg_od);
  const double od_il = col(Variant::strategy_il, &CellResult::avg_od);
  const double sd_s = col(Variant::strategy_rl, &CellResult::std_od);
  const double sd_r = col(Variant::random_rl, &CellResult::std_od);

  const auto mddl = r.column(Variant::mddl, &CellResult::reward);
  double best_baseline = -1e300;
  std::string baseline_means;
  std::vector<double> best_per_seed(desk.seeds.size(), -1e300);
  for (auto v : kAllVariants) {
    if (v == Variant::mddl) continue;
    const auto rw = r.column(v, &CellResult::reward);
    best_baseline = std::max(best_baseline, mean(rw));
    baseline_means += std::string(baseline_means.empty() ? "" : ",") + fmt("%.3f", mean(rw));
    for (std::size_t i = 0; i < rw.size(); ++i) best_per_seed[i] = std::max(best_per_seed[i], rw[i]);
  }
  int wins = 0;
  for (std::size_t i = 0; i < mddl.size(); ++i) wins += mddl[i] > best_per_seed[i];

  Verdict v;
  v.check(od_s > od_m && od_m > od_r,
          "(a) AVG-OD strategy_rl " + fmt("%.3f", od_s) + " > mixed_rl " + fmt("%.3f", od_m) + " > random_rl " +
              fmt("%.3f", od_r));
  v.check(od_il < 0.0, "(b) AVG-OD strategy_il " + fmt("%.3f", od_il) + " < 0");
  v.check(sd_s > sd_r, "(c) STD-OD strategy_rl " + fmt("%.3f", sd_s) + " > random_rl " + fmt("%.3f", sd_r));
  v.check(mean(mddl) > best_baseline && wins >= 4,
          "(d) reward mddl " + fmt("%.3f", mean(mddl)) + " vs baselines {" + baseline_means + "}, wins " +
              std::to_string(wins) + "/5");
  v.check(desk.table2_secs < 1800.0, "runtime " + fmt("%.0fs", desk.table2_secs));
  return v;
}

Verdict sweep_shapes(DeskScale& desk) {
  desk.run();
  const std::vector<double> alphas{0.25, 0.5, 1.0, 2.0, 4.0}, betas{0.1, 1.0, 10.0};
  std::vector<double> a_means, b_means;
  for (double a : alphas) a_means.push_back(mean(desk.mddl_rewards(a, desk.cfg.train.beta)));
  for (double b : betas) b_means.push_back(mean(desk.mddl_rewards(desk.cfg.train.alpha2, b)));
  const auto peak = std::max_element(a_means.begin(), a_means.end()) - a_means.begin();
  const bool interior = peak > 0 && peak + 1 < static_cast<long>(a_means.size());
  bool nondecreasing = true;
  for (std::size_t i = 1; i < b_means.size(); ++i) nondecreasing = nondecreasing && b_means[i] >= b_means[i - 1];
  auto join = [](const std::vector<double>& xs) {
    std::string s;
    for (double x : xs) s += (s.empty() ? "" : ",") + fmt("%.3f", x);
    return s;
  };
  Verdict v;
  v.check(interior, "alpha2 {0.25..4} rewards {" + join(a_means) + "} peak at interior point");
  v.check(nondecreasing, "beta {0.1,1,10} rewards {" + join(b_means) + "} non-decreasing");
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("MDDL_SINGLE_THREADED=1 \"") + MDDL_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Every command once into dir; returns the relative paths it wrote.
std::vector<std::string> cli_session(const fs::path& dir, bool& ok) {
  auto p = [&](const std::string& f) { return "\"" + (dir / f).string() + "\""; };
  const std::string tiny =
      " --seeds 1,2 --random-episodes 60 --strategy-episodes 120 --base-random-episodes 60 --steps 40"
      " --eval-episodes 40 --od-random-episodes 30 --od-strategy-episodes 30 --n-clusters 3";
  std::vector<std::string> cmds{
      "gen --policy random --episodes 300 --seed 7 --out " + p("r.ds") + " --click-log " + p("r.clicks"),
      "gen --policy random --episodes 300 --seed 8 --first-episode-id 5000 --out " + p("prior.ds"),
      "train --variant random_rl --random-data " + p("prior.ds") + " --steps 60 --seed 1 --out " + p("base.model"),
      "gen --policy strategy --episodes 600 --seed 9 --first-episode-id 100000 --base-model " + p("base.model") +
          " --out " + p("m.ds"),
  };
  for (auto v : kAllVariants) {
    const std::string name(variant_name(v));
    cmds.push_back("train --variant " + name + " --random-data " + p("r.ds") + " --strategy-data " + p("m.ds") +
                   " --steps 60 --seed 3 --out " + p(name + ".model") + " --loss-trace " + p(name + ".trace"));
    cmds.push_back("eval --model " + p(name + ".model") + " --data " + p("r.ds") + " --data " + p("m.ds") +
                   " --episodes 100 --seed 4 --n-clusters 5 --variant " + name + " --report " + p(name + ".od") +
                   " --centroids-out " + p(name + ".centroids") + " --out " + p(name + ".metrics"));
  }
  cmds.push_back("estimate-table --click-log " + p("r.clicks") + " --out " + p("table.json"));
  cmds.push_back("experiment --name table2 --out-dir " + p("t2") + tiny);
  cmds.push_back("experiment --name sweep_alpha2 --out-dir " + p("sa") + tiny);
  cmds.push_back("experiment --name sweep_beta --out-dir " + p("sb") + tiny);
  for (const auto& c : cmds)
    if (run_cli(c) != 0) {
      ok = false;
      std::printf("  command failed: %s\n", c.c_str());
    }
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
  std::sort(files.begin(), files.end());
  return files;
}

Verdict determinism() {
  const auto root = fs::temp_directory_path() / "mddl_acceptance_determinism";
  fs::remove_all(root);
  const auto a = root / "a", b = root / "b";
  fs::create_directories(a);
  fs::create_directories(b);
  bool ok = true;
  const auto fa = cli_session(a, ok), fb = cli_session(b, ok);
  Verdict v;
  v.check(ok, "all commands exit 0");
  v.check(fa == fb, std::to_string(fa.size()) + " output files in each run");
  int differing = 0;
  for (const auto& f : fa)
    if (slurp(a / f) != slurp(b / f)) {
      ++differing;
      std::printf("  differs: %s\n", f.c_str());
    }
  v.check(differing == 0 && !fa.empty(), std::to_string(differing) + " files differ");
  fs::remove_all(root);
  return v;
}

Verdict wer_suite() {
  Verdict v;
  {
    const PositionTable flat{std::vector<double>(30, 1.0), std::vector<double>(30, 1.0)};
    bool zero = true;
    for (int t = 0; t < 6; ++t) zero = zero && wer(Action::from_index(0, 5), t, flat) == 0.0;
    v.check(zero, "all-zero action -> 0");
    v.check(wer(Action({1, 1, 1, 0, 0}), 0, flat) == 3.0, "unit table (1,1,1,0,0) -> 3");
    const PositionTable t{{1.0, 0.8, 0.6, 0.4, 0.2}, {0.10, 0.09, 0.08, 0.07, 0.06}};
    v.check(std::abs(wer(Action({1, 0, 1, 0, 0}), 0, t) - 0.148) < 1e-15, "decaying table example -> 0.148");
    bool threw = false;
    try {
      wer(Action({1, 0, 1, 0, 0}), 1, t);
    } catch (const std::exception&) {
      threw = true;
    }
    v.check(threw, "short table -> error");
  }
  Rng rng(0xacc8);
  bool additive = true, bounded = true, ordering = true, matches = true;
  for (int rep = 0; rep < 20; ++rep) {
    const auto table = random_positive_table(rng, 30);
    for (int t = 0; t < 6; ++t) {
      const double upper = wer_by_hand(31, t, 5, table);
      for (int a = 0; a < 32; ++a) {
        const double wa = wer(Action::from_index(a, 5), t, table);
        matches = matches && std::abs(wa - wer_by_hand(a, t, 5, table)) < 1e-15;
        bounded = bounded && wa >= 0.0 && wa <= upper && ((wa == upper) == (a == 31));
        for (int b = 0; b < 32; ++b) {
          if (a & b) continue;
          const double sum = wa + wer(Action::from_index(b, 5), t, table);
          additive = additive && std::abs(wer(Action::from_index(a | b, 5), t, table) - sum) < 1e-15;
        }
      }
      const Action a1({1, 1, 1, 0, 0}), a2({0, 0, 1, 0, 0}), a3({1, 1, 1, 1, 1});
      ordering = ordering && wer(a3, t, table) > wer(a1, t, table) && wer(a1, t, table) > wer(a2, t, table);
    }
  }
  v.check(matches, "equals direct summation");
  v.check(additive, "additive over disjoint bits (exhaustive K=5)");
  v.check(bounded, "within [0, all-ones bound], bound only at all-ones");
  v.check(ordering, "illustration ordering a3 > a1 > a2");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || only.contains(n); };

  DeskScale desk;
  const std::vector<std::pair<int, std::string>> names{
      {1, "gradient correctness"},  {2, "soft-argmax limit"},     {3, "gating exactness"},
      {4, "toy oracle equivalence"}, {5, "variant comparison"},   {6, "sweep shapes"},
      {7, "CLI determinism"},        {8, "WER suite"}};
  int failed = 0;
  for (const auto& [n, name] : names) {
    if (!wanted(n)) continue;
    Verdict v;
    switch (n) {
      case 1: v = gradients(); break;
      case 2: v = soft_argmax_limit(); break;
      case 3: v = gating(); break;
      case 4: v = toy_oracle(); break;
      case 5: v = table2_ordering(desk); break;
      case 6: v = sweep_shapes(desk); break;
      case 7: v = determinism(); break;
      case 8: v = wer_suite(); break;
    }
    failed += !v.pass;
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", n, name.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

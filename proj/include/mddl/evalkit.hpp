#pragma once

// Evaluation: realized discounted returns, state typing by k-means,
// overestimation statistics per (state cluster, action) type, greedy-policy
// reward and empirical position-table estimation from click logs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mddl/collect.hpp"
#include "mddl/config.hpp"
#include "mddl/core.hpp"
#include "mddl/feedsim.hpp"
#include "mddl/qfunc.hpp"
#include "mddl/rng.hpp"
#include "mddl/text.hpp"
#include "mddl/trainer.hpp"
#include "mddl/wer.hpp"

namespace mddl {

/// Fills realized_return = sum_{i>=t} gamma^(i-t) r_i by a backward pass over
/// each episode.
inline Dataset realized_returns(Dataset ds, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("realized_returns: gamma must lie in [0, 1]");
  EpisodeOrderChecker order;
  for (const auto& tr : ds.transitions)
    if (auto problem = order.feed(tr); !problem.empty()) throw UsageError("realized_returns: " + problem);
  auto& trs = ds.transitions;
  std::size_t end = trs.size();
  while (end > 0) {
    std::size_t begin = end - 1;
    while (begin > 0 && trs[begin - 1].episode_id == trs[end - 1].episode_id) --begin;
    double acc = 0.0;
    for (std::size_t i = end; i-- > begin;) {
      acc = trs[i].reward + gamma * acc;
      trs[i].realized_return = acc;
    }
    end = begin;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// k-means

struct Clustering {
  std::vector<std::vector<double>> centroids;
  std::vector<int> assignment;
  std::uint64_t seed = 0;
  int iterations = 0;
  // Within-cluster sum of squares after each assignment pass.
  std::vector<double> objective_trace;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Nearest centroid, lowest index on ties.
inline int nearest_centroid(const std::vector<std::vector<double>>& centroids, std::span<const double> x) {
  int best = 0;
  double best_d = squared_distance(centroids[0], x);
  for (std::size_t c = 1; c < centroids.size(); ++c) {
    const double d = squared_distance(centroids[c], x);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline std::vector<int> assign_clusters(const std::vector<std::vector<double>>& centroids, const Dataset& ds) {
  if (centroids.empty()) throw UsageError("assign_clusters: no centroids");
  std::vector<int> out;
  out.reserve(ds.size());
  for (const auto& tr : ds.transitions) {
    if (tr.state.features.size() != centroids.front().size())
      throw UsageError("assign_clusters: state dimension differs from centroid dimension");
    out.push_back(nearest_centroid(centroids, tr.state.features));
  }
  return out;
}

/// Lloyd iterations from a k-means++ seeding; stops after max_iter passes or
/// when no centroid moves more than tol.
inline Clustering kmeans_points(const std::vector<std::vector<double>>& points, int n_clusters, std::uint64_t seed,
                                int max_iter = 100, double tol = 1e-8) {
  if (points.empty()) throw UsageError("kmeans: no points");
  if (n_clusters < 1) throw ConfigError("kmeans: n_clusters must be >= 1");
  {
    auto sorted = points;
    std::sort(sorted.begin(), sorted.end());
    const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
    if (n_clusters > distinct)
      throw ConfigError("kmeans: " + std::to_string(n_clusters) + " clusters requested but only " +
                        std::to_string(distinct) + " distinct states");
  }
  const std::size_t n = points.size();
  const std::size_t dim = points.front().size();
  Clustering out;
  out.seed = seed;
  Rng rng(derive_seed(seed, {0xc1}));

  out.centroids.push_back(points[rng.below(n)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], out.centroids[0]);
  while (static_cast<int>(out.centroids.size()) < n_clusters) {
    double total = 0.0;
    for (double v : d2) total += v;
    const double target = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] == 0.0) --pick;  // float slack at the end of the scan
    out.centroids.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points[i], out.centroids.back()));
  }

  out.assignment.assign(n, 0);
  for (int iter = 0; iter < max_iter; ++iter) {
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out.assignment[i] = nearest_centroid(out.centroids, points[i]);
      objective += squared_distance(points[i], out.centroids[static_cast<std::size_t>(out.assignment[i])]);
    }
    out.objective_trace.push_back(objective);
    out.iterations = iter + 1;

    std::vector<std::vector<double>> sums(out.centroids.size(), std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(out.centroids.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[static_cast<std::size_t>(out.assignment[i])];
      for (std::size_t d = 0; d < dim; ++d) s[d] += points[i][d];
      ++counts[static_cast<std::size_t>(out.assignment[i])];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < out.centroids.size(); ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t d = 0; d < dim; ++d) sums[c][d] /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(squared_distance(sums[c], out.centroids[c])));
      out.centroids[c] = std::move(sums[c]);
    }
    if (shift < tol) break;
  }
  // Final assignment against the final centroids.
  for (std::size_t i = 0; i < n; ++i) out.assignment[i] = nearest_centroid(out.centroids, points[i]);
  return out;
}

inline Clustering kmeans_states(const Dataset& ds, int n_clusters, std::uint64_t seed) {
  if (ds.empty()) throw UsageError("kmeans_states: empty dataset");
  std::vector<std::vector<double>> points;
  points.reserve(ds.size());
  for (const auto& tr : ds.transitions) points.push_back(tr.state.features);
  return kmeans_points(points, n_clusters, seed);
}

inline void write_centroids(const std::filesystem::path& path, const Clustering& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << "# kmeans seed=" << c.seed << " clusters=" << c.centroids.size() << '\n';
  for (const auto& row : c.centroids) {
    for (std::size_t d = 0; d < row.size(); ++d) os << (d ? "," : "") << format_real(row[d]);
    os << '\n';
  }
}

inline std::vector<std::vector<double>> read_centroids(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open centroid file " + path.string());
  std::vector<std::vector<double>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw LoadError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (!out.empty() && row.size() != out.front().size())
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": centroid dimension mismatch");
    out.push_back(std::move(row));
  }
  if (out.empty()) throw LoadError(path.string() + ": no centroids");
  return out;
}

// ---------------------------------------------------------------------------
// Overestimation degree

enum class OdWeighting {
  per_type,        // each observed (cluster, action) type counts once
  per_transition,  // types weighted by their sample count
};

struct OdType {
  int cluster_id = 0;
  int action_index = 0;
  std::size_t count = 0;
  double mean_od = 0.0;
};

struct ODReport {
  std::vector<OdType> types;  // sorted by (cluster_id, action_index)
  double avg_od = 0.0;
  double std_od = 0.0;
  int n_types_observed = 0;
  OdWeighting weighting = OdWeighting::per_type;
  std::vector<std::vector<double>> centroids;
  std::uint64_t clustering_seed = 0;
};

/// Mean and population standard deviation of the per-type means.
inline std::pair<double, double> od_aggregates(const std::vector<OdType>& types, OdWeighting weighting) {
  if (types.empty()) return {0.0, 0.0};
  double wsum = 0.0, mean = 0.0;
  for (const auto& t : types) {
    const double w = weighting == OdWeighting::per_type ? 1.0 : static_cast<double>(t.count);
    wsum += w;
    mean += w * t.mean_od;
  }
  mean /= wsum;
  double var = 0.0;
  for (const auto& t : types) {
    const double w = weighting == OdWeighting::per_type ? 1.0 : static_cast<double>(t.count);
    var += w * (t.mean_od - mean) * (t.mean_od - mean);
  }
  return {mean, std::sqrt(var / wsum)};
}

/// Overestimation degree Q(s_t, a_t) - realized return, grouped by
/// (state cluster, action) type.
inline ODReport od_metrics(const QModel& model, const Dataset& ds, const std::vector<std::vector<double>>& centroids,
                           OdWeighting weighting = OdWeighting::per_type, std::uint64_t clustering_seed = 0) {
  if (ds.empty()) throw UsageError("od_metrics: empty dataset");
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!ds.transitions[i].realized_return)
      throw UsageError("od_metrics: transition " + std::to_string(i) + " has no realized_return");
  const auto clusters = assign_clusters(centroids, ds);
  std::vector<StateVec> states;
  states.reserve(ds.size());
  for (const auto& tr : ds.transitions) states.push_back(tr.state);
  const Eigen::MatrixXd q = model.forward(state_matrix(states)) / model.value_scale();

  std::map<std::pair<int, int>, std::vector<double>> groups;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& tr = ds.transitions[i];
    const double od = q(tr.action_index, static_cast<Eigen::Index>(i)) - *tr.realized_return;
    groups[{clusters[i], tr.action_index}].push_back(od);
  }
  ODReport r;
  r.weighting = weighting;
  r.centroids = centroids;
  r.clustering_seed = clustering_seed;
  for (auto& [key, ods] : groups) {
    // Summation order fixed by value so the result does not depend on dataset order.
    std::sort(ods.begin(), ods.end());
    double s = 0.0;
    for (double v : ods) s += v;
    r.types.push_back({key.first, key.second, ods.size(), s / static_cast<double>(ods.size())});
  }
  r.n_types_observed = static_cast<int>(r.types.size());
  std::tie(r.avg_od, r.std_od) = od_aggregates(r.types, weighting);
  return r;
}

inline std::string od_report_csv(const ODReport& r) {
  std::string s = "cluster_id,action_index,count,mean_od\n";
  for (const auto& t : r.types)
    s += std::to_string(t.cluster_id) + "," + std::to_string(t.action_index) + "," + std::to_string(t.count) + "," +
         format_real(t.mean_od) + "\n";
  s += "summary,avg_od," + std::to_string(r.n_types_observed) + "," + format_real(r.avg_od) + "\n";
  s += "summary,std_od," + std::to_string(r.n_types_observed) + "," + format_real(r.std_od) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Reward

/// Mean discounted return of the greedy policy, rewards in expected mode.
inline double reward_eval(EnvConfig env, const QModel& model, int episodes, double gamma, std::uint64_t seed) {
  env.reward_mode = RewardMode::expected;
  if (model.input_dim() != env.feature_dim() || model.output_dim() != env.actions())
    throw UsageError("reward_eval: model shape does not match the environment");
  FeedSim sim(env);
  return rollout(sim, greedy_policy(model, env), episodes, gamma, seed).mean_return;
}

// ---------------------------------------------------------------------------
// Position table estimation

/// p_j = exposures at j / screens reaching j's screen; CTR_j = clicks at j /
/// exposures at j. Positions without data get 0.
inline PositionTable estimate_position_table(const std::vector<ScreenLog>& log, int max_screens, int slots) {
  if (log.empty()) throw UsageError("estimate_position_table: empty click log");
  const std::size_t n = static_cast<std::size_t>(max_screens) * slots;
  std::vector<double> screens(static_cast<std::size_t>(max_screens), 0.0), exposures(n, 0.0), clicks(n, 0.0);
  for (const auto& s : log) {
    if (s.t < 0 || s.t >= max_screens) throw UsageError("estimate_position_table: screen index out of range");
    if (static_cast<int>(s.exposed.size()) != slots || static_cast<int>(s.clicked.size()) != slots)
      throw UsageError("estimate_position_table: slot count mismatch");
    screens[static_cast<std::size_t>(s.t)] += 1.0;
    for (int k = 0; k < slots; ++k) {
      const std::size_t j = static_cast<std::size_t>(s.t) * slots + k;
      exposures[j] += s.exposed[k];
      clicks[j] += s.clicked[k];
    }
  }
  PositionTable t;
  t.exposure.assign(n, 0.0);
  t.ctr.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double reached = screens[j / static_cast<std::size_t>(slots)];
    if (reached > 0.0) t.exposure[j] = exposures[j] / reached;
    if (exposures[j] > 0.0) t.ctr[j] = clicks[j] / exposures[j];
  }
  return t;
}

inline void write_click_log(const std::filesystem::path& path, const std::vector<ScreenLog>& log) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& s : log) {
    os << "{\"episode_id\":" << s.episode_id << ",\"t\":" << s.t << ",\"exposed\":[";
    for (std::size_t k = 0; k < s.exposed.size(); ++k) os << (k ? "," : "") << int(s.exposed[k]);
    os << "],\"clicked\":[";
    for (std::size_t k = 0; k < s.clicked.size(); ++k) os << (k ? "," : "") << int(s.clicked[k]);
    os << "]}\n";
  }
}

inline std::vector<ScreenLog> read_click_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open click log " + path.string());
  std::vector<ScreenLog> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      ScreenLog s;
      s.episode_id = j.at("episode_id").get<std::int64_t>();
      s.t = j.at("t").get<int>();
      s.exposed = j.at("exposed").get<std::vector<std::uint8_t>>();
      s.clicked = j.at("clicked").get<std::vector<std::uint8_t>>();
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mddl

#pragma once

// Line-delimited dataset files. Line 1 is the metadata record
//   {"version","D","K","seed","env_hash","policy_id"}
// and every following line is one transition record with the fields
//   episode_id, t, state, action_index, reward, next_state, terminal,
//   source, realized_return
// (next_state and realized_return are null when absent).

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "mddl/core.hpp"
#include "mddl/text.hpp"

namespace mddl {

inline std::string meta_line(const DatasetMeta& m) {
  std::string s = "{\"version\":" + std::to_string(m.version) + ",\"D\":" +
                  std::to_string(m.feature_dim) + ",\"K\":" + std::to_string(m.slots) +
                  ",\"seed\":" + std::to_string(m.seed) + ",\"env_hash\":" + json_quote(m.env_hash) +
                  ",\"policy_id\":" + json_quote(m.policy_id);
  if (!m.created.empty()) s += ",\"created\":" + json_quote(m.created);
  s += '}';
  return s;
}

inline std::string transition_line(const Transition& tr) {
  std::string s = "{\"episode_id\":" + std::to_string(tr.episode_id) +
                  ",\"t\":" + std::to_string(tr.t) + ",\"state\":";
  append_real_array(s, tr.state.features);
  s += ",\"action_index\":" + std::to_string(tr.action_index);
  s += ",\"reward\":" + format_real(tr.reward);
  s += ",\"next_state\":";
  if (tr.next_state)
    append_real_array(s, tr.next_state->features);
  else
    s += "null";
  s += tr.terminal ? ",\"terminal\":true" : ",\"terminal\":false";
  s += ",\"source\":\"";
  s += to_string(tr.source);
  s += "\",\"realized_return\":";
  s += tr.realized_return ? format_real(*tr.realized_return) : std::string("null");
  s += '}';
  return s;
}

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << meta_line(ds.meta) << '\n';
  for (const auto& tr : ds.transitions) os << transition_line(tr) << '\n';
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  validate_dataset(ds);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_dataset(os, ds);
  if (!os) throw Error("write to " + path.string() + " failed");
}

namespace detail {

inline std::vector<double> real_array(const nlohmann::json& j, const char* field) {
  if (!j.is_array()) throw std::runtime_error(std::string(field) + " is not an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& x : j) {
    if (!x.is_number()) throw std::runtime_error(std::string(field) + " holds a non-number");
    out.push_back(x.get<double>());
  }
  return out;
}

inline const nlohmann::json& field(const nlohmann::json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end()) throw std::runtime_error(std::string("missing field '") + name + "'");
  return *it;
}

}  // namespace detail

inline Dataset read_dataset(std::istream& is, const std::string& name = "<stream>") {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) -> LoadError {
    return LoadError(name + ":" + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(is, line)) {
    lineno = 1;
    throw fail("missing metadata line");
  }
  lineno = 1;
  try {
    auto j = nlohmann::json::parse(line);
    ds.meta.version = detail::field(j, "version").get<int>();
    ds.meta.feature_dim = detail::field(j, "D").get<int>();
    ds.meta.slots = detail::field(j, "K").get<int>();
    ds.meta.seed = detail::field(j, "seed").get<std::uint64_t>();
    ds.meta.env_hash = detail::field(j, "env_hash").get<std::string>();
    ds.meta.policy_id = detail::field(j, "policy_id").get<std::string>();
    if (j.contains("created")) ds.meta.created = j["created"].get<std::string>();
  } catch (const std::exception& e) {
    throw fail(std::string("malformed metadata: ") + e.what());
  }
  if (ds.meta.version != 1) throw fail("unsupported version " + std::to_string(ds.meta.version));
  if (ds.meta.slots < 1 || ds.meta.slots > kMaxSlots) throw fail("K outside [1, 16]");
  if (ds.meta.feature_dim < 1) throw fail("D must be positive");

  EpisodeOrderChecker order;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    Transition tr;
    try {
      auto j = nlohmann::json::parse(line);
      tr.episode_id = detail::field(j, "episode_id").get<std::int64_t>();
      tr.t = detail::field(j, "t").get<int>();
      tr.state.t = tr.t;
      tr.state.features = detail::real_array(detail::field(j, "state"), "state");
      tr.action_index = detail::field(j, "action_index").get<int>();
      tr.reward = detail::field(j, "reward").get<double>();
      const auto& next = detail::field(j, "next_state");
      if (!next.is_null()) tr.next_state = StateVec{detail::real_array(next, "next_state"), tr.t + 1};
      tr.terminal = detail::field(j, "terminal").get<bool>();
      const auto tag = detail::field(j, "source").get<std::string>();
      auto src = parse_source(tag);
      if (!src) throw std::runtime_error("unknown source tag '" + tag + "'");
      tr.source = *src;
      const auto& ret = detail::field(j, "realized_return");
      if (!ret.is_null()) tr.realized_return = ret.get<double>();
    } catch (const LoadError&) {
      throw;
    } catch (const std::exception& e) {
      throw fail(std::string("malformed transition: ") + e.what());
    }
    auto problem = transition_problem(tr, ds.meta.feature_dim, ds.meta.slots);
    if (problem.empty()) problem = order.feed(tr);
    if (!problem.empty()) throw fail(problem);
    ds.transitions.push_back(std::move(tr));
  }
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  return read_dataset(is, path.string());
}

}  // namespace mddl

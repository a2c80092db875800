#pragma once

// Feed-forward Q-network: state (D) -> tanh hidden layers -> 2^K action values.
// Gradients are computed by hand-written backpropagation; parameters are
// updated with Adam. A frozen target copy provides bootstrap values.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mddl/config.hpp"
#include "mddl/core.hpp"
#include "mddl/rng.hpp"
#include "mddl/text.hpp"

namespace mddl {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  friend bool operator==(const DenseLayer& a, const DenseLayer& b) {
    return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
           a.weight == b.weight && a.bias == b.bias;
  }
};

using ParamSet = std::vector<DenseLayer>;

inline ParamSet zeros_like(const ParamSet& ps) {
  ParamSet out;
  out.reserve(ps.size());
  for (const auto& l : ps)
    out.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                   Eigen::VectorXd::Zero(l.bias.size())});
  return out;
}

/// Post-activation values kept from a forward pass for backpropagation.
struct ForwardCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> hidden;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

enum class TargetInit { synced, independent };

class QModel {
 public:
  QModel() = default;

  QModel(int input_dim, std::vector<int> hidden, int output_dim, std::uint64_t seed,
         TargetInit target_init = TargetInit::synced)
      : input_dim_(input_dim), output_dim_(output_dim), hidden_(std::move(hidden)), seed_(seed) {
    if (input_dim < 1 || output_dim < 1) throw UsageError("QModel: dimensions must be positive");
    Rng rng(derive_seed(seed, {0x9f}));
    params_ = init_params(rng);
    if (target_init == TargetInit::independent) {
      Rng other(derive_seed(seed, {0xa0}));
      target_ = init_params(other);
    } else {
      target_ = params_;
    }
    moment1_ = zeros_like(params_);
    moment2_ = zeros_like(params_);
  }

  int input_dim() const { return input_dim_; }
  int output_dim() const { return output_dim_; }
  const std::vector<int>& hidden() const { return hidden_; }
  std::uint64_t seed() const { return seed_; }
  std::int64_t step_count() const { return steps_; }
  // Training rewards are multiplied by this factor; raw outputs divided by it
  // are Q-values in reward units.
  double value_scale() const { return value_scale_; }
  void set_value_scale(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw UsageError("QModel: value scale must be positive");
    value_scale_ = s;
  }

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const ParamSet& target_params() const { return target_; }
  const ParamSet& first_moment() const { return moment1_; }
  const ParamSet& second_moment() const { return moment2_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : params_) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// states: D x B, one column per state. Returns 2^K x B action values.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& states, bool use_target = false,
                          ForwardCache* cache = nullptr) const {
    if (states.rows() != input_dim_)
      throw UsageError("QModel: state dimension " + std::to_string(states.rows()) + " != " +
                       std::to_string(input_dim_));
    const ParamSet& ps = use_target ? target_ : params_;
    if (cache) {
      cache->input = states;
      cache->hidden.clear();
    }
    Eigen::MatrixXd a = states;
    for (std::size_t l = 0; l < ps.size(); ++l) {
      // Column by column: a blocked GEMM may use a different kernel for the
      // trailing columns, and a state's Q-values must not depend on where it
      // sits in the batch.
      Eigen::MatrixXd z(ps[l].weight.rows(), a.cols());
      for (Eigen::Index c = 0; c < a.cols(); ++c) z.col(c).noalias() = ps[l].weight * a.col(c);
      z.colwise() += ps[l].bias;
      if (l + 1 < ps.size()) {
        a = z.array().tanh().matrix();
        if (cache) cache->hidden.push_back(a);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  /// Gradient of sum(upstream .* forward(states)) w.r.t. the online parameters.
  ParamSet backward(const ForwardCache& cache, const Eigen::MatrixXd& upstream) const {
    if (upstream.rows() != output_dim_ || upstream.cols() != cache.input.cols())
      throw UsageError("QModel: upstream gradient is " + std::to_string(upstream.rows()) + "x" +
                       std::to_string(upstream.cols()) + ", expected " + std::to_string(output_dim_) +
                       "x" + std::to_string(cache.input.cols()));
    ParamSet grads(params_.size());
    Eigen::MatrixXd g = upstream;
    for (std::size_t l = params_.size(); l-- > 0;) {
      const Eigen::MatrixXd& prev = l == 0 ? cache.input : cache.hidden[l - 1];
      grads[l].weight.noalias() = g * prev.transpose();
      grads[l].bias = g.rowwise().sum();
      if (l > 0) {
        Eigen::MatrixXd back = params_[l].weight.transpose() * g;
        g = (back.array() * (1.0 - prev.array().square())).matrix();
      }
    }
    return grads;
  }

  ParamSet backward(const Eigen::MatrixXd& states, const Eigen::MatrixXd& upstream) const {
    ForwardCache cache;
    forward(states, false, &cache);
    return backward(cache, upstream);
  }

  /// One Adam update with bias correction.
  void adam_step(const ParamSet& grads, double lr, const AdamConfig& adam = {}) {
    if (grads.size() != params_.size()) throw UsageError("adam_step: gradient layer count mismatch");
    for (std::size_t l = 0; l < grads.size(); ++l) {
      if (grads[l].weight.rows() != params_[l].weight.rows() ||
          grads[l].weight.cols() != params_[l].weight.cols() ||
          grads[l].bias.size() != params_[l].bias.size())
        throw UsageError("adam_step: gradient shape mismatch at layer " + std::to_string(l));
      if (!grads[l].weight.allFinite() || !grads[l].bias.allFinite())
        throw TrainingError("non-finite gradient in layer " + std::to_string(l));
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(steps_));
    auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
      m = adam.beta1 * m + (1.0 - adam.beta1) * g;
      v = (adam.beta2 * v.array() + (1.0 - adam.beta2) * g.array().square()).matrix();
      param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + adam.epsilon);
    };
    for (std::size_t l = 0; l < grads.size(); ++l) {
      update(params_[l].weight, moment1_[l].weight, moment2_[l].weight, grads[l].weight);
      update(params_[l].bias, moment1_[l].bias, moment2_[l].bias, grads[l].bias);
    }
  }

  void sync_target() { target_ = params_; }

  // Used by model deserialization.
  void restore(ParamSet params, ParamSet target, ParamSet m1, ParamSet m2, std::int64_t steps) {
    params_ = std::move(params);
    target_ = std::move(target);
    moment1_ = std::move(m1);
    moment2_ = std::move(m2);
    steps_ = steps;
  }

 private:
  ParamSet init_params(Rng& rng) const {
    ParamSet ps;
    int fan_in = input_dim_;
    std::vector<int> outs = hidden_;
    outs.push_back(output_dim_);
    for (int fan_out : outs) {
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      DenseLayer layer{Eigen::MatrixXd(fan_out, fan_in), Eigen::VectorXd::Zero(fan_out)};
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
      ps.push_back(std::move(layer));
      fan_in = fan_out;
    }
    return ps;
  }

  int input_dim_ = 0;
  int output_dim_ = 0;
  std::vector<int> hidden_;
  std::uint64_t seed_ = 0;
  std::int64_t steps_ = 0;
  double value_scale_ = 1.0;
  ParamSet params_;
  ParamSet target_;
  ParamSet moment1_;
  ParamSet moment2_;
};

// ---------------------------------------------------------------------------
// Batching helpers

inline Eigen::MatrixXd state_matrix(std::span<const StateVec> states) {
  if (states.empty()) return {};
  const auto d = static_cast<Eigen::Index>(states.front().features.size());
  Eigen::MatrixXd m(d, static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (static_cast<Eigen::Index>(states[i].features.size()) != d)
      throw UsageError("state batch has mixed dimensions");
    for (Eigen::Index r = 0; r < d; ++r) m(r, static_cast<Eigen::Index>(i)) = states[i].features[r];
  }
  return m;
}

inline std::vector<double> q_values(const QModel& model, const StateVec& s, bool use_target = false) {
  Eigen::Map<const Eigen::VectorXd> x(s.features.data(), static_cast<Eigen::Index>(s.features.size()));
  Eigen::MatrixXd q = model.forward(Eigen::MatrixXd(x), use_target) / model.value_scale();
  return {q.data(), q.data() + q.size()};
}

/// Highest-valued allowed action; ties go to the lowest index.
inline int greedy_action(std::span<const double> q, const EnvConfig* env = nullptr) {
  int best = -1;
  for (int a = 0; a < static_cast<int>(q.size()); ++a) {
    if (env && !env->action_allowed(a)) continue;
    if (best < 0 || q[a] > q[best]) best = a;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Model file: one JSON object with row-major parameter arrays at 17 digits.

namespace detail {

inline void append_params(std::string& s, const ParamSet& ps) {
  s += '[';
  for (std::size_t l = 0; l < ps.size(); ++l) {
    if (l) s += ',';
    const auto& w = ps[l].weight;
    s += "{\"rows\":" + std::to_string(w.rows()) + ",\"cols\":" + std::to_string(w.cols()) + ",\"weight\":";
    std::vector<double> row_major;
    row_major.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) row_major.push_back(w(r, c));
    append_real_array(s, row_major);
    s += ",\"bias\":";
    append_real_array(s, std::span<const double>(ps[l].bias.data(), static_cast<std::size_t>(ps[l].bias.size())));
    s += '}';
  }
  s += ']';
}

inline ParamSet parse_params(const nlohmann::json& j, const QModel& shape) {
  ParamSet ps;
  if (!j.is_array() || j.size() != shape.params().size()) throw LoadError("model: layer count mismatch");
  for (std::size_t l = 0; l < j.size(); ++l) {
    const auto rows = j[l].at("rows").get<Eigen::Index>();
    const auto cols = j[l].at("cols").get<Eigen::Index>();
    const auto w = j[l].at("weight").get<std::vector<double>>();
    const auto b = j[l].at("bias").get<std::vector<double>>();
    if (rows != shape.params()[l].weight.rows() || cols != shape.params()[l].weight.cols() ||
        static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows)
      throw LoadError("model: layer " + std::to_string(l) + " shape mismatch");
    DenseLayer layer{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * cols + c)];
    for (Eigen::Index r = 0; r < rows; ++r) layer.bias(r) = b[static_cast<std::size_t>(r)];
    ps.push_back(std::move(layer));
  }
  return ps;
}

}  // namespace detail

struct ModelFile {
  QModel model;
  nlohmann::json train_config;  // echo of the training configuration
  std::string train_config_hash;
};

inline std::string model_to_string(const QModel& model, const TrainConfig* train = nullptr) {
  std::string s = "{\"format\":\"mddl-qmodel\",\"version\":1";
  s += ",\"input_dim\":" + std::to_string(model.input_dim());
  s += ",\"hidden\":" + nlohmann::json(model.hidden()).dump();
  s += ",\"output_dim\":" + std::to_string(model.output_dim());
  s += ",\"seed\":" + std::to_string(model.seed());
  s += ",\"value_scale\":" + format_real(model.value_scale());
  if (train) {
    s += ",\"train_config\":" + to_json(*train).dump();
    s += ",\"train_config_hash\":" + json_quote(train_hash(*train));
  }
  s += ",\"layers\":";
  detail::append_params(s, model.params());
  s += ",\"target_layers\":";
  detail::append_params(s, model.target_params());
  s += ",\"adam\":{\"step\":" + std::to_string(model.step_count()) + ",\"m\":";
  detail::append_params(s, model.first_moment());
  s += ",\"v\":";
  detail::append_params(s, model.second_moment());
  s += "}}\n";
  return s;
}

inline void write_model(const std::filesystem::path& path, const QModel& model,
                        const TrainConfig* train = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << model_to_string(model, train);
  if (!os) throw Error("write to " + path.string() + " failed");
}

inline ModelFile model_from_string(const std::string& text) {
  ModelFile out;
  try {
    auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "mddl-qmodel") throw LoadError("not a model file");
    QModel model(j.at("input_dim").get<int>(), j.at("hidden").get<std::vector<int>>(),
                 j.at("output_dim").get<int>(), j.at("seed").get<std::uint64_t>());
    auto params = detail::parse_params(j.at("layers"), model);
    auto target = detail::parse_params(j.at("target_layers"), model);
    const auto& adam = j.at("adam");
    auto m1 = detail::parse_params(adam.at("m"), model);
    auto m2 = detail::parse_params(adam.at("v"), model);
    model.restore(std::move(params), std::move(target), std::move(m1), std::move(m2),
                  adam.at("step").get<std::int64_t>());
    if (j.contains("value_scale")) model.set_value_scale(j["value_scale"].get<double>());
    out.model = std::move(model);
    if (j.contains("train_config")) out.train_config = j["train_config"];
    if (j.contains("train_config_hash")) out.train_config_hash = j["train_config_hash"].get<std::string>();
  } catch (const LoadError&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError(std::string("model: ") + e.what());
  }
  return out;
}

inline ModelFile read_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open model " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return model_from_string(text);
}

inline std::string model_hash(const QModel& model) { return hex64(fnv1a64(model_to_string(model))); }

}  // namespace mddl

#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "demosel/envsim.hpp"

namespace demosel::harness {

using nlohmann::json;

/// Everything a run needs: task, architecture, and training hyperparameters.
/// `seed` drives parameter init and the trainer's RNG; the task has its own.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  TaskSpec task;
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items()) {
      if (!ok.count(k)) throw ConfigError("unknown field '" + qualified(k) + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw type_error(key, "a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw type_error(key, "an integer");
      if (std::is_unsigned_v<T> && v.get<long long>() < 0) throw ConfigError(qualified(key) + " must be nonnegative");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw type_error(key, "a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw type_error(key, "a string");
      out = v.get<std::string>();
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  Reader child(const char* key) const { return Reader(j_.at(key), qualified(key)); }

 private:
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  ConfigError type_error(const char* key, const char* what) const {
    return ConfigError("field '" + qualified(key) + "' must be " + what);
  }

  const json& j_;
  std::string path_;
};

inline AdvantageScale parse_scale(const std::string& s) {
  if (s == "std") return AdvantageScale::std_dev;
  if (s == "variance") return AdvantageScale::variance;
  throw ConfigError("field 'train.advantage_scale' must be 'std' or 'variance', got '" + s + "'");
}

inline Objective parse_objective(const std::string& s) {
  if (s == "policy-gradient") return Objective::policy_gradient;
  if (s == "preference") return Objective::preference;
  throw ConfigError("field 'train.objective' must be 'policy-gradient' or 'preference', got '" + s + "'");
}

inline Exploration parse_exploration(const std::string& s) {
  if (s == "stochastic-beam") return Exploration::stochastic_beam;
  if (s == "deterministic-beam") return Exploration::deterministic_beam;
  throw ConfigError("field 'train.exploration' must be 'stochastic-beam' or 'deterministic-beam', got '" + s + "'");
}

}  // namespace detail

inline std::string to_string(AdvantageScale s) { return s == AdvantageScale::std_dev ? "std" : "variance"; }
inline std::string to_string(Objective o) { return o == Objective::policy_gradient ? "policy-gradient" : "preference"; }
inline std::string to_string(Exploration e) {
  return e == Exploration::stochastic_beam ? "stochastic-beam" : "deterministic-beam";
}

inline TaskSpec parse_task(const json& j, const std::string& path = "") {
  detail::Reader r(j, path);
  r.allow({"kind", "n", "m", "d_e", "queries", "seed"});
  TaskSpec t;
  std::string kind = to_string(t.kind);
  r.get("kind", kind);
  t.kind = parse_task_kind(kind);
  r.get("n", t.n);
  r.get("m", t.m);
  r.get("d_e", t.d_e);
  r.get("queries", t.queries);
  r.get("seed", t.seed);
  envsim::validate(t);
  return t;
}

inline json task_to_json(const TaskSpec& t) {
  return {{"kind", to_string(t.kind)}, {"n", t.n}, {"m", t.m}, {"d_e", t.d_e}, {"queries", t.queries}, {"seed", t.seed}};
}

/// Parses and validates a config document. Missing fields take defaults;
/// unknown fields and type mismatches are rejected with the field path.
inline ExperimentConfig parse_config(const json& j) {
  detail::Reader r(j, "");
  r.allow({"seed", "task", "model", "train"});
  ExperimentConfig c;
  r.get("seed", c.seed);
  if (r.has("task")) c.task = parse_task(j.at("task"), "task");
  c.model.feature_dim = c.task.d_e;
  c.train.m = c.task.m;
  c.train.seed = c.seed;
  if (r.has("model")) {
    auto m = r.child("model");
    m.allow({"d_model", "encoder_layers", "decoder_layers", "heads", "ff_dim", "max_slots", "max_steps", "alpha_text",
             "alpha_image", "learn_alpha", "autoregressive", "init_std"});
    m.get("d_model", c.model.d_model);
    m.get("encoder_layers", c.model.encoder_layers);
    m.get("decoder_layers", c.model.decoder_layers);
    m.get("heads", c.model.heads);
    m.get("ff_dim", c.model.ff_dim);
    m.get("max_slots", c.model.max_slots);
    m.get("max_steps", c.model.max_steps);
    m.get("alpha_text", c.model.alpha_text);
    m.get("alpha_image", c.model.alpha_image);
    m.get("learn_alpha", c.model.learn_alpha);
    m.get("autoregressive", c.model.autoregressive);
    m.get("init_std", c.model.init_std);
  }
  if (r.has("train")) {
    auto t = r.child("train");
    t.allow({"epochs", "learning_rate", "batch_size", "c", "beam_width", "temperature", "weight_decay",
             "preference_beta", "advantage_scale", "objective", "exploration"});
    t.get("epochs", c.train.epochs);
    t.get("learning_rate", c.train.learning_rate);
    t.get("batch_size", c.train.batch_size);
    t.get("c", c.train.c);
    t.get("beam_width", c.train.beam_width);
    t.get("temperature", c.train.temperature);
    t.get("weight_decay", c.train.weight_decay);
    t.get("preference_beta", c.train.preference_beta);
    std::string s = to_string(c.train.advantage_scale);
    t.get("advantage_scale", s);
    c.train.advantage_scale = detail::parse_scale(s);
    s = to_string(c.train.objective);
    t.get("objective", s);
    c.train.objective = detail::parse_objective(s);
    s = to_string(c.train.exploration);
    t.get("exploration", s);
    c.train.exploration = detail::parse_exploration(s);
  }
  try {
    validate(c.model);
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  validate(c.train);
  if (c.task.n > c.model.max_slots) throw ConfigError("task.n exceeds model.max_slots");
  if (c.task.m > c.model.max_steps) throw ConfigError("task.m exceeds model.max_steps");
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  return {{"seed", c.seed},
          {"task", task_to_json(c.task)},
          {"model",
           {{"d_model", m.d_model},
            {"encoder_layers", m.encoder_layers},
            {"decoder_layers", m.decoder_layers},
            {"heads", m.heads},
            {"ff_dim", m.ff_dim},
            {"max_slots", m.max_slots},
            {"max_steps", m.max_steps},
            {"alpha_text", m.alpha_text},
            {"alpha_image", m.alpha_image},
            {"learn_alpha", m.learn_alpha},
            {"autoregressive", m.autoregressive},
            {"init_std", m.init_std}}},
          {"train",
           {{"epochs", t.epochs},
            {"learning_rate", t.learning_rate},
            {"batch_size", t.batch_size},
            {"c", t.c},
            {"beam_width", t.beam_width},
            {"temperature", t.temperature},
            {"weight_decay", t.weight_decay},
            {"preference_beta", t.preference_beta},
            {"advantage_scale", to_string(t.advantage_scale)},
            {"objective", to_string(t.objective)},
            {"exploration", to_string(t.exploration)}}}};
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(read_json_file(path)); }
inline TaskSpec load_task(const std::string& path) { return parse_task(read_json_file(path)); }

/// Applies a new experiment seed everywhere it is consumed.
inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = seed;
}

}  // namespace demosel::harness

#pragma once

// Run configuration: one JSON document with sections pipeline, model, train,
// augment and paths plus a top-level seed. Unknown keys are rejected.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "gaitformer/errors.hpp"
#include "gaitformer/model.hpp"
#include "gaitformer/pipeline.hpp"
#include "gaitformer/skeleton.hpp"
#include "gaitformer/train.hpp"

namespace gaitformer {

using json = nlohmann::json;

struct PathsConfig {
  std::string runs_root;       // empty: $GAITFORMER_RUNS, else ./runs
  std::string attribute_map;   // empty: the bundled map
  std::string scores_dir;      // per-tracklet provider score files; empty disables attributes
};

struct RunConfig {
  PipelineConfig pipeline;
  ModelConfig model;
  TrainConfig train;
  AugmentationParams augment;
  PathsConfig paths;
  std::uint64_t seed = 0;

  void validate() const {
    pipeline.validate();
    model.validate();
    train.validate();
    augment.validate();
    if (augment.crop_length > model.max_T) throw ConfigError("augment.crop_length exceeds model.max_T");
  }

  // Propagates the top-level seed into the sections that consume one.
  RunConfig resolved() const {
    RunConfig r = *this;
    r.train.seed = seed;
    r.augment.seed = seed;
    return r;
  }
};

namespace detail {

struct Field {
  std::string key;
  std::function<void(const json&)> set;
  std::function<json()> get;
};

inline double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + ": expected a number, got " + v.dump());
  return v.get<double>();
}

inline std::uint64_t as_uint(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && std::floor(d) == d && d < 1.8e19) return static_cast<std::uint64_t>(d);
  }
  throw ConfigError(key + ": expected a non-negative integer, got " + v.dump());
}

template <typename M>
Field bind_field(std::string key, M& member) {
  Field f;
  f.key = key;
  if constexpr (std::is_same_v<M, double>) {
    f.set = [&member, key](const json& v) { member = as_double(v, key); };
  } else if constexpr (std::is_same_v<M, std::string>) {
    f.set = [&member, key](const json& v) {
      if (!v.is_string()) throw ConfigError(key + ": expected a string, got " + v.dump());
      member = v.get<std::string>();
    };
  } else {
    f.set = [&member, key](const json& v) { member = static_cast<M>(as_uint(v, key)); };
  }
  f.get = [&member] { return json(member); };
  return f;
}

inline std::vector<Field> fields(RunConfig& c) {
  auto& p = c.pipeline;
  auto& m = c.model;
  auto& t = c.train;
  auto& a = c.augment;
  return {
      bind_field("seed", c.seed),
      bind_field("pipeline.T", p.T),
      bind_field("pipeline.reference_fps", p.reference_fps),
      bind_field("pipeline.source_fps", p.source_fps),
      bind_field("pipeline.min_avg_confidence", p.min_avg_confidence),
      bind_field("pipeline.min_feet_confidence", p.min_feet_confidence),
      bind_field("pipeline.leg_speed_min", p.leg_speed_min),
      bind_field("pipeline.leg_speed_max", p.leg_speed_max),
      bind_field("pipeline.tracker_iou_threshold", p.tracker_iou_threshold),
      bind_field("pipeline.tracker_max_age", p.tracker_max_age),
      bind_field("pipeline.k_augment", p.k_augment),
      bind_field("model.num_layers", m.num_layers),
      bind_field("model.d_model", m.d_model),
      bind_field("model.num_heads", m.num_heads),
      bind_field("model.d_ff", m.d_ff),
      bind_field("model.d_proj", m.d_proj),
      bind_field("model.max_T", m.max_T),
      bind_field("model.dropout", m.dropout),
      bind_field("train.batch_size", t.batch_size),
      bind_field("train.tau", t.tau),
      bind_field("train.lambda", t.lambda),
      bind_field("train.lr_min", t.lr_min),
      bind_field("train.lr_max", t.lr_max),
      bind_field("train.cycle_epochs", t.cycle_epochs),
      bind_field("train.total_epochs", t.total_epochs),
      bind_field("train.finetune_lr0", t.finetune_lr0),
      bind_field("train.finetune_epochs", t.finetune_epochs),
      bind_field("train.llrd_decay", t.llrd_decay),
      bind_field("train.adam_beta1", t.adam_beta1),
      bind_field("train.adam_beta2", t.adam_beta2),
      bind_field("train.adam_eps", t.adam_eps),
      bind_field("augment.crop_length", a.crop_length),
      bind_field("augment.flip_probability", a.flip_probability),
      bind_field("augment.pace_min", a.pace_min),
      bind_field("augment.pace_max", a.pace_max),
      bind_field("augment.noise_sigma", a.noise_sigma),
      bind_field("paths.runs_root", c.paths.runs_root),
      bind_field("paths.attribute_map", c.paths.attribute_map),
      bind_field("paths.scores_dir", c.paths.scores_dir),
  };
}

inline void flatten_json(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.emplace_back(prefix, j);
  }
}

}  // namespace detail

// Assigns one dotted key; the key must name a known field.
inline void set_config_value(RunConfig& c, const std::string& key, const json& value) {
  for (auto& f : detail::fields(c))
    if (f.key == key) return f.set(value);
  throw ConfigError("unknown configuration key '" + key + "'");
}

// Parses "key=value"; the value is read as JSON when possible, else as a string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded()) v = raw;
  set_config_value(c, key, v);
}

inline void apply_json(RunConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("configuration root must be an object");
  std::vector<std::pair<std::string, json>> flat;
  detail::flatten_json(j, "", flat);
  for (const auto& [k, v] : flat) set_config_value(c, k, v);
}

inline json config_to_json(const RunConfig& config) {
  RunConfig c = config;
  json j = json::object();
  for (auto& f : detail::fields(c)) {
    const auto dot = f.key.find('.');
    if (dot == std::string::npos) j[f.key] = f.get();
    else j[f.key.substr(0, dot)][f.key.substr(dot + 1)] = f.get();
  }
  return j;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j = json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  RunConfig c;
  apply_json(c, j);
  return c;
}

inline std::filesystem::path runs_root(const RunConfig& c) {
  if (!c.paths.runs_root.empty()) return c.paths.runs_root;
  if (const char* env = std::getenv("GAITFORMER_RUNS"); env && *env) return env;
  return "runs";
}

// Creates the directory and stores the resolved configuration in config.json.
inline void write_config_snapshot(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.json");
  if (!out) throw DataError("cannot write " + (dir / "config.json").string());
  out << config_to_json(c).dump(2) << '\n';
}

}  // namespace gaitformer

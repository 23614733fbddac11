#pragma once

// Experiment configuration: JSON schema, presets and validation.
//
// Top-level keys: preset, model, strategy, task, train, output_dir.
// Unknown keys anywhere are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include "json.hpp"
#include "perft/analysis.hpp"

namespace perft {

using json = nlohmann::ordered_json;

struct ExperimentConfig {
  std::optional<std::string> preset;
  ModelConfig model;
  std::optional<std::uint64_t> model_activated_total;
  bool counting_only = false;
  PeftStrategyConfig strategy;
  SyntheticTaskSpec task;
  TrainConfig train;
  std::string output_dir = "runs/default";

  CountSpec count_spec() const {
    CountSpec s;
    s.mode = strategy.variant;
    s.num_layers = model.num_layers;
    s.d_model = model.moe.d_model;
    s.d_ffn = model.moe.d_ffn;
    s.num_experts = model.moe.num_experts;
    s.top_k = model.moe.top_k;
    s.ffn_form = model.moe.ffn_form;
    s.peft_experts = strategy.num_experts;
    s.peft_top_k = strategy.top_k;
    s.bottleneck = strategy.variant == Variant::none ? 0 : strategy.bottleneck;
    s.model_activated_total = model_activated_total;
    return s;
  }

  /// Validates every section against its owning module's constraints.
  void validate() const {
    auto scoped = [](const char* section, auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        const std::string what = e.what();
        const auto colon = what.find(": ");
        throw ConfigError(std::string(section) + "." + e.field(),
                          colon == std::string::npos ? what : what.substr(colon + 2));
      }
    };
    scoped("model", [&] { model.validate(); });
    scoped("strategy", [&] { strategy.validate(); });
    scoped("task", [&] { task.validate(); });
    scoped("train", [&] { train.validate(); });
  }
};

/// Model dimensions of a named preset.
struct Preset {
  ModelConfig model;
  std::optional<std::uint64_t> model_activated_total;
  bool counting_only = false;
};

inline std::optional<Preset> find_preset(const std::string& name) {
  Preset p;
  if (name == "toy") {
    p.model.num_layers = 2;
    p.model.moe = MoeLayerConfig{16, 32, 4, 2, FfnForm::glu, false};
    return p;
  }
  if (name == "olmoe-dims") {
    p.model.num_layers = 16;
    p.model.moe = MoeLayerConfig{2048, 1024, 64, 8, FfnForm::glu, false};
    p.model_activated_total = 1'280'000'000ULL;
    p.counting_only = true;
    return p;
  }
  return std::nullopt;
}

namespace config_detail {

inline void reject_unknown(const json& obj, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where, "must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, _] : obj.items()) {
    if (!ok.count(k)) throw ConfigError(where.empty() ? k : where + "." + k, "unknown key");
  }
}

inline std::string path(const std::string& where, const char* key) {
  return where.empty() ? key : where + "." + key;
}

inline void read_count(const json& obj, const std::string& where, const char* key,
                       std::size_t& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(path(where, key), "expected a non-negative integer");
  }
  out = v.get<std::size_t>();
}

inline void read_u64(const json& obj, const std::string& where, const char* key,
                     std::uint64_t& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(path(where, key), "expected a non-negative integer");
  }
  out = v.get<std::uint64_t>();
}

inline void read_real(const json& obj, const std::string& where, const char* key, double& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(path(where, key), "expected a number");
  out = v.get<double>();
}

inline void read_bool(const json& obj, const std::string& where, const char* key, bool& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) throw ConfigError(path(where, key), "expected true or false");
  out = v.get<bool>();
}

inline std::optional<std::string> read_string(const json& obj, const std::string& where,
                                              const char* key) {
  if (!obj.contains(key)) return std::nullopt;
  const auto& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(path(where, key), "expected a string");
  return v.get<std::string>();
}

}  // namespace config_detail

inline void apply_strategy_json(const json& s, PeftStrategyConfig& st) {
  using namespace config_detail;
  reject_unknown(s, "strategy",
                 {"variant", "M", "K_tilde", "arch", "D_B", "alpha", "renormalize_peft_gates",
                  "dropout"});
  if (auto v = read_string(s, "strategy", "variant")) {
    auto parsed = parse_variant(*v);
    if (!parsed) throw ConfigError("strategy.variant", "unknown variant '" + *v + "'");
    st.variant = *parsed;
  }
  read_count(s, "strategy", "M", st.num_experts);
  read_count(s, "strategy", "K_tilde", st.top_k);
  if (auto v = read_string(s, "strategy", "arch")) {
    if (*v == "lora") {
      st.arch = AdapterArch::lora;
    } else if (*v == "parallel_adapter") {
      st.arch = AdapterArch::parallel_adapter;
    } else {
      throw ConfigError("strategy.arch", "expected 'lora' or 'parallel_adapter'");
    }
  }
  read_count(s, "strategy", "D_B", st.bottleneck);
  if (s.contains("alpha")) {
    double a = 0.0;
    read_real(s, "strategy", "alpha", a);
    st.alpha = a;
  }
  if (s.contains("renormalize_peft_gates")) {
    bool b = false;
    read_bool(s, "strategy", "renormalize_peft_gates", b);
    st.renormalize_gates = b;
  }
  read_real(s, "strategy", "dropout", st.dropout);
}

/// Parses and validates. Throws ConfigError naming the offending key path.
inline ExperimentConfig parse_experiment(const json& j) {
  using namespace config_detail;
  reject_unknown(j, "", {"preset", "model", "strategy", "task", "train", "output_dir"});
  ExperimentConfig c;

  if (auto p = read_string(j, "", "preset")) {
    auto preset = find_preset(*p);
    if (!preset) throw ConfigError("preset", "unknown preset '" + *p + "'");
    c.preset = *p;
    c.model = preset->model;
    c.model_activated_total = preset->model_activated_total;
    c.counting_only = preset->counting_only;
  } else if (!j.contains("model")) {
    throw ConfigError("model", "required unless a preset is given");
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, "model",
                   {"L", "D", "D_ffn", "N", "K", "ffn_form", "renormalize_gates", "causal",
                    "pre_norm", "model_activated_total"});
    if (!c.preset) {
      for (const char* req : {"L", "D", "D_ffn", "N", "K"}) {
        if (!m.contains(req)) throw ConfigError(std::string("model.") + req, "missing");
      }
    }
    read_count(m, "model", "L", c.model.num_layers);
    read_count(m, "model", "D", c.model.moe.d_model);
    read_count(m, "model", "D_ffn", c.model.moe.d_ffn);
    read_count(m, "model", "N", c.model.moe.num_experts);
    read_count(m, "model", "K", c.model.moe.top_k);
    if (auto f = read_string(m, "model", "ffn_form")) {
      if (*f == "glu") {
        c.model.moe.ffn_form = FfnForm::glu;
      } else if (*f == "vanilla") {
        c.model.moe.ffn_form = FfnForm::vanilla;
      } else {
        throw ConfigError("model.ffn_form", "expected 'glu' or 'vanilla'");
      }
    }
    read_bool(m, "model", "renormalize_gates", c.model.moe.renormalize_gates);
    read_bool(m, "model", "causal", c.model.causal);
    read_bool(m, "model", "pre_norm", c.model.pre_norm);
    if (m.contains("model_activated_total")) {
      std::uint64_t v = 0;
      read_u64(m, "model", "model_activated_total", v);
      c.model_activated_total = v;
    }
  }

  if (j.contains("strategy")) apply_strategy_json(j.at("strategy"), c.strategy);

  c.task.d_model = c.model.moe.d_model;
  if (j.contains("task")) {
    const auto& t = j.at("task");
    reject_unknown(t, "task", {"kind", "num_clusters", "T", "samples", "noise_std", "seed"});
    if (auto k = read_string(t, "task", "kind")) {
      if (*k == "cluster_classification") {
        c.task.kind = TaskKind::cluster_classification;
      } else if (*k == "cluster_regression") {
        c.task.kind = TaskKind::cluster_regression;
      } else {
        throw ConfigError("task.kind", "expected 'cluster_classification' or 'cluster_regression'");
      }
    }
    read_count(t, "task", "num_clusters", c.task.num_clusters);
    read_count(t, "task", "T", c.task.tokens);
    read_count(t, "task", "samples", c.task.samples);
    read_real(t, "task", "noise_std", c.task.noise_std);
    read_u64(t, "task", "seed", c.task.seed);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t, "train",
                   {"lr", "warmup_steps", "batch_size", "epochs", "aux_coef", "weight_decay",
                    "beta1", "beta2", "adam_eps", "seed"});
    read_real(t, "train", "lr", c.train.lr);
    read_count(t, "train", "warmup_steps", c.train.warmup_steps);
    read_count(t, "train", "batch_size", c.train.batch_size);
    read_count(t, "train", "epochs", c.train.epochs);
    read_real(t, "train", "aux_coef", c.train.aux_coef);
    read_real(t, "train", "weight_decay", c.train.weight_decay);
    read_real(t, "train", "beta1", c.train.beta1);
    read_real(t, "train", "beta2", c.train.beta2);
    read_real(t, "train", "adam_eps", c.train.adam_eps);
    read_u64(t, "train", "seed", c.train.seed);
  }

  if (auto o = read_string(j, "", "output_dir")) c.output_dir = *o;
  c.validate();
  return c;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("config", "cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
}

inline ExperimentConfig load_experiment(const std::filesystem::path& p) {
  return parse_experiment(read_json_file(p));
}

/// Full, explicit form of a config; parse_experiment(to_json(c)) == c.
inline json to_json(const ExperimentConfig& c) {
  json j;
  if (c.preset) j["preset"] = *c.preset;
  json m;
  m["L"] = c.model.num_layers;
  m["D"] = c.model.moe.d_model;
  m["D_ffn"] = c.model.moe.d_ffn;
  m["N"] = c.model.moe.num_experts;
  m["K"] = c.model.moe.top_k;
  m["ffn_form"] = to_string(c.model.moe.ffn_form);
  m["renormalize_gates"] = c.model.moe.renormalize_gates;
  m["causal"] = c.model.causal;
  m["pre_norm"] = c.model.pre_norm;
  if (c.model_activated_total) m["model_activated_total"] = *c.model_activated_total;
  j["model"] = m;
  json s;
  s["variant"] = to_string(c.strategy.variant);
  s["M"] = c.strategy.num_experts;
  s["K_tilde"] = c.strategy.top_k;
  s["arch"] = to_string(c.strategy.arch);
  s["D_B"] = c.strategy.bottleneck;
  if (c.strategy.alpha) s["alpha"] = *c.strategy.alpha;
  if (c.strategy.renormalize_gates) s["renormalize_peft_gates"] = *c.strategy.renormalize_gates;
  s["dropout"] = c.strategy.dropout;
  j["strategy"] = s;
  json t;
  t["kind"] = to_string(c.task.kind);
  t["num_clusters"] = c.task.num_clusters;
  t["T"] = c.task.tokens;
  t["samples"] = c.task.samples;
  t["noise_std"] = c.task.noise_std;
  t["seed"] = c.task.seed;
  j["task"] = t;
  json tr;
  tr["lr"] = c.train.lr;
  tr["warmup_steps"] = c.train.warmup_steps;
  tr["batch_size"] = c.train.batch_size;
  tr["epochs"] = c.train.epochs;
  tr["aux_coef"] = c.train.aux_coef;
  tr["weight_decay"] = c.train.weight_decay;
  tr["beta1"] = c.train.beta1;
  tr["beta2"] = c.train.beta2;
  tr["adam_eps"] = c.train.adam_eps;
  tr["seed"] = c.train.seed;
  j["train"] = tr;
  j["output_dir"] = c.output_dir;
  return j;
}

inline json to_json(const ParamReport& r) {
  json j;
  j["trainable_total"] = r.trainable_total;
  j["trainable_activated_per_token"] = r.trainable_activated_per_token;
  j["model_activated_total"] = r.model_activated_total;
  j["activated_efficiency_percent"] = r.activated_efficiency;
  return j;
}

inline json to_json(const RoutingStats& s) {
  json j;
  j["token_fraction"] = s.token_fraction;
  j["mean_prob"] = s.mean_prob;
  j["entropy"] = s.entropy;
  j["tokens"] = s.tokens;
  return j;
}

}  // namespace perft

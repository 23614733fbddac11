#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "perft/strategies.hpp"

namespace perft {

enum class TaskKind { cluster_regression, cluster_classification };

inline const char* to_string(TaskKind k) {
  return k == TaskKind::cluster_regression ? "cluster_regression" : "cluster_classification";
}

struct ModelConfig {
  std::size_t num_layers = 2;  // L
  MoeLayerConfig moe;
  bool causal = false;
  bool pre_norm = false;

  void validate() const {
    if (num_layers < 1) throw ConfigError("L", "must be >= 1");
    moe.validate();
  }
};

struct ModelOutput {
  Tensor hidden;   // T x D, final layer output
  Tensor lb_moe;   // summed over layers
  Tensor z_moe;
  Tensor lb_peft;
  std::vector<LayerStats> layers;
};

/// A stack of MoE transformer layers with one PEFT strategy applied to every
/// layer, plus a task readout.
///
/// Classification reads out from the mean-pooled final hidden state
/// (1 x classes); regression reads out per token (T x output_dim).
class Model {
 public:
  ModelConfig config;
  PeftStrategyConfig strategy;
  TaskKind task = TaskKind::cluster_classification;
  std::vector<TransformerLayer> layers;
  Parameter readout;  // D x output_dim

  ModelOutput forward(const Tensor& x, const ForwardOptions& opts = {}) const {
    ModelOutput out;
    Tensor cur = x;
    for (const auto& layer : layers) {
      LayerOutput lo = layer_forward(layer, cur, opts);
      cur = lo.x;
      out.lb_moe = out.lb_moe.defined() ? add(out.lb_moe, lo.aux.lb_moe) : lo.aux.lb_moe;
      out.z_moe = out.z_moe.defined() ? add(out.z_moe, lo.aux.z_moe) : lo.aux.z_moe;
      out.lb_peft = out.lb_peft.defined() ? add(out.lb_peft, lo.aux.lb_peft) : lo.aux.lb_peft;
      out.layers.push_back(std::move(lo.stats));
    }
    out.hidden = cur;
    return out;
  }

  Tensor head(const Tensor& hidden) const {
    if (task == TaskKind::cluster_classification) return matmul(mean_rows(hidden), readout.tensor());
    return matmul(hidden, readout.tensor());
  }

  ParamRefs parameters() {
    ParamRefs out;
    for (auto& l : layers) l.params(out);
    out.push_back(&readout);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto refs = const_cast<Model*>(this)->parameters();
    return {refs.begin(), refs.end()};
  }

  /// Backbone frozen, adapters / PEFT routers / readout trainable.
  void freeze_base() {
    for (auto* p : parameters()) p->set_frozen(p->role() == ParamRole::base);
  }

  void unfreeze_all() {
    for (auto* p : parameters()) p->set_frozen(false);
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::size_t d_model() const { return config.moe.d_model; }
  std::size_t output_dim() const { return readout.value().cols(); }
};

/// Deterministic construction. The backbone and readout draw from one stream
/// seeded by `seed`, adapters from a second, so every strategy built with the
/// same seed shares a bit-identical backbone.
inline Model build_model(const ModelConfig& cfg, const PeftStrategyConfig& strategy, TaskKind task,
                         std::size_t output_dim, std::uint64_t seed) {
  cfg.validate();
  strategy.validate();
  if (output_dim < 1) throw ConfigError("output_dim", "must be >= 1");
  Rng base_rng(seed);
  Rng adapter_rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  Model m;
  m.config = cfg;
  m.strategy = strategy;
  m.task = task;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    m.layers.push_back(build_layer(l, cfg.moe, strategy, base_rng, adapter_rng, cfg.causal,
                                   cfg.pre_norm));
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.moe.d_model));
  m.readout = Parameter("readout", init_matrix(cfg.moe.d_model, output_dim, init::ScaledNormal{s},
                                               base_rng),
                        ParamRole::head);
  m.freeze_base();
  return m;
}

}  // namespace perft

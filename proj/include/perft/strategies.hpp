#pragma once

// Composition of bottleneck adapters with a frozen MoE transformer layer.
//
//   none           x = MoE(h) + h
//   perft_r        x = MoE(h) + sum_j G~_j(h) Δ_j(h) + h     own router over M adapters
//   perft_e        x = sum_i G_i(h) (E_i + Δ_i)(h) + h       reuses the MoE router, M == N
//   perft_d        x = MoE(h) + sum_j Δ_j(h) + h             M always-on adapters
//   perft_s        x = MoE(h) + Δ_0(h) + h                   one always-on adapter
//   baseline_qv    LoRA on the attention W_q and W_v projections
//   baseline_gate  LoRA on the router matrix W_g
//
// with h = SelfAttn(x_prev) + x_prev in every case.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "perft/adapters.hpp"
#include "perft/moe.hpp"

namespace perft {

enum class Variant { none, perft_r, perft_e, perft_d, perft_s, baseline_qv, baseline_gate };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::none: return "none";
    case Variant::perft_r: return "perft_r";
    case Variant::perft_e: return "perft_e";
    case Variant::perft_d: return "perft_d";
    case Variant::perft_s: return "perft_s";
    case Variant::baseline_qv: return "baseline_qv";
    case Variant::baseline_gate: return "baseline_gate";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(const std::string& s) {
  if (s == "none") return Variant::none;
  if (s == "perft_r" || s == "perft") return Variant::perft_r;
  if (s == "perft_e") return Variant::perft_e;
  if (s == "perft_d") return Variant::perft_d;
  if (s == "perft_s") return Variant::perft_s;
  if (s == "baseline_qv" || s == "baseline_attn_lora") return Variant::baseline_qv;
  if (s == "baseline_gate" || s == "baseline_gate_lora") return Variant::baseline_gate;
  return std::nullopt;
}

struct PeftStrategyConfig {
  Variant variant = Variant::none;
  std::size_t num_experts = 1;  // M
  std::size_t top_k = 1;        // K~
  AdapterArch arch = AdapterArch::lora;
  std::size_t bottleneck = 4;   // D_B; the LoRA rank r for the baselines
  std::optional<double> alpha;  // defaults to 2 * D_B
  std::optional<bool> renormalize_gates;  // defaults to the MoE router's policy
  double dropout = 0.0;                   // on adapter outputs, training only

  double effective_alpha() const { return alpha ? *alpha : 2.0 * static_cast<double>(bottleneck); }

  bool effective_renormalize(const MoeLayerConfig& moe) const {
    return renormalize_gates ? *renormalize_gates : moe.renormalize_gates;
  }

  /// Number of Δ blocks the variant owns per layer.
  std::size_t adapter_count(const MoeLayerConfig& moe) const {
    switch (variant) {
      case Variant::perft_r:
      case Variant::perft_d: return num_experts;
      case Variant::perft_e: return moe.num_experts;
      case Variant::perft_s: return 1;
      default: return 0;
    }
  }

  void validate() const {
    if (variant == Variant::none) return;
    if (bottleneck < 1) throw ConfigError("D_B", "must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout", "must be in [0, 1)");
    if (alpha && !std::isfinite(*alpha)) throw ConfigError("alpha", "must be finite");
    if (variant == Variant::perft_r || variant == Variant::perft_d) {
      if (num_experts < 1) throw ConfigError("M", "must be >= 1");
    }
    if (variant == Variant::perft_r && (top_k < 1 || top_k > num_experts)) {
      throw ConfigError("K_tilde", "must satisfy 1 <= K_tilde <= M (K_tilde=" +
                                       std::to_string(top_k) + ", M=" +
                                       std::to_string(num_experts) + ")");
    }
    if ((variant == Variant::baseline_qv || variant == Variant::baseline_gate) &&
        arch != AdapterArch::lora) {
      throw ConfigError("arch", "baselines are LoRA-only");
    }
  }
};

struct AttentionBlock {
  Parameter w_q, w_k, w_v, w_o;  // D x D each, single head
  std::optional<BottleneckAdapter> lora_q, lora_v;
};

/// Low-rank update of the router matrix: logits += scale * (h A) B.
struct GateLora {
  Parameter a;  // D x r
  Parameter b;  // r x N, zero-initialised
  double scale = 1.0;
};

struct TransformerLayer {
  std::size_t index = 0;
  MoeLayerConfig moe;
  PeftStrategyConfig strategy;
  bool causal = false;
  bool pre_norm = false;

  AttentionBlock attn;
  std::vector<FfnExpert> experts;
  Router router;

  std::vector<BottleneckAdapter> adapters;
  std::optional<Router> peft_router;
  std::optional<GateLora> gate_lora;

  void params(ParamRefs& out) {
    for (auto* p : {&attn.w_q, &attn.w_k, &attn.w_v, &attn.w_o}) out.push_back(p);
    if (attn.lora_q) attn.lora_q->params(out);
    if (attn.lora_v) attn.lora_v->params(out);
    for (auto& e : experts) e.params(out);
    out.push_back(&router.w_g);
    if (gate_lora) {
      out.push_back(&gate_lora->a);
      out.push_back(&gate_lora->b);
    }
    for (auto& a : adapters) a.params(out);
    if (peft_router) out.push_back(&peft_router->w_g);
  }
};

struct ForwardOptions {
  Rng* dropout_rng = nullptr;  // dropout is active only when set
};

struct AuxLosses {
  Tensor lb_moe;
  Tensor z_moe;
  Tensor lb_peft;  // constant 0 for variants without a PEFT router
};

struct LayerStats {
  RouterOutput moe_routing;
  std::optional<RouterOutput> peft_routing;
};

struct LayerOutput {
  Tensor x;
  AuxLosses aux;
  LayerStats stats;
};

/// Builds layer `index`. Backbone weights come from `base_rng` and adapter
/// weights from `adapter_rng`, so the backbone is identical across strategies
/// that share a seed.
inline TransformerLayer build_layer(std::size_t index, const MoeLayerConfig& moe,
                                    const PeftStrategyConfig& strategy, Rng& base_rng,
                                    Rng& adapter_rng, bool causal = false, bool pre_norm = false) {
  moe.validate();
  strategy.validate();
  const std::size_t d = moe.d_model;
  const std::string prefix = "layers." + std::to_string(index);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));

  TransformerLayer layer;
  layer.index = index;
  layer.moe = moe;
  layer.strategy = strategy;
  layer.causal = causal;
  layer.pre_norm = pre_norm;

  auto attn_w = [&](const char* n) {
    return Parameter(prefix + ".attn." + n, init_matrix(d, d, init::ScaledNormal{s}, base_rng),
                     ParamRole::base);
  };
  layer.attn.w_q = attn_w("w_q");
  layer.attn.w_k = attn_w("w_k");
  layer.attn.w_v = attn_w("w_v");
  layer.attn.w_o = attn_w("w_o");
  for (std::size_t i = 0; i < moe.num_experts; ++i) {
    layer.experts.push_back(init_expert(d, moe.d_ffn, moe.ffn_form, base_rng,
                                        prefix + ".experts." + std::to_string(i)));
  }
  layer.router = init_router(d, moe.num_experts, base_rng, prefix + ".router.w_g");

  const double alpha = strategy.effective_alpha();
  const std::size_t db = strategy.bottleneck;
  switch (strategy.variant) {
    case Variant::none: break;
    case Variant::perft_r:
      layer.peft_router =
          init_router(d, strategy.num_experts, adapter_rng, prefix + ".peft_router.w_g",
                      ParamRole::peft_router);
      [[fallthrough]];
    case Variant::perft_e:
    case Variant::perft_d:
    case Variant::perft_s:
      for (std::size_t j = 0; j < strategy.adapter_count(moe); ++j) {
        layer.adapters.push_back(init_adapter(d, db, strategy.arch, alpha, adapter_rng,
                                              prefix + ".adapters." + std::to_string(j)));
      }
      break;
    case Variant::baseline_qv:
      layer.attn.lora_q = init_adapter(d, db, AdapterArch::lora, alpha, adapter_rng,
                                       prefix + ".attn.lora_q");
      layer.attn.lora_v = init_adapter(d, db, AdapterArch::lora, alpha, adapter_rng,
                                       prefix + ".attn.lora_v");
      break;
    case Variant::baseline_gate:
      layer.gate_lora = GateLora{
          Parameter(prefix + ".router.lora_a", init_matrix(d, db, init::ScaledNormal{s}, adapter_rng),
                    ParamRole::adapter),
          Parameter(prefix + ".router.lora_b",
                    init_matrix(db, moe.num_experts, init::Zeros{}, adapter_rng), ParamRole::adapter),
          alpha / static_cast<double>(db)};
      break;
  }
  return layer;
}

namespace strategy_detail {

inline Tensor block_input(const TransformerLayer& layer, const Tensor& h) {
  return layer.pre_norm ? rmsnorm_rows(h) : h;
}

inline Tensor apply_dropout(const TransformerLayer& layer, const Tensor& y,
                            const ForwardOptions& opts) {
  const double p = layer.strategy.dropout;
  if (!opts.dropout_rng || p <= 0.0) return y;
  Matrix mask(y.rows(), y.cols());
  for (auto& m : mask.data()) m = opts.dropout_rng->uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  return hadamard(y, Tensor::constant(std::move(mask)));
}

inline Tensor delta(const TransformerLayer& layer, std::size_t j, const Tensor& u,
                    const ForwardOptions& opts) {
  return apply_dropout(layer, adapter_forward(layer.adapters[j], u), opts);
}

inline void require_variant(const TransformerLayer& layer, Variant v, const char* op) {
  if (layer.strategy.variant != v) {
    throw ConfigError("variant", std::string(op) + " called on a " +
                                     to_string(layer.strategy.variant) + " layer");
  }
}

inline Tensor zero_scalar() { return Tensor::constant(Matrix(1, 1)); }

}  // namespace strategy_detail

/// Routing logits h W_g, plus the low-rank router update when present.
inline Tensor router_logits(const TransformerLayer& layer, const Tensor& u) {
  Tensor logits = matmul(u, layer.router.w_g.tensor());
  if (layer.gate_lora) {
    const auto& g = *layer.gate_lora;
    logits = add(logits, scale(matmul(matmul(u, g.a.tensor()), g.b.tensor()), g.scale));
  }
  return logits;
}

/// The frozen MoE block on block input u (with the router LoRA, if any).
inline MoeOutput base_moe(const TransformerLayer& layer, const Tensor& u) {
  if (u.cols() != layer.moe.d_model) {
    throw ShapeError("moe: input " + u.value().shape_str() + " for D=" +
                     std::to_string(layer.moe.d_model));
  }
  MoeOutput o;
  o.routing = route_logits(router_logits(layer, u), layer.moe.top_k, layer.moe.renormalize_gates);
  o.out = sparse_combine(o.routing, u, [&](std::size_t i, const Tensor& x) {
    return ffn_forward(layer.experts[i], x);
  });
  return o;
}

/// Single-head scaled dot-product attention. LoRA on W_q / W_v is applied as
/// a sum of projections: x W_q + Δ_q(x).
inline Tensor attention_forward(const TransformerLayer& layer, const Tensor& x, bool causal) {
  const std::size_t d = layer.moe.d_model;
  if (x.cols() != d) {
    throw ShapeError("attention_forward: input " + x.value().shape_str() + " for D=" +
                     std::to_string(d));
  }
  const auto& at = layer.attn;
  Tensor q = matmul(x, at.w_q.tensor());
  if (at.lora_q) q = add(q, adapter_forward(*at.lora_q, x));
  Tensor k = matmul(x, at.w_k.tensor());
  Tensor v = matmul(x, at.w_v.tensor());
  if (at.lora_v) v = add(v, adapter_forward(*at.lora_v, x));
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = softmax_rows(scores, causal);
  return matmul(matmul(weights, v), at.w_o.tensor());
}

namespace strategy_detail {

inline LayerOutput finish(const TransformerLayer& layer, MoeOutput moe, std::optional<Tensor> peft,
                          const Tensor& h, std::optional<RouterOutput> peft_routing) {
  LayerOutput o;
  Tensor ffn = peft ? add(moe.out, *peft) : moe.out;
  o.x = add(ffn, h);
  o.aux.lb_moe = load_balance_loss(moe.routing, layer.moe.num_experts);
  o.aux.z_moe = router_z_loss(moe.routing.logits);
  o.aux.lb_peft = peft_routing ? load_balance_loss(*peft_routing, peft_routing->num_experts())
                               : zero_scalar();
  o.stats.moe_routing = std::move(moe.routing);
  o.stats.peft_routing = std::move(peft_routing);
  return o;
}

}  // namespace strategy_detail

/// PERFT-R: MoE(h) + sum_j G~_j(h) Δ_j(h) + h with an independent top-K~ router.
inline LayerOutput perft_forward(const TransformerLayer& layer, const Tensor& h,
                                 const ForwardOptions& opts = {}) {
  strategy_detail::require_variant(layer, Variant::perft_r, "perft_forward");
  const Tensor u = strategy_detail::block_input(layer, h);
  MoeOutput moe = base_moe(layer, u);
  RouterOutput pr = route(*layer.peft_router, u, layer.strategy.top_k,
                          layer.strategy.effective_renormalize(layer.moe));
  Tensor peft = sparse_combine(pr, u, [&](std::size_t j, const Tensor& x) {
    return strategy_detail::delta(layer, j, x, opts);
  });
  return strategy_detail::finish(layer, std::move(moe), peft, h, std::move(pr));
}

/// PERFT-E: sum_i G_i(h) (E_i + Δ_i)(h) + h, one routing pass shared by both.
inline LayerOutput perft_e_forward(const TransformerLayer& layer, const Tensor& h,
                                   const ForwardOptions& opts = {}) {
  strategy_detail::require_variant(layer, Variant::perft_e, "perft_e_forward");
  if (layer.adapters.size() != layer.moe.num_experts) {
    throw ConfigError("M", "perft_e needs one adapter per FFN expert (" +
                               std::to_string(layer.adapters.size()) + " adapters, N=" +
                               std::to_string(layer.moe.num_experts) + ")");
  }
  const Tensor u = strategy_detail::block_input(layer, h);
  MoeOutput moe;
  moe.routing = route_logits(router_logits(layer, u), layer.moe.top_k, layer.moe.renormalize_gates);
  moe.out = sparse_combine(moe.routing, u, [&](std::size_t i, const Tensor& x) {
    return add(ffn_forward(layer.experts[i], x), strategy_detail::delta(layer, i, x, opts));
  });
  return strategy_detail::finish(layer, std::move(moe), std::nullopt, h, std::nullopt);
}

/// PERFT-D: MoE(h) + sum_j Δ_j(h) + h, every adapter active for every token.
inline LayerOutput perft_d_forward(const TransformerLayer& layer, const Tensor& h,
                                   const ForwardOptions& opts = {}) {
  strategy_detail::require_variant(layer, Variant::perft_d, "perft_d_forward");
  const Tensor u = strategy_detail::block_input(layer, h);
  MoeOutput moe = base_moe(layer, u);
  Tensor peft = strategy_detail::delta(layer, 0, u, opts);
  for (std::size_t j = 1; j < layer.adapters.size(); ++j) {
    peft = add(peft, strategy_detail::delta(layer, j, u, opts));
  }
  return strategy_detail::finish(layer, std::move(moe), peft, h, std::nullopt);
}

/// PERFT-S: MoE(h) + Δ_0(h) + h.
inline LayerOutput perft_s_forward(const TransformerLayer& layer, const Tensor& h,
                                   const ForwardOptions& opts = {}) {
  strategy_detail::require_variant(layer, Variant::perft_s, "perft_s_forward");
  const Tensor u = strategy_detail::block_input(layer, h);
  MoeOutput moe = base_moe(layer, u);
  return strategy_detail::finish(layer, std::move(moe), strategy_detail::delta(layer, 0, u, opts),
                                 h, std::nullopt);
}

/// FFN half of the layer for whichever strategy is active.
inline LayerOutput strategy_forward(const TransformerLayer& layer, const Tensor& h,
                                    const ForwardOptions& opts = {}) {
  switch (layer.strategy.variant) {
    case Variant::perft_r: return perft_forward(layer, h, opts);
    case Variant::perft_e: return perft_e_forward(layer, h, opts);
    case Variant::perft_d: return perft_d_forward(layer, h, opts);
    case Variant::perft_s: return perft_s_forward(layer, h, opts);
    case Variant::none:
    case Variant::baseline_qv:
    case Variant::baseline_gate: break;
  }
  MoeOutput moe = base_moe(layer, strategy_detail::block_input(layer, h));
  return strategy_detail::finish(layer, std::move(moe), std::nullopt, h, std::nullopt);
}

/// h = SelfAttn(x_prev) + x_prev;  x = strategy(h).
inline LayerOutput layer_forward(const TransformerLayer& layer, const Tensor& x_prev,
                                 const ForwardOptions& opts = {}) {
  const Tensor a_in = layer.pre_norm ? rmsnorm_rows(x_prev) : x_prev;
  const Tensor h = add(attention_forward(layer, a_in, layer.causal), x_prev);
  return strategy_forward(layer, h, opts);
}

}  // namespace perft

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "perft/autograd.hpp"
#include "perft/parameter.hpp"

namespace perft {

enum class FfnForm { vanilla, glu };

inline const char* to_string(FfnForm f) { return f == FfnForm::glu ? "glu" : "vanilla"; }

struct MoeLayerConfig {
  std::size_t d_model = 16;
  std::size_t d_ffn = 32;
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  FfnForm ffn_form = FfnForm::glu;
  bool renormalize_gates = false;

  void validate() const {
    if (d_model < 1) throw ConfigError("D", "must be >= 1");
    if (d_ffn < 1) throw ConfigError("D_ffn", "must be >= 1");
    if (num_experts < 1) throw ConfigError("N", "must be >= 1");
    if (top_k < 1 || top_k > num_experts) {
      throw ConfigError("K", "must satisfy 1 <= K <= N (K=" + std::to_string(top_k) +
                                 ", N=" + std::to_string(num_experts) + ")");
    }
  }
};

/// One FFN expert. Columns of w_up are the key memory vectors; rows of
/// w_down the value vectors. w_gate is present only in the GLU form.
struct FfnExpert {
  Parameter w_up;    // D x D_ffn
  std::optional<Parameter> w_gate;  // D x D_ffn
  Parameter w_down;  // D_ffn x D

  FfnForm form() const { return w_gate ? FfnForm::glu : FfnForm::vanilla; }
  std::size_t d_model() const { return w_up.value().rows(); }
  std::size_t d_ffn() const { return w_up.value().cols(); }

  std::size_t param_count() const {
    return w_up.size() + w_down.size() + (w_gate ? w_gate->size() : 0);
  }

  void params(ParamRefs& out) {
    out.push_back(&w_up);
    if (w_gate) out.push_back(&*w_gate);
    out.push_back(&w_down);
  }
};

struct Router {
  Parameter w_g;  // D x N; column i is expert vector g_i

  std::size_t num_experts() const { return w_g.value().cols(); }
};

/// Token-to-expert routing decisions for T tokens over N experts.
struct RouterOutput {
  Tensor logits;  // T x N
  Tensor probs;   // T x N, full softmax
  Tensor gates;   // T x N, zero outside `selected`
  std::vector<std::vector<std::size_t>> selected;  // per token, K ascending indices

  std::size_t tokens() const { return selected.size(); }
  std::size_t num_experts() const { return logits.cols(); }
  std::size_t top_k() const { return selected.empty() ? 0 : selected.front().size(); }

  /// Tokens (ascending) whose selected set contains expert `i`.
  std::vector<std::size_t> tokens_for(std::size_t i) const {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < selected.size(); ++t) {
      for (auto e : selected[t]) {
        if (e == i) {
          rows.push_back(t);
          break;
        }
      }
    }
    return rows;
  }
};

inline FfnExpert init_expert(std::size_t d_model, std::size_t d_ffn, FfnForm form, Rng& rng,
                             const std::string& prefix, ParamRole role = ParamRole::base) {
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double s_out = 1.0 / std::sqrt(static_cast<double>(d_ffn));
  FfnExpert e;
  e.w_up = Parameter(prefix + ".w_up", init_matrix(d_model, d_ffn, init::ScaledNormal{s_in}, rng),
                     role);
  if (form == FfnForm::glu) {
    e.w_gate = Parameter(prefix + ".w_gate",
                         init_matrix(d_model, d_ffn, init::ScaledNormal{s_in}, rng), role);
  }
  e.w_down = Parameter(prefix + ".w_down",
                       init_matrix(d_ffn, d_model, init::ScaledNormal{s_out}, rng), role);
  return e;
}

inline Router init_router(std::size_t d_model, std::size_t num_experts, Rng& rng,
                          const std::string& name, ParamRole role = ParamRole::base) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
  return Router{Parameter(name, init_matrix(d_model, num_experts, init::ScaledNormal{s}, rng), role)};
}

/// vanilla: silu(h W_up) W_down;  glu: (silu(h W_up) * h W_gate) W_down.
inline Tensor ffn_forward(const FfnExpert& e, const Tensor& h) {
  if (h.cols() != e.d_model()) {
    throw ShapeError("ffn_forward: input " + h.value().shape_str() + " for expert with D=" +
                     std::to_string(e.d_model()));
  }
  Tensor a = silu(matmul(h, e.w_up.tensor()));
  if (e.w_gate) a = hadamard(a, matmul(h, e.w_gate->tensor()));
  return matmul(a, e.w_down.tensor());
}

/// TopK(Softmax(logits)) per token, optionally renormalised over the kept set.
inline RouterOutput route_logits(const Tensor& logits, std::size_t k, bool renormalize) {
  const std::size_t n = logits.cols();
  if (k < 1 || k > n) {
    throw ArgumentError("route: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  RouterOutput ro;
  ro.logits = logits;
  ro.probs = softmax_rows(logits);
  ro.selected.reserve(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    ro.selected.push_back(top_k(ro.probs.value().row(t), k).indices);
  }
  ro.gates = topk_gates(ro.probs, ro.selected, renormalize);
  return ro;
}

inline RouterOutput route(const Router& router, const Tensor& h, std::size_t k, bool renormalize) {
  if (h.cols() != router.w_g.value().rows()) {
    throw ShapeError("route: input " + h.value().shape_str() + " for router " +
                     router.w_g.value().shape_str());
  }
  return route_logits(matmul(h, router.w_g.tensor()), k, renormalize);
}

/// sum_i gates[t, i] * block_i(h_t), evaluating block i only on the tokens
/// that selected it. Blocks a token did not select never see that token, so
/// they receive exactly zero gradient from it.
inline Tensor sparse_combine(const RouterOutput& ro, const Tensor& h,
                             const std::function<Tensor(std::size_t, const Tensor&)>& block) {
  const std::size_t t_count = h.rows();
  std::optional<Tensor> acc;
  for (std::size_t i = 0; i < ro.num_experts(); ++i) {
    const auto rows = ro.tokens_for(i);
    if (rows.empty()) continue;
    Tensor y = block(i, gather_rows(h, rows));
    Tensor w = gather_column(ro.gates, rows, i);
    Tensor part = scatter_rows(scale_rows(y, w), rows, t_count);
    acc = acc ? add(*acc, part) : part;
  }
  return acc ? *acc : Tensor::constant(Matrix(t_count, h.cols()));
}

struct MoeOutput {
  Tensor out;
  RouterOutput routing;
};

inline MoeOutput moe_forward(const std::vector<FfnExpert>& experts, const Router& router,
                             const Tensor& h, const MoeLayerConfig& cfg) {
  if (experts.size() != router.num_experts()) {
    throw ShapeError("moe_forward: " + std::to_string(experts.size()) + " experts for router with " +
                     std::to_string(router.num_experts()) + " columns");
  }
  MoeOutput o;
  o.routing = route(router, h, cfg.top_k, cfg.renormalize_gates);
  o.out = sparse_combine(o.routing, h,
                         [&](std::size_t i, const Tensor& x) { return ffn_forward(experts[i], x); });
  return o;
}

/// Per-expert dispatch fractions f_i: share of the T*K selections that went
/// to expert i (sums to 1).
inline std::vector<double> dispatch_fractions(const RouterOutput& ro) {
  std::vector<double> f(ro.num_experts(), 0.0);
  const double denom = static_cast<double>(ro.tokens() * ro.top_k());
  for (const auto& sel : ro.selected)
    for (auto i : sel) f[i] += 1.0;
  for (auto& x : f) x /= denom;
  return f;
}

/// N * sum_i f_i * P_i. Gradient flows through the mean probabilities P only.
inline Tensor load_balance_loss(const RouterOutput& ro, std::size_t num_experts) {
  if (ro.tokens() < 1) throw ArgumentError("load_balance_loss: no tokens");
  if (num_experts != ro.num_experts()) throw ShapeError("load_balance_loss: expert count mismatch");
  const auto f = dispatch_fractions(ro);
  Tensor p_mean = mean_rows(ro.probs);
  Tensor weighted = hadamard(p_mean, Tensor::constant(Matrix::row_vector(f)));
  return scale(sum(weighted), static_cast<double>(num_experts));
}

/// Mean over tokens of the squared log-partition of the routing logits.
inline Tensor router_z_loss(const Tensor& logits) { return mean(square(logsumexp_rows(logits))); }

}  // namespace perft

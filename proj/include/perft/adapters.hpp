#pragma once

#include <cmath>
#include <string>

#include "perft/autograd.hpp"
#include "perft/parameter.hpp"

namespace perft {

enum class AdapterArch { lora, parallel_adapter };

inline const char* to_string(AdapterArch a) {
  return a == AdapterArch::lora ? "lora" : "parallel_adapter";
}

/// Bottleneck block Δ(h) = UpProj(Act(DownProj(h))).
///
/// LoRA uses the identity activation and a fixed output scale alpha / D_B;
/// the parallel adapter applies SiLU after the down-projection and is
/// unscaled. Columns of w_down are the adapter's key vectors.
struct BottleneckAdapter {
  Parameter w_down;  // D x D_B
  Parameter w_up;    // D_B x D
  AdapterArch arch = AdapterArch::lora;
  double alpha = 2.0;

  std::size_t d_model() const { return w_down.value().rows(); }
  std::size_t bottleneck() const { return w_down.value().cols(); }
  double lora_scale() const { return alpha / static_cast<double>(bottleneck()); }

  void params(ParamRefs& out) {
    out.push_back(&w_down);
    out.push_back(&w_up);
  }
};

/// W_down ~ N(0, 1/D), W_up = 0, so a fresh adapter contributes exactly 0.
inline BottleneckAdapter init_adapter(std::size_t d_model, std::size_t bottleneck,
                                      AdapterArch arch, double alpha, Rng& rng,
                                      const std::string& prefix = "adapter") {
  if (d_model < 1 || bottleneck < 1) throw ArgumentError("init_adapter: dimensions must be positive");
  const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
  BottleneckAdapter a;
  a.w_down = Parameter(prefix + ".w_down",
                       init_matrix(d_model, bottleneck, init::ScaledNormal{s}, rng),
                       ParamRole::adapter);
  a.w_up = Parameter(prefix + ".w_up", init_matrix(bottleneck, d_model, init::Zeros{}, rng),
                     ParamRole::adapter);
  a.arch = arch;
  a.alpha = alpha;
  return a;
}

inline Tensor adapter_forward(const BottleneckAdapter& a, const Tensor& h) {
  if (h.cols() != a.d_model()) {
    throw ShapeError("adapter_forward: input " + h.value().shape_str() + " for adapter with D=" +
                     std::to_string(a.d_model()));
  }
  Tensor z = matmul(h, a.w_down.tensor());
  if (a.arch == AdapterArch::lora) return scale(matmul(z, a.w_up.tensor()), a.lora_scale());
  return matmul(silu(z), a.w_up.tensor());
}

/// 2 * D * D_B; alpha is a constant and the architecture flag adds nothing.
inline std::size_t adapter_param_count(const BottleneckAdapter& a) {
  return a.w_down.size() + a.w_up.size();
}

}  // namespace perft

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "perft/training.hpp"

namespace perft {

// ---------------------------------------------------------------------------
// Parameter accounting.

struct ParamReport {
  std::uint64_t trainable_total = 0;
  std::uint64_t trainable_activated_per_token = 0;
  std::uint64_t model_activated_total = 0;
  double activated_efficiency = 0.0;  // percent

  friend bool operator==(const ParamReport&, const ParamReport&) = default;
};

/// Dimensions sufficient to count parameters without building tensors.
struct CountSpec {
  Variant mode = Variant::none;
  std::size_t num_layers = 0;   // L
  std::size_t d_model = 0;      // D
  std::size_t d_ffn = 0;
  std::size_t num_experts = 0;  // N
  std::size_t top_k = 0;        // K
  FfnForm ffn_form = FfnForm::glu;
  std::size_t peft_experts = 1;  // M
  std::size_t peft_top_k = 1;    // K~
  std::size_t bottleneck = 0;    // D_B, or the LoRA rank for baselines
  /// Total parameters a token activates in the backbone. When absent it is
  /// computed exactly from the dimensions.
  std::optional<std::uint64_t> model_activated_total;
};

/// Backbone parameters touched by one token: single-head attention (4 D^2),
/// the router (D N) and K experts of 2 or 3 D x D_ffn matrices, per layer.
inline std::uint64_t backbone_activated_params(const CountSpec& s) {
  const std::uint64_t d = s.d_model;
  const std::uint64_t per_expert = (s.ffn_form == FfnForm::glu ? 3u : 2u) * d * s.d_ffn;
  return s.num_layers * (4 * d * d + d * s.num_experts + s.top_k * per_expert);
}

inline ParamReport finish_report(std::uint64_t total, std::uint64_t activated,
                                 std::uint64_t model_total) {
  ParamReport r;
  r.trainable_total = total;
  r.trainable_activated_per_token = activated;
  r.model_activated_total = model_total;
  r.activated_efficiency =
      model_total == 0 ? 0.0
                       : 100.0 * static_cast<double>(activated) / static_cast<double>(model_total);
  return r;
}

/// Closed-form counts per layer, times L:
///   baseline_qv   2 matrices x 2 factors x D r
///   baseline_gate D r + r N
///   perft_r       total M (2 D D_B) + D M,  activated K~ (2 D D_B) + D M
///   perft_e       total N (2 D D_B),        activated K (2 D D_B)
///   perft_d       M (2 D D_B)
///   perft_s       2 D D_B
inline ParamReport count_params(const CountSpec& s) {
  if (s.num_layers < 1) throw ConfigError("L", "missing or zero");
  if (s.d_model < 1) throw ConfigError("D", "missing or zero");
  const bool needs_moe_dims = s.mode == Variant::perft_e || s.mode == Variant::baseline_gate ||
                              !s.model_activated_total;
  if (needs_moe_dims && s.num_experts < 1) throw ConfigError("N", "missing or zero");
  if (needs_moe_dims && (s.top_k < 1 || s.top_k > s.num_experts)) {
    throw ConfigError("K", "must satisfy 1 <= K <= N");
  }
  if (!s.model_activated_total && s.d_ffn < 1) throw ConfigError("D_ffn", "missing or zero");
  if (s.mode != Variant::none && s.bottleneck < 1) throw ConfigError("D_B", "must be >= 1");
  if ((s.mode == Variant::perft_r || s.mode == Variant::perft_d) && s.peft_experts < 1) {
    throw ConfigError("M", "must be >= 1");
  }
  if (s.mode == Variant::perft_r && (s.peft_top_k < 1 || s.peft_top_k > s.peft_experts)) {
    throw ConfigError("K_tilde", "must satisfy 1 <= K_tilde <= M");
  }

  const std::uint64_t L = s.num_layers, D = s.d_model, DB = s.bottleneck;
  const std::uint64_t block = 2 * D * DB;
  std::uint64_t total = 0, act = 0;
  switch (s.mode) {
    case Variant::none: break;
    case Variant::baseline_qv: total = act = L * 2 * 2 * D * DB; break;
    case Variant::baseline_gate: total = act = L * (D * DB + DB * s.num_experts); break;
    case Variant::perft_r:
      total = L * (s.peft_experts * block + D * s.peft_experts);
      act = L * (s.peft_top_k * block + D * s.peft_experts);
      break;
    case Variant::perft_e:
      total = L * s.num_experts * block;
      act = L * s.top_k * block;
      break;
    case Variant::perft_d: total = act = L * s.peft_experts * block; break;
    case Variant::perft_s: total = act = L * block; break;
  }
  const std::uint64_t model_total =
      s.model_activated_total ? *s.model_activated_total : backbone_activated_params(s);
  return finish_report(total, act, model_total);
}

inline CountSpec count_spec_for(const Model& m) {
  CountSpec s;
  s.mode = m.strategy.variant;
  s.num_layers = m.config.num_layers;
  s.d_model = m.config.moe.d_model;
  s.d_ffn = m.config.moe.d_ffn;
  s.num_experts = m.config.moe.num_experts;
  s.top_k = m.config.moe.top_k;
  s.ffn_form = m.config.moe.ffn_form;
  s.peft_experts = m.strategy.num_experts;
  s.peft_top_k = m.strategy.top_k;
  s.bottleneck = m.strategy.variant == Variant::none ? 0 : m.strategy.bottleneck;
  return s;
}

/// Counts by inspecting the live model: trainable = unfrozen non-head
/// parameters; activated = those reachable from the output of a forward pass
/// over the single probe token.
inline ParamReport enumerate_params(const Model& m, const Matrix& probe) {
  if (probe.rows() != 1 || probe.cols() != m.d_model()) {
    throw ShapeError("enumerate_params: probe must be 1 x D");
  }
  std::map<const detail::Node*, const Parameter*> by_node;
  std::uint64_t total = 0;
  for (const Parameter* p : m.parameters()) {
    if (p->frozen() || p->role() == ParamRole::head) continue;
    total += p->size();
    by_node[p->tensor().id()] = p;
  }
  std::uint64_t act = 0;
  ModelOutput out = m.forward(Tensor::constant(probe));
  visit_leaves(out.hidden, [&](const detail::Node* n) {
    if (auto it = by_node.find(n); it != by_node.end()) act += it->second->size();
  });
  return finish_report(total, act, backbone_activated_params(count_spec_for(m)));
}

// ---------------------------------------------------------------------------
// Routing statistics.

enum class RouterKind { moe, peft };

/// Per-layer dispatch statistics of the chosen router over every token of the
/// dataset.
inline std::vector<RoutingStats> routing_stats(const Model& m, const Dataset& data, RouterKind which) {
  if (which == RouterKind::peft && m.strategy.variant != Variant::perft_r) {
    throw ConfigError("which", std::string("variant ") + to_string(m.strategy.variant) +
                                   " has no PEFT router");
  }
  std::vector<RoutingAccumulator> acc(m.layers.size());
  for (const auto& s : data.samples) {
    ModelOutput out = m.forward(Tensor::constant(s.input));
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      acc[l].add(which == RouterKind::moe ? out.layers[l].moe_routing : *out.layers[l].peft_routing);
    }
  }
  std::vector<RoutingStats> stats;
  for (const auto& a : acc) stats.push_back(a.finish());
  return stats;
}

// ---------------------------------------------------------------------------
// Key-memory and expert vectors.

enum class VectorKind { key, expert, peft_key, peft_expert };

inline const char* to_string(VectorKind k) {
  switch (k) {
    case VectorKind::key: return "key";
    case VectorKind::expert: return "expert";
    case VectorKind::peft_key: return "peft_key";
    case VectorKind::peft_expert: return "peft_expert";
  }
  return "?";
}

inline std::optional<VectorKind> parse_vector_kind(const std::string& s) {
  for (auto k : {VectorKind::key, VectorKind::expert, VectorKind::peft_key, VectorKind::peft_expert})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

struct LabeledVector {
  VectorKind kind;
  std::size_t layer;
  std::size_t index;
  std::vector<double> values;
};

struct VectorBundle {
  std::vector<LabeledVector> vectors;

  std::size_t count(VectorKind k) const {
    return static_cast<std::size_t>(std::count_if(
        vectors.begin(), vectors.end(), [k](const LabeledVector& v) { return v.kind == k; }));
  }

  std::vector<std::vector<double>> of(VectorKind k) const {
    std::vector<std::vector<double>> out;
    for (const auto& v : vectors)
      if (v.kind == k) out.push_back(v.values);
    return out;
  }
};

/// Copies out, for one layer: FFN keys k (columns of each expert's W_up,
/// index = expert * D_ffn + column), expert vectors g (columns of W_g),
/// adapter keys k~ (columns of each adapter's W_down, index = adapter * D_B +
/// column) and PEFT expert vectors g~ (columns of the PEFT router).
inline VectorBundle extract_vectors(const Model& m, std::size_t layer_index) {
  if (layer_index >= m.layers.size()) {
    throw ArgumentError("extract_vectors: layer " + std::to_string(layer_index) + " out of range (" +
                        std::to_string(m.layers.size()) + " layers)");
  }
  const auto& layer = m.layers[layer_index];
  VectorBundle b;
  auto columns = [&](const Matrix& w, VectorKind kind, std::size_t offset) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      b.vectors.push_back({kind, layer_index, offset + c, w.column(c)});
    }
  };
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    columns(layer.experts[e].w_up.value(), VectorKind::key, e * layer.moe.d_ffn);
  }
  columns(layer.router.w_g.value(), VectorKind::expert, 0);
  for (std::size_t j = 0; j < layer.adapters.size(); ++j) {
    columns(layer.adapters[j].w_down.value(), VectorKind::peft_key,
            j * layer.adapters[j].bottleneck());
  }
  if (layer.peft_router) columns(layer.peft_router->w_g.value(), VectorKind::peft_expert, 0);
  return b;
}

// ---------------------------------------------------------------------------
// PCA.

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // column i pairs with values[i]
};

/// Cyclic Jacobi rotations; adequate for the small covariance matrices here.
inline SymmetricEigen symmetric_eigen(Matrix a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("symmetric_eigen: matrix not square");
  Matrix v = Matrix::identity(n);
  double scale = 0.0;
  for (double x : a.data()) scale = std::max(scale, std::abs(x));
  for (int sweep = 0; sweep < 100 && scale > 0.0; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-15 * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymmetricEigen out;
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values.push_back(a(order[k], order[k]));
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
  }
  return out;
}

struct PcaResult {
  std::vector<double> mean;             // of the fitting set
  Matrix axes;                          // dims x D, unit rows
  std::vector<double> explained_ratio;  // per axis, non-increasing
  Matrix coords;                        // transform-set size x dims
  std::size_t dims = 0;
  std::vector<std::string> warnings;
};

/// Fits principal axes on `fit` (centred covariance eigendecomposition) and
/// projects `transform` onto them. Axes are sign-normalised so their
/// largest-magnitude component is positive. When the covariance has fewer
/// than `out_dims` non-negligible eigenvalues the output dimension shrinks and
/// a warning is recorded.
inline PcaResult pca_project(const std::vector<std::vector<double>>& fit,
                             const std::vector<std::vector<double>>& transform,
                             std::size_t out_dims = 2) {
  if (out_dims < 1) throw ArgumentError("pca_project: out_dims must be >= 1");
  if (fit.size() < out_dims) {
    throw ArgumentError("pca_project: need at least " + std::to_string(out_dims) +
                        " fitting vectors, got " + std::to_string(fit.size()));
  }
  const std::size_t d = fit.front().size();
  for (const auto& v : fit)
    if (v.size() != d) throw ShapeError("pca_project: ragged fitting set");
  for (const auto& v : transform)
    if (v.size() != d) throw ShapeError("pca_project: transform vector length mismatch");

  PcaResult r;
  r.mean.assign(d, 0.0);
  for (const auto& v : fit)
    for (std::size_t j = 0; j < d; ++j) r.mean[j] += v[j];
  for (auto& x : r.mean) x /= static_cast<double>(fit.size());

  Matrix cov(d, d);
  for (const auto& v : fit)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(i, j) += (v[i] - r.mean[i]) * (v[j] - r.mean[j]);
  cov *= 1.0 / static_cast<double>(fit.size());

  const SymmetricEigen eig = symmetric_eigen(cov);
  double total = 0.0;
  for (double ev : eig.values) total += std::max(ev, 0.0);

  std::size_t dims = std::min(out_dims, d);
  const double negligible = 1e-12 * std::max(total, 1e-300);
  std::size_t usable = 0;
  while (usable < dims && eig.values[usable] > negligible) ++usable;
  if (usable < out_dims) {
    r.warnings.push_back("covariance has rank " + std::to_string(usable) + " < requested " +
                         std::to_string(out_dims) + " dims; projecting onto " +
                         std::to_string(usable));
  }
  dims = usable;
  r.dims = dims;

  r.axes = Matrix(dims, d);
  for (std::size_t k = 0; k < dims; ++k) {
    std::size_t big = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(eig.vectors(j, k)) > std::abs(eig.vectors(big, k))) big = j;
    const double sign = eig.vectors(big, k) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) r.axes(k, j) = sign * eig.vectors(j, k);
    r.explained_ratio.push_back(std::max(eig.values[k], 0.0) / total);
  }

  r.coords = Matrix(transform.size(), dims);
  for (std::size_t n = 0; n < transform.size(); ++n)
    for (std::size_t k = 0; k < dims; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (transform[n][j] - r.mean[j]) * r.axes(k, j);
      r.coords(n, k) = s;
    }
  return r;
}

inline PcaResult pca_project(const std::vector<std::vector<double>>& vectors,
                             std::size_t out_dims = 2) {
  return pca_project(vectors, vectors, out_dims);
}

// ---------------------------------------------------------------------------
// Cosine structure.

/// Pairwise cosines; a zero vector has cosine 0 with everything.
inline Matrix cosine_matrix(const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& b) {
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  Matrix out(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double na = norm(a[i]);
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (a[i].size() != b[j].size()) {
        throw ShapeError("cosine_matrix: vector lengths " + std::to_string(a[i].size()) + " and " +
                         std::to_string(b[j].size()));
      }
      const double nb = norm(b[j]);
      if (na == 0.0 || nb == 0.0) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < a[i].size(); ++k) dot += a[i][k] * b[j][k];
      out(i, j) = std::clamp(dot / (na * nb), -1.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV export.

inline void write_vectors_csv(std::ostream& os, const VectorBundle& b) {
  const std::size_t d = b.vectors.empty() ? 0 : b.vectors.front().values.size();
  os << "kind,layer,index";
  for (std::size_t j = 1; j <= d; ++j) os << ",c" << j;
  os << '\n';
  char buf[64];
  for (const auto& v : b.vectors) {
    os << to_string(v.kind) << ',' << v.layer << ',' << v.index;
    for (double x : v.values) {
      std::snprintf(buf, sizeof buf, "%.17g", x);
      os << ',' << buf;
    }
    os << '\n';
  }
}

/// One row per bundle vector, in bundle order, with its PCA coordinates.
inline void write_pca_csv(std::ostream& os, const VectorBundle& b, const PcaResult& p) {
  if (p.coords.rows() != b.vectors.size()) throw ShapeError("write_pca_csv: row count mismatch");
  os << "kind,layer,index";
  for (std::size_t k = 1; k <= p.dims; ++k) os << ",c" << k;
  os << '\n';
  char buf[64];
  for (std::size_t n = 0; n < b.vectors.size(); ++n) {
    const auto& v = b.vectors[n];
    os << to_string(v.kind) << ',' << v.layer << ',' << v.index;
    for (std::size_t k = 0; k < p.dims; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", p.coords(n, k));
      os << ',' << buf;
    }
    os << '\n';
  }
}

}  // namespace perft

#pragma once

// Tape-free reverse-mode differentiation over Matrix values.
//
// Every op returns a Tensor that owns its value and (when any input requires
// a gradient) a backward closure plus strong references to its inputs. The
// graph is released when the last Tensor referencing it goes away. Leaves
// created with requires_grad accumulate gradients across backward() calls
// until zero_grad() is invoked on them.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "perft/errors.hpp"
#include "perft/matrix.hpp"

namespace perft {

namespace detail {

struct Node {
  Matrix value;
  std::optional<Matrix> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (!grad) {
      grad = g;
    } else {
      *grad += g;
    }
  }

  /// Grad buffer for in-place accumulation; created zeroed on first use.
  Matrix& grad_buffer() {
    if (!grad) grad.emplace(value.rows(), value.cols());
    return *grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value) { return leaf(std::move(value), false); }

  static Tensor leaf(Matrix value, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }

  /// nullptr when no gradient has reached this tensor.
  const Matrix* grad() const { return node_->grad ? &*node_->grad : nullptr; }

  double item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item: tensor is " + value().shape_str());
    return value()[0];
  }

  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  a.value().require_same_shape(b.value(), op);
}

}  // namespace detail

/// Reverse sweep from `root`, seeded with `seed` (default: ones, which for a
/// scalar root means d(root)/d(root) = 1).
inline void backward(const Tensor& root, std::optional<Matrix> seed = std::nullopt) {
  if (!root.requires_grad()) return;
  Matrix s = seed ? std::move(*seed) : Matrix(root.rows(), root.cols(), 1.0);
  root.value().require_same_shape(s, "backward seed");

  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(s);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad) n->backward(*n);
  }
}

/// Calls `fn` on every gradient-carrying leaf reachable from `root`, once each.
inline void visit_leaves(const Tensor& root, const std::function<void(const detail::Node*)>& fn) {
  std::unordered_set<const detail::Node*> visited;
  std::vector<const detail::Node*> stack{root.node().get()};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    const detail::Node* n = stack.back();
    stack.pop_back();
    if (!n->backward) {
      if (n->requires_grad) fn(n);
      continue;
    }
    for (const auto& c : n->inputs) {
      if (visited.insert(c.get()).second) stack.push_back(c.get());
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  return detail::make_result(matmul(a.value(), b.value()), {a, b}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    auto& nb = detail::in(self, 1);
    if (na.requires_grad) na.accumulate(matmul_nt(*self.grad, nb.value));
    if (nb.requires_grad) nb.accumulate(matmul_tn(na.value, *self.grad));
  });
}

inline Tensor transpose(const Tensor& a) {
  return detail::make_result(transpose(a.value()), {a}, [](detail::Node& self) {
    detail::in(self, 0).accumulate(transpose(*self.grad));
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_result(a.value() + b.value(), {a, b}, [](detail::Node& self) {
    detail::in(self, 0).accumulate(*self.grad);
    detail::in(self, 1).accumulate(*self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_result(a.value() - b.value(), {a, b}, [](detail::Node& self) {
    detail::in(self, 0).accumulate(*self.grad);
    detail::in(self, 1).accumulate(*self.grad * -1.0);
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "hadamard");
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.value()[i];
  return detail::make_result(std::move(v), {a, b}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    auto& nb = detail::in(self, 1);
    const Matrix& g = *self.grad;
    if (na.requires_grad) {
      Matrix& ga = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      Matrix& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::make_result(a.value() * s, {a}, [s](detail::Node& self) {
    detail::in(self, 0).accumulate(*self.grad * s);
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Element-wise nonlinearities.

inline Tensor silu(const Tensor& a) {
  Matrix v = a.value();
  for (auto& x : v.data()) x = silu(x);
  return detail::make_result(std::move(v), {a}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    const Matrix& g = *self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * silu_grad(na.value[i]);
  });
}

inline Tensor square(const Tensor& a) {
  Matrix v = a.value();
  for (auto& x : v.data()) x *= x;
  return detail::make_result(std::move(v), {a}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    const Matrix& g = *self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * na.value[i] * g[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return detail::make_result(Matrix(1, 1, s), {a}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    const double g = (*self.grad)[0];
    Matrix& ga = na.grad_buffer();
    for (auto& x : ga.data()) x += g;
  });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Column means: T x N -> 1 x N.
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t t = a.rows();
  Matrix v(1, a.cols());
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) v(0, c) += a.value()(r, c);
  v *= 1.0 / static_cast<double>(t);
  return detail::make_result(std::move(v), {a}, [t](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    const double inv = 1.0 / static_cast<double>(t);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += (*self.grad)(0, c) * inv;
  });
}

/// Row-wise log-sum-exp: T x N -> T x 1, stable under large logits.
inline Tensor logsumexp_rows(const Tensor& a) {
  Matrix v(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) v(r, 0) = logsumexp(a.value().row(r));
  return detail::make_result(std::move(v), {a}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    for (std::size_t r = 0; r < na.value.rows(); ++r) {
      const auto p = softmax(na.value.row(r));
      const double g = (*self.grad)(r, 0);
      for (std::size_t c = 0; c < p.size(); ++c) ga(r, c) += g * p[c];
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family.

/// Row-wise softmax. With `causal`, entry (i, j > i) is masked to probability 0.
inline Tensor softmax_rows(const Tensor& a, bool causal = false) {
  Matrix v(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.value().row(r);
    const std::size_t width = causal ? std::min(r + 1, a.cols()) : a.cols();
    const auto p = softmax(row.first(width));
    for (std::size_t c = 0; c < width; ++c) v(r, c) = p[c];
  }
  return detail::make_result(std::move(v), {a}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    const Matrix& p = self.value;
    const Matrix& g = *self.grad;
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) ga(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

/// Keeps `selected[t]` entries of row t of `probs` and zeroes the rest. With
/// `renormalize`, kept entries are divided by their row sum. The selection
/// itself carries no gradient.
inline Tensor topk_gates(const Tensor& probs, const std::vector<std::vector<std::size_t>>& selected,
                         bool renormalize) {
  if (selected.size() != probs.rows()) {
    throw ShapeError("topk_gates: " + std::to_string(selected.size()) + " selections for " +
                     std::to_string(probs.rows()) + " rows");
  }
  Matrix v(probs.rows(), probs.cols());
  std::vector<double> sums(probs.rows(), 1.0);
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    double s = 0.0;
    for (auto i : selected[t]) s += probs.value()(t, i);
    if (renormalize) sums[t] = s;
    for (auto i : selected[t]) v(t, i) = renormalize ? probs.value()(t, i) / s : probs.value()(t, i);
  }
  return detail::make_result(
      std::move(v), {probs}, [selected, sums, renormalize](detail::Node& self) {
        auto& np = detail::in(self, 0);
        Matrix& gp = np.grad_buffer();
        const Matrix& g = *self.grad;
        const Matrix& out = self.value;
        for (std::size_t t = 0; t < selected.size(); ++t) {
          if (!renormalize) {
            for (auto i : selected[t]) gp(t, i) += g(t, i);
            continue;
          }
          // out_i = p_i / S  =>  dp_j = (g_j - sum_i g_i out_i) / S
          double dot = 0.0;
          for (auto i : selected[t]) dot += g(t, i) * out(t, i);
          for (auto j : selected[t]) gp(t, j) += (g(t, j) - dot) / sums[t];
        }
      });
}

// ---------------------------------------------------------------------------
// Row indexing.

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  Matrix v(rows.size(), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= a.rows()) throw ArgumentError("gather_rows: row index out of range");
    auto src = a.value().row(rows[k]);
    std::copy(src.begin(), src.end(), v.row(k).begin());
  }
  return detail::make_result(std::move(v), {a}, [rows](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      auto dst = ga.row(rows[k]);
      auto src = self.grad->row(k);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Inverse of gather_rows: places row k of `a` at row rows[k] of a
/// total_rows x cols zero matrix (duplicates add).
inline Tensor scatter_rows(const Tensor& a, const std::vector<std::size_t>& rows,
                           std::size_t total_rows) {
  if (rows.size() != a.rows()) throw ShapeError("scatter_rows: index count != row count");
  Matrix v(total_rows, a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= total_rows) throw ArgumentError("scatter_rows: row index out of range");
    auto src = a.value().row(k);
    auto dst = v.row(rows[k]);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  return detail::make_result(std::move(v), {a}, [rows](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      auto src = self.grad->row(rows[k]);
      auto dst = ga.row(k);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Column `col` restricted to `rows`, as a |rows| x 1 tensor.
inline Tensor gather_column(const Tensor& a, const std::vector<std::size_t>& rows,
                            std::size_t col) {
  if (col >= a.cols()) throw ArgumentError("gather_column: column out of range");
  Matrix v(rows.size(), 1);
  for (std::size_t k = 0; k < rows.size(); ++k) v(k, 0) = a.value()(rows[k], col);
  return detail::make_result(std::move(v), {a}, [rows, col](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    for (std::size_t k = 0; k < rows.size(); ++k) ga(rows[k], col) += (*self.grad)(k, 0);
  });
}

/// out[r, :] = a[r, :] * w[r]  with w an n x 1 column.
inline Tensor scale_rows(const Tensor& a, const Tensor& w) {
  if (w.cols() != 1 || w.rows() != a.rows()) {
    throw ShapeError("scale_rows: weights " + w.value().shape_str() + " for rows of " +
                     a.value().shape_str());
  }
  Matrix v = a.value();
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (auto& x : v.row(r)) x *= w.value()(r, 0);
  return detail::make_result(std::move(v), {a, w}, [](detail::Node& self) {
    auto& na = detail::in(self, 0);
    auto& nw = detail::in(self, 1);
    const Matrix& g = *self.grad;
    if (na.requires_grad) {
      Matrix& ga = na.grad_buffer();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * nw.value(r, 0);
    }
    if (nw.requires_grad) {
      Matrix& gw = nw.grad_buffer();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) s += g(r, c) * na.value(r, c);
        gw(r, 0) += s;
      }
    }
  });
}

/// Stacks 1 x D tensors into an n x D tensor.
inline Tensor stack_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("stack_rows: nothing to stack");
  const std::size_t d = parts.front().cols();
  Matrix v(parts.size(), d);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].rows() != 1 || parts[k].cols() != d) throw ShapeError("stack_rows: ragged input");
    auto src = parts[k].value().row(0);
    std::copy(src.begin(), src.end(), v.row(k).begin());
  }
  return detail::make_result(std::move(v), parts, [](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& nk = detail::in(self, k);
      if (!nk.requires_grad) continue;
      Matrix& gk = nk.grad_buffer();
      auto src = self.grad->row(k);
      for (std::size_t c = 0; c < src.size(); ++c) gk(0, c) += src[c];
    }
  });
}

/// Row-wise RMS normalisation without a learned scale.
inline Tensor rmsnorm_rows(const Tensor& a, double eps = 1e-6) {
  const std::size_t d = a.cols();
  Matrix v = a.value();
  std::vector<double> rms(a.rows());
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double ms = 0.0;
    for (double x : v.row(r)) ms += x * x;
    rms[r] = std::sqrt(ms / static_cast<double>(d) + eps);
    for (auto& x : v.row(r)) x /= rms[r];
  }
  return detail::make_result(std::move(v), {a}, [rms, d](detail::Node& self) {
    auto& na = detail::in(self, 0);
    Matrix& ga = na.grad_buffer();
    const Matrix& g = *self.grad;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double gx = 0.0;
      for (std::size_t c = 0; c < d; ++c) gx += g(r, c) * na.value(r, c);
      const double inv = 1.0 / rms[r];
      const double k = gx * inv * inv * inv / static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c) ga(r, c) += g(r, c) * inv - na.value(r, c) * k;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses.

/// Mean softmax cross-entropy of the rows of `logits` against integer labels.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (labels.size() != logits.rows()) throw ShapeError("softmax_cross_entropy: label count");
  const double n = static_cast<double>(labels.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (labels[r] >= logits.cols()) throw ArgumentError("softmax_cross_entropy: label out of range");
    loss += logsumexp(logits.value().row(r)) - logits.value()(r, labels[r]);
  }
  return detail::make_result(Matrix(1, 1, loss / n), {logits}, [labels, n](detail::Node& self) {
    auto& nl = detail::in(self, 0);
    Matrix& gl = nl.grad_buffer();
    const double g = (*self.grad)[0] / n;
    for (std::size_t r = 0; r < nl.value.rows(); ++r) {
      const auto p = softmax(nl.value.row(r));
      for (std::size_t c = 0; c < p.size(); ++c) gl(r, c) += g * p[c];
      gl(r, labels[r]) -= g;
    }
  });
}

/// Mean squared error against a constant target.
inline Tensor mse(const Tensor& pred, const Matrix& target) {
  pred.value().require_same_shape(target, "mse");
  return mean(square(sub(pred, Tensor::constant(target))));
}

}  // namespace perft

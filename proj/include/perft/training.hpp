#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "perft/model.hpp"
#include "perft/routing_stats.hpp"

namespace perft {

// ---------------------------------------------------------------------------
// Synthetic tasks.

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::cluster_classification;
  std::size_t num_clusters = 4;
  std::size_t d_model = 16;
  std::size_t tokens = 8;  // T
  std::size_t samples = 512;
  double noise_std = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_clusters < 2) throw ConfigError("num_clusters", "must be >= 2");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std", "must be >= 0");
    if (d_model < 1) throw ConfigError("D", "must be >= 1");
    if (tokens < 1) throw ConfigError("T", "must be >= 1");
    if (samples < 1) throw ConfigError("samples", "must be >= 1");
  }
};

struct Sample {
  Matrix input;          // T x D
  std::size_t cluster = 0;  // class label for classification
  Matrix target;         // T x D for regression; empty for classification
};

struct Dataset {
  SyntheticTaskSpec spec;
  std::vector<Matrix> means;  // 1 x D per cluster
  std::vector<Matrix> maps;   // D x D per cluster (regression only)
  std::vector<Sample> samples;

  std::size_t output_dim() const {
    return spec.kind == TaskKind::cluster_classification ? spec.num_clusters : spec.d_model;
  }
};

/// Every token of a sample is drawn around the sample's cluster mean:
/// x_t = mu_c + noise_std * n_t. Regression targets are y_t = x_t W_c + noise.
/// Means are N(0, I) in R^D, maps N(0, 1/D) entry-wise.
inline Dataset generate_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  ds.spec = spec;
  const std::size_t d = spec.d_model;
  for (std::size_t c = 0; c < spec.num_clusters; ++c) {
    ds.means.push_back(init_matrix(1, d, init::ScaledNormal{1.0}, rng));
  }
  if (spec.kind == TaskKind::cluster_regression) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t c = 0; c < spec.num_clusters; ++c) {
      ds.maps.push_back(init_matrix(d, d, init::ScaledNormal{s}, rng));
    }
  }
  ds.samples.reserve(spec.samples);
  for (std::size_t n = 0; n < spec.samples; ++n) {
    Sample s;
    s.cluster = rng.index(spec.num_clusters);
    s.input = Matrix(spec.tokens, d);
    for (std::size_t t = 0; t < spec.tokens; ++t)
      for (std::size_t j = 0; j < d; ++j)
        s.input(t, j) = ds.means[s.cluster](0, j) + spec.noise_std * rng.normal();
    if (spec.kind == TaskKind::cluster_regression) {
      s.target = matmul(s.input, ds.maps[s.cluster]);
      for (auto& v : s.target.data()) v += spec.noise_std * rng.normal();
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Optimisation.

struct TrainConfig {
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 16;
  std::size_t epochs = 3;
  double aux_coef = 0.01;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be finite and >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (!(aux_coef >= 0.0)) throw ConfigError("aux_coef", "must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "must be > 0");
  }

  std::size_t steps_per_epoch(std::size_t samples) const {
    return (samples + batch_size - 1) / batch_size;
  }
};

/// Linear warmup to `base_lr` at step == warmup, then linear decay reaching 0
/// at step == total. Steps are 1-based. With warmup >= total the schedule
/// only ramps.
inline double learning_rate_at(std::size_t step, std::size_t total, double base_lr,
                               std::size_t warmup) {
  if (warmup > 0 && step <= warmup) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base_lr;
  const double remaining = static_cast<double>(total - std::min(step, total));
  return base_lr * remaining / static_cast<double>(total - warmup);
}

/// AdamW with decoupled weight decay. State is keyed by position in the
/// parameter list, which must stay fixed between steps.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(const ParamRefs& params, double lr) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value().rows(), p->value().cols());
        v_.emplace_back(p->value().rows(), p->value().cols());
      }
    }
    if (m_.size() != params.size()) throw ArgumentError("AdamW: parameter list changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      if (p.frozen()) continue;
      Matrix& w = p.mutable_value();
      const Matrix* g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g ? (*g)[i] : 0.0;
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * gi;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi;
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

struct TrainRecord {
  std::size_t step = 0;
  double total_loss = 0.0;
  double task_loss = 0.0;
  double lb_moe = 0.0;
  double z_moe = 0.0;
  double lb_peft = 0.0;
  double learning_rate = 0.0;
};

struct SampleLoss {
  Tensor task;
  ModelOutput out;
  Tensor prediction;
};

inline SampleLoss sample_loss(const Model& model, const Sample& s, const ForwardOptions& opts = {}) {
  SampleLoss r;
  r.out = model.forward(Tensor::constant(s.input), opts);
  r.prediction = model.head(r.out.hidden);
  if (model.task == TaskKind::cluster_classification) {
    r.task = softmax_cross_entropy(r.prediction, {s.cluster});
  } else {
    r.task = mse(r.prediction, s.target);
  }
  return r;
}

/// Runs epochs * ceil(samples / batch) AdamW steps. Each step minimises
/// task + aux_coef * (lb_moe + z_moe + lb_peft), averaged over the batch.
/// Frozen parameters are never written.
inline std::vector<TrainRecord> train(Model& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (model.task != data.spec.kind) throw ConfigError("task", "model head does not match task kind");
  ParamRefs params = model.parameters();
  if (std::none_of(params.begin(), params.end(), [](const Parameter* p) { return !p->frozen(); })) {
    throw ConfigError("strategy", "model has no trainable parameters");
  }
  const std::size_t n = data.samples.size();
  const std::size_t per_epoch = cfg.steps_per_epoch(n);
  const std::size_t total = cfg.epochs * per_epoch;

  Rng rng(cfg.seed);
  ForwardOptions opts;
  opts.dropout_rng = &rng;
  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  std::vector<TrainRecord> history;
  history.reserve(total);

  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      ++step;
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      TrainRecord rec;
      rec.step = step;
      for (std::size_t k = start; k < end; ++k) {
        SampleLoss sl = sample_loss(model, data.samples[order[k]], opts);
        Tensor aux = add(add(sl.out.lb_moe, sl.out.z_moe), sl.out.lb_peft);
        Tensor loss = add(sl.task, scale(aux, cfg.aux_coef));
        backward(scale(loss, inv_b));
        rec.task_loss += sl.task.item() * inv_b;
        rec.lb_moe += sl.out.lb_moe.item() * inv_b;
        rec.z_moe += sl.out.z_moe.item() * inv_b;
        rec.lb_peft += sl.out.lb_peft.item() * inv_b;
      }
      rec.total_loss = rec.task_loss + cfg.aux_coef * (rec.lb_moe + rec.z_moe + rec.lb_peft);
      if (!std::isfinite(rec.total_loss)) throw DivergedError(step, "non-finite loss");
      rec.learning_rate = learning_rate_at(step, total, cfg.lr, cfg.warmup_steps);
      opt.step(params, rec.learning_rate);
      history.push_back(rec);
    }
  }
  model.zero_grad();
  return history;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  double loss = 0.0;
  std::optional<double> accuracy;
  std::vector<RoutingStats> moe_routing;   // per layer
  std::vector<RoutingStats> peft_routing;  // per layer, PERFT-R only
};

inline std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Read-only pass over the dataset: mean task loss, accuracy (classification)
/// and per-layer routing statistics.
inline EvalResult evaluate(const Model& model, const Dataset& data) {
  EvalResult r;
  const std::size_t layers = model.layers.size();
  std::vector<RoutingAccumulator> moe_acc(layers), peft_acc(layers);
  const bool has_peft_router = model.strategy.variant == Variant::perft_r;
  std::size_t correct = 0;
  for (const auto& s : data.samples) {
    SampleLoss sl = sample_loss(model, s);
    r.loss += sl.task.item();
    if (model.task == TaskKind::cluster_classification &&
        argmax_lowest(sl.prediction.value().row(0)) == s.cluster) {
      ++correct;
    }
    for (std::size_t l = 0; l < layers; ++l) {
      moe_acc[l].add(sl.out.layers[l].moe_routing);
      if (has_peft_router) peft_acc[l].add(*sl.out.layers[l].peft_routing);
    }
  }
  const double n = static_cast<double>(data.samples.size());
  r.loss /= n;
  if (model.task == TaskKind::cluster_classification) r.accuracy = static_cast<double>(correct) / n;
  for (std::size_t l = 0; l < layers; ++l) {
    r.moe_routing.push_back(moe_acc[l].finish());
    if (has_peft_router) r.peft_routing.push_back(peft_acc[l].finish());
  }
  return r;
}

/// FNV-1a over shape and raw bytes; used to prove tensors were not written.
inline std::uint64_t digest(const Matrix& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 0x100000001b3ULL;
    }
  };
  mix(m.rows());
  mix(m.cols());
  for (double v : m.data()) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace perft

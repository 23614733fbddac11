#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "perft/training.hpp"

using namespace perft;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.num_layers = 1;
  c.moe = MoeLayerConfig{6, 8, 3, 2, FfnForm::glu, false};
  return c;
}

SyntheticTaskSpec tiny_task(TaskKind kind = TaskKind::cluster_classification) {
  SyntheticTaskSpec s;
  s.kind = kind;
  s.num_clusters = 3;
  s.d_model = 6;
  s.tokens = 3;
  s.samples = 24;
  s.noise_std = 0.1;
  s.seed = 5;
  return s;
}

PeftStrategyConfig perft_r(std::size_t m = 3, std::size_t kt = 1, std::size_t db = 2) {
  PeftStrategyConfig s;
  s.variant = Variant::perft_r;
  s.num_experts = m;
  s.top_k = kt;
  s.bottleneck = db;
  return s;
}

TrainConfig quick_train() {
  TrainConfig t;
  t.lr = 5e-3;
  t.warmup_steps = 2;
  t.batch_size = 8;
  t.epochs = 2;
  return t;
}

std::vector<Matrix> snapshot(const Model& m) {
  std::vector<Matrix> out;
  for (const Parameter* p : m.parameters()) out.push_back(p->value());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic tasks.

TEST(Task, Validation) {
  auto s = tiny_task();
  s.num_clusters = 1;
  EXPECT_THROW(generate_task(s), ConfigError);
  s = tiny_task();
  s.noise_std = -0.1;
  EXPECT_THROW(generate_task(s), ConfigError);
}

TEST(Task, NoiseFreeClustersAreSeparable) {
  auto s = tiny_task();
  s.num_clusters = 2;
  s.noise_std = 0.0;
  s.samples = 100;
  const Dataset ds = generate_task(s);
  ASSERT_GT(max_abs_diff(ds.means[0], ds.means[1]), 0.1);
  std::size_t correct = 0;
  for (const auto& smp : ds.samples) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < 2; ++c) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < s.tokens; ++t)
        for (std::size_t j = 0; j < s.d_model; ++j) {
          const double diff = smp.input(t, j) - ds.means[c](0, j);
          d2 += diff * diff;
        }
      if (d2 < best) best = d2, arg = c;
    }
    correct += arg == smp.cluster;
  }
  EXPECT_EQ(correct, 100u);
}

TEST(Task, SameSeedSameBytes) {
  for (auto kind : {TaskKind::cluster_classification, TaskKind::cluster_regression}) {
    const Dataset a = generate_task(tiny_task(kind));
    const Dataset b = generate_task(tiny_task(kind));
    ASSERT_EQ(a.samples.size(), b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      EXPECT_EQ(digest(a.samples[i].input), digest(b.samples[i].input));
      EXPECT_EQ(digest(a.samples[i].target), digest(b.samples[i].target));
      EXPECT_EQ(a.samples[i].cluster, b.samples[i].cluster);
    }
  }
  auto other = tiny_task();
  other.seed = 6;
  EXPECT_NE(digest(generate_task(other).samples[0].input),
            digest(generate_task(tiny_task()).samples[0].input));
}

TEST(Task, RegressionTargetsFollowClusterMaps) {
  auto s = tiny_task(TaskKind::cluster_regression);
  s.samples = 400;
  s.noise_std = 0.2;
  const Dataset ds = generate_task(s);
  ASSERT_EQ(ds.maps.size(), 3u);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& smp : ds.samples) {
    const Matrix& w = ds.maps[smp.cluster];
    for (std::size_t t = 0; t < s.tokens; ++t)
      for (std::size_t j = 0; j < s.d_model; ++j) {
        double pred = 0.0;
        for (std::size_t k = 0; k < s.d_model; ++k) pred += smp.input(t, k) * w(k, j);
        const double r = smp.target(t, j) - pred;
        sum += r;
        sq += r * r;
        ++n;
      }
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  EXPECT_LE(std::abs(mean), 4.0 * s.noise_std / std::sqrt(static_cast<double>(n)));
  EXPECT_LE(std::abs(sd - s.noise_std), 4.0 * s.noise_std / std::sqrt(2.0 * static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Schedule and optimiser.

TEST(Schedule, PiecewiseLinear) {
  const double base = 0.1;
  EXPECT_DOUBLE_EQ(learning_rate_at(1, 30, base, 10), 0.01);
  EXPECT_DOUBLE_EQ(learning_rate_at(5, 30, base, 10), 0.05);
  EXPECT_DOUBLE_EQ(learning_rate_at(10, 30, base, 10), base);
  EXPECT_DOUBLE_EQ(learning_rate_at(20, 30, base, 10), 0.05);
  EXPECT_DOUBLE_EQ(learning_rate_at(30, 30, base, 10), 0.0);
  double peak = 0.0;
  std::size_t arg = 0;
  for (std::size_t s = 1; s <= 30; ++s) {
    const double lr = learning_rate_at(s, 30, base, 10);
    if (lr > peak) peak = lr, arg = s;
  }
  EXPECT_EQ(arg, 10u);
  // No warmup: decays from the first step.
  EXPECT_DOUBLE_EQ(learning_rate_at(0, 4, 1.0, 0), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate_at(4, 4, 1.0, 0), 0.0);
  // Warmup longer than the run only ramps.
  EXPECT_DOUBLE_EQ(learning_rate_at(5, 8, 1.0, 10), 0.5);
}

TEST(AdamW, MatchesHandRolledTraceOnQuadratic) {
  for (double wd : {0.0, 0.1}) {
    Parameter theta("theta", Matrix(1, 1, -1.0), ParamRole::adapter);
    AdamW opt(0.9, 0.999, 1e-8, wd);
    double x = -1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 50; ++t) {
      const double lr = learning_rate_at(static_cast<std::size_t>(t), 50, 0.1, 5);
      theta.zero_grad();
      backward(sum(square(sub(theta.tensor(), Tensor::constant(Matrix(1, 1, 3.0))))));
      opt.step({&theta}, lr);

      const double g = 2.0 * (x - 3.0);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, t));
      const double vh = v / (1.0 - std::pow(0.999, t));
      x = x - lr * (mh / (std::sqrt(vh) + 1e-8)) - lr * wd * x;
      EXPECT_NEAR(theta.value()(0, 0), x, 1e-13 * std::max(1.0, std::abs(x))) << "step " << t;
    }
  }
}

TEST(AdamW, SkipsFrozenParameters) {
  Parameter a("a", Matrix(1, 2, 1.0), ParamRole::base, true);
  Parameter b("b", Matrix(1, 2, 1.0), ParamRole::adapter);
  backward(sum(square(add(a.tensor(), b.tensor()))));
  AdamW opt(0.9, 0.999, 1e-8, 0.5);
  opt.step({&a, &b}, 0.1);
  EXPECT_EQ(a.value(), Matrix(1, 2, 1.0));
  EXPECT_NE(b.value(), Matrix(1, 2, 1.0));
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.lr = -1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lr = 0.0;
  EXPECT_NO_THROW(t.validate());
}

// ---------------------------------------------------------------------------
// Training loop.

TEST(Train, ZeroEpochsLeavesModelUntouched) {
  const Dataset ds = generate_task(tiny_task());
  Model m = build_model(tiny_model(), perft_r(), ds.spec.kind, ds.output_dim(), 3);
  const auto before = snapshot(m);
  auto cfg = quick_train();
  cfg.epochs = 0;
  EXPECT_TRUE(train(m, ds, cfg).empty());
  EXPECT_EQ(snapshot(m), before);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  const Dataset ds = generate_task(tiny_task());
  Model m = build_model(tiny_model(), perft_r(), ds.spec.kind, ds.output_dim(), 3);
  const auto before = snapshot(m);
  auto cfg = quick_train();
  cfg.lr = 0.0;
  const auto hist = train(m, ds, cfg);
  EXPECT_EQ(hist.size(), 2u * 3u);
  EXPECT_EQ(snapshot(m), before);
}

TEST(Train, FrozenDigestsUnchangedAdaptersMove) {
  const Dataset ds = generate_task(tiny_task());
  for (auto v : {Variant::perft_r, Variant::perft_e, Variant::perft_d, Variant::perft_s,
                 Variant::baseline_qv, Variant::baseline_gate}) {
    auto s = perft_r(2);
    s.variant = v;
    Model m = build_model(tiny_model(), s, ds.spec.kind, ds.output_dim(), 3);
    std::vector<std::uint64_t> before;
    for (const Parameter* p : m.parameters()) before.push_back(digest(p->value()));
    train(m, ds, quick_train());
    bool adapter_moved = false;
    const auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool same = digest(params[i]->value()) == before[i];
      if (params[i]->frozen()) {
        EXPECT_TRUE(same) << params[i]->name();
      }
      if (params[i]->role() == ParamRole::adapter && !same) adapter_moved = true;
    }
    EXPECT_TRUE(adapter_moved) << to_string(v);
  }
}

TEST(Train, DeterministicToTheLastBit) {
  const Dataset ds = generate_task(tiny_task());
  auto cfg = quick_train();
  auto s = perft_r();
  s.dropout = 0.2;
  Model a = build_model(tiny_model(), s, ds.spec.kind, ds.output_dim(), 3);
  Model b = build_model(tiny_model(), s, ds.spec.kind, ds.output_dim(), 3);
  const auto ha = train(a, ds, cfg), hb = train(b, ds, cfg);
  ASSERT_EQ(ha.size(), hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(ha[i].total_loss),
              std::bit_cast<std::uint64_t>(hb[i].total_loss));
    EXPECT_EQ(ha[i].learning_rate, hb[i].learning_rate);
  }
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(Train, LossCompositionAndScheduleHoldEveryStep) {
  const Dataset ds = generate_task(tiny_task(TaskKind::cluster_regression));
  auto cfg = quick_train();
  cfg.aux_coef = 0.05;
  Model m = build_model(tiny_model(), perft_r(), ds.spec.kind, ds.output_dim(), 4);
  const auto hist = train(m, ds, cfg);
  ASSERT_EQ(hist.size(), 6u);
  for (const auto& r : hist) {
    EXPECT_NEAR(r.total_loss, r.task_loss + cfg.aux_coef * (r.lb_moe + r.z_moe + r.lb_peft), 1e-10);
    EXPECT_EQ(r.learning_rate, learning_rate_at(r.step, 6, cfg.lr, cfg.warmup_steps));
    EXPECT_GT(r.lb_peft, 0.0);
  }
  EXPECT_EQ(hist.back().learning_rate, 0.0);
}

TEST(Train, DivergenceNamesTheStep) {
  Dataset ds = generate_task(tiny_task(TaskKind::cluster_regression));
  ds.samples[5].target(0, 0) = std::numeric_limits<double>::infinity();
  auto cfg = quick_train();
  cfg.batch_size = 1;
  cfg.epochs = 1;
  Model m = build_model(tiny_model(), perft_r(), ds.spec.kind, ds.output_dim(), 4);
  try {
    train(m, ds, cfg);
    FAIL() << "expected divergence";
  } catch (const DivergedError& e) {
    EXPECT_GE(e.step(), 1u);
    EXPECT_LE(e.step(), ds.samples.size());
  }
}

TEST(Train, RejectsUntrainableAndMismatchedModels) {
  const Dataset ds = generate_task(tiny_task());
  Model m = build_model(tiny_model(), PeftStrategyConfig{}, ds.spec.kind, ds.output_dim(), 4);
  m.readout.set_frozen(true);
  EXPECT_THROW(train(m, ds, quick_train()), ConfigError);
  Model r = build_model(tiny_model(), perft_r(), TaskKind::cluster_regression, 6, 4);
  EXPECT_THROW(train(r, ds, quick_train()), ConfigError);
}

// ---------------------------------------------------------------------------
// Evaluation.

TEST(Evaluate, RepeatableAndReadOnly) {
  const Dataset ds = generate_task(tiny_task());
  const Model m = build_model(tiny_model(), perft_r(), ds.spec.kind, ds.output_dim(), 6);
  const auto before = snapshot(m);
  const EvalResult a = evaluate(m, ds), b = evaluate(m, ds);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.moe_routing.size(), 1u);
  EXPECT_EQ(a.peft_routing.size(), 1u);
  EXPECT_EQ(a.moe_routing[0].token_fraction, b.moe_routing[0].token_fraction);
  EXPECT_EQ(snapshot(m), before);
}

TEST(Evaluate, LossIsMeanOfPerSampleLosses) {
  for (auto kind : {TaskKind::cluster_classification, TaskKind::cluster_regression}) {
    const Dataset ds = generate_task(tiny_task(kind));
    const Model m = build_model(tiny_model(), perft_r(), kind, ds.output_dim(), 7);
    double total = 0.0;
    for (const auto& s : ds.samples) {
      const Tensor hidden = m.forward(Tensor::constant(s.input)).hidden;
      const Matrix pred = m.head(hidden).value();
      if (kind == TaskKind::cluster_classification) {
        double mx = pred(0, 0);
        for (double v : pred.data()) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : pred.data()) z += std::exp(v - mx);
        total += -(pred(0, s.cluster) - mx - std::log(z));
      } else {
        double se = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) se += std::pow(pred[i] - s.target[i], 2);
        total += se / static_cast<double>(pred.size());
      }
    }
    EXPECT_NEAR(evaluate(m, ds).loss, total / static_cast<double>(ds.samples.size()), 1e-12);
  }
}

TEST(Evaluate, ConstructedPerfectModel) {
  // Noise-free one-hot inputs; a zero backbone is a pure residual stream, so
  // a scaled identity readout classifies perfectly.
  Dataset ds;
  ds.spec = tiny_task();
  ds.spec.d_model = 3;
  ds.spec.noise_std = 0.0;
  for (std::size_t n = 0; n < 9; ++n) {
    Sample s;
    s.cluster = n % 3;
    s.input = Matrix(2, 3);
    s.input(0, s.cluster) = 1.0;
    s.input(1, s.cluster) = 1.0;
    ds.samples.push_back(s);
  }
  ModelConfig mc = tiny_model();
  mc.moe.d_model = 3;
  Model m = build_model(mc, PeftStrategyConfig{}, TaskKind::cluster_classification, 3, 8);
  for (Parameter* p : m.parameters())
    if (p->role() == ParamRole::base) p->mutable_value() = Matrix(p->value().rows(), p->value().cols());
  m.readout.mutable_value() = Matrix{{10, 0, 0}, {0, 10, 0}, {0, 0, 10}};
  const EvalResult r = evaluate(m, ds);
  ASSERT_TRUE(r.accuracy.has_value());
  EXPECT_EQ(*r.accuracy, 1.0);
}

TEST(Digest, SensitiveToShapeAndBits) {
  EXPECT_NE(digest(Matrix(2, 3)), digest(Matrix(3, 2)));
  EXPECT_NE(digest(Matrix(1, 1, 0.0)), digest(Matrix(1, 1, -0.0)));
  EXPECT_EQ(digest(Matrix{{1, 2}}), digest(Matrix{{1, 2}}));
}

#include <gtest/gtest.h>

#include <cmath>

#include "perft/adapters.hpp"
#include "perft/grad_check.hpp"

using namespace perft;

namespace {

Matrix randn(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  return init_matrix(r, c, init::ScaledNormal{s}, rng);
}

BottleneckAdapter random_adapter(std::size_t d, std::size_t db, AdapterArch arch, double alpha,
                                 Rng& rng) {
  BottleneckAdapter a = init_adapter(d, db, arch, alpha, rng);
  a.w_up.mutable_value() = randn(db, d, rng);
  return a;
}

}  // namespace

TEST(Adapter, FreshAdapterIsZeroForAnyInput) {
  for (std::uint64_t seed : {1u, 2u, 3u, 77u}) {
    Rng rng(seed);
    for (auto arch : {AdapterArch::lora, AdapterArch::parallel_adapter}) {
      const BottleneckAdapter a = init_adapter(5, 3, arch, 6.0, rng);
      const Matrix h = randn(4, 5, rng, 10.0);
      EXPECT_EQ(adapter_forward(a, Tensor::constant(h)).value(), Matrix(4, 5));
    }
  }
}

TEST(Adapter, ScalarIdentityLora) {
  BottleneckAdapter a;
  a.w_down = Parameter("d", Matrix{{1.0}}, ParamRole::adapter);
  a.w_up = Parameter("u", Matrix{{1.0}}, ParamRole::adapter);
  a.alpha = 1.0;
  const Matrix h{{0.5}, {-3.0}, {7.25}};
  EXPECT_EQ(adapter_forward(a, Tensor::constant(h)).value(), h);
}

TEST(Adapter, LoraMatchesExplicitLowRankProduct) {
  Rng rng(4);
  const BottleneckAdapter a = random_adapter(3, 2, AdapterArch::lora, 5.0, rng);
  const Matrix h = randn(4, 3, rng);
  // (alpha / D_B) * h (W_down W_up), associating the other way round.
  Matrix w(3, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 2; ++k) w(i, j) += a.w_down.value()(i, k) * a.w_up.value()(k, j);
  Matrix expect(4, 3);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t i = 0; i < 3; ++i) expect(t, j) += h(t, i) * w(i, j);
      expect(t, j) *= 5.0 / 2.0;
    }
  EXPECT_LE(max_abs_diff(adapter_forward(a, Tensor::constant(h)).value(), expect), 1e-13);
}

TEST(Adapter, ParallelAdapterAppliesSilu) {
  Rng rng(5);
  const BottleneckAdapter a = random_adapter(3, 2, AdapterArch::parallel_adapter, 99.0, rng);
  const Matrix h = randn(2, 3, rng);
  Matrix expect(2, 3);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t k = 0; k < 2; ++k) {
      double z = 0.0;
      for (std::size_t i = 0; i < 3; ++i) z += h(t, i) * a.w_down.value()(i, k);
      const double act = z / (1.0 + std::exp(-z));
      for (std::size_t j = 0; j < 3; ++j) expect(t, j) += act * a.w_up.value()(k, j);
    }
  EXPECT_LE(max_abs_diff(adapter_forward(a, Tensor::constant(h)).value(), expect), 1e-14);
}

TEST(Adapter, InitIsDeterministic) {
  Rng a(11), b(11);
  const auto x = init_adapter(8, 3, AdapterArch::lora, 6.0, a);
  const auto y = init_adapter(8, 3, AdapterArch::lora, 6.0, b);
  EXPECT_EQ(x.w_down.value(), y.w_down.value());
  EXPECT_EQ(x.w_up.value(), y.w_up.value());
  EXPECT_EQ(x.w_up.value(), Matrix(3, 8));
}

TEST(Adapter, DownProjectionSampleStd) {
  Rng rng(12);
  const std::size_t d = 256, db = 64;
  const auto a = init_adapter(d, db, AdapterArch::lora, 2.0 * db, rng);
  double mean = 0.0;
  for (double x : a.w_down.value().data()) mean += x;
  mean /= static_cast<double>(d * db);
  double var = 0.0;
  for (double x : a.w_down.value().data()) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(d * db - 1));
  const double target = 1.0 / std::sqrt(static_cast<double>(d));
  EXPECT_LE(std::abs(sd - target) / target, 0.05);
}

TEST(Adapter, ParamCount) {
  Rng rng(13);
  EXPECT_EQ(adapter_param_count(init_adapter(2048, 4, AdapterArch::lora, 8.0, rng)), 16384u);
  EXPECT_EQ(adapter_param_count(init_adapter(2, 1, AdapterArch::lora, 2.0, rng)), 4u);
  EXPECT_EQ(adapter_param_count(init_adapter(10, 3, AdapterArch::parallel_adapter, 2.0, rng)),
            adapter_param_count(init_adapter(10, 3, AdapterArch::lora, 2.0, rng)));
  EXPECT_THROW(init_adapter(4, 0, AdapterArch::lora, 2.0, rng), ArgumentError);
}

TEST(Adapter, ShapeMismatch) {
  Rng rng(14);
  const auto a = init_adapter(4, 2, AdapterArch::lora, 4.0, rng);
  EXPECT_THROW(adapter_forward(a, Tensor::constant(Matrix(1, 5))), ShapeError);
}

TEST(Adapter, LoraIsLinear) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_adapter(5, 3, AdapterArch::lora, 6.0, rng);
    const Matrix h = randn(3, 5, rng);
    const double c = 3.0 * rng.normal();
    Matrix ch = h;
    ch *= c;
    Matrix expect = adapter_forward(a, Tensor::constant(h)).value();
    expect *= c;
    EXPECT_LE(max_abs_diff(adapter_forward(a, Tensor::constant(ch)).value(), expect), 1e-12);
  }
}

TEST(Adapter, LoraScalingLaw) {
  Rng rng(16);
  const auto a = random_adapter(6, 2, AdapterArch::lora, 3.0, rng);
  const Tensor h = Tensor::constant(randn(4, 6, rng));
  const Matrix base = adapter_forward(a, h).value();

  BottleneckAdapter doubled = a;
  doubled.alpha = 6.0;
  const Matrix twice = adapter_forward(doubled, h).value();
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(twice[i], 2.0 * base[i]);

  // Zero-pad the same matrices to D_B = 4: the product is unchanged, so the
  // output must halve because alpha / D_B halves.
  BottleneckAdapter padded = a;
  Matrix down(6, 4), up(4, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 2; ++k) down(i, k) = a.w_down.value()(i, k);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 6; ++j) up(k, j) = a.w_up.value()(k, j);
  padded.w_down.mutable_value() = down;
  padded.w_up.mutable_value() = up;
  const Matrix half = adapter_forward(padded, h).value();
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base[i], 2.0 * half[i]);
}

TEST(Adapter, GradCheckBothArchitectures) {
  Rng rng(17);
  for (auto arch : {AdapterArch::lora, AdapterArch::parallel_adapter}) {
    auto a = random_adapter(5, 3, arch, 6.0, rng);
    const Tensor h = Tensor::constant(randn(4, 5, rng));
    auto f = [&] { return sum(square(adapter_forward(a, h))); };
    const auto rep = grad_check(f, {&a.w_down, &a.w_up}, 1e-5, 1e-6);
    EXPECT_TRUE(rep.passed) << to_string(arch) << ": " << rep.max_rel_error;
  }
}

#pragma once

#include <cmath>
#include <vector>

#include "perft/moe.hpp"

namespace perft {

struct RoutingStats {
  std::vector<double> token_fraction;  // f_i, sums to 1
  std::vector<double> mean_prob;       // P_i
  double entropy = 0.0;                // of f, in nats
  std::size_t tokens = 0;
};

/// Accumulates RouterOutputs token by token; order-insensitive up to
/// floating-point summation of the probabilities.
class RoutingAccumulator {
 public:
  explicit RoutingAccumulator(std::size_t num_experts = 0)
      : counts_(num_experts, 0), prob_sum_(num_experts, 0.0) {}

  void add(const RouterOutput& ro) {
    if (counts_.empty()) {
      counts_.assign(ro.num_experts(), 0);
      prob_sum_.assign(ro.num_experts(), 0.0);
    }
    if (ro.num_experts() != counts_.size()) throw ShapeError("RoutingAccumulator: expert count");
    const Matrix& p = ro.probs.value();
    for (std::size_t t = 0; t < ro.tokens(); ++t) {
      for (auto i : ro.selected[t]) ++counts_[i];
      selections_ += ro.selected[t].size();
      for (std::size_t i = 0; i < counts_.size(); ++i) prob_sum_[i] += p(t, i);
    }
    tokens_ += ro.tokens();
  }

  RoutingStats finish() const {
    RoutingStats s;
    s.tokens = tokens_;
    s.token_fraction.resize(counts_.size(), 0.0);
    s.mean_prob.resize(counts_.size(), 0.0);
    if (tokens_ == 0) return s;
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      s.token_fraction[i] = static_cast<double>(counts_[i]) / static_cast<double>(selections_);
      s.mean_prob[i] = prob_sum_[i] / static_cast<double>(tokens_);
      const double f = s.token_fraction[i];
      if (f > 0.0) s.entropy -= f * std::log(f);
    }
    return s;
  }

 private:
  std::vector<std::size_t> counts_;
  std::vector<double> prob_sum_;
  std::size_t selections_ = 0;
  std::size_t tokens_ = 0;
};

}  // namespace perft

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "perft/parameter.hpp"

namespace perft {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Central-difference check of reverse-mode gradients.
///
/// `loss_fn` must rebuild the graph from the parameters' current values on
/// every call and return a 1x1 tensor. Each coordinate's error is
/// |analytic - numeric| / max(floor, |analytic|, |numeric|); the floor keeps
/// coordinates whose true derivative is ~0 from reporting pure round-off as
/// relative error.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, const ParamRefs& params,
                                  double eps = 1e-5, double tol = 1e-6, double floor = 1.0) {
  if (!(eps > 0.0)) throw ArgumentError("grad_check: eps must be positive");

  auto eval = [&]() {
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite loss");
    return v;
  };

  for (auto* p : params) p->zero_grad();
  {
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw EvaluationError("grad_check: non-finite loss");
    backward(loss);
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    analytic.push_back(p->grad() ? *p->grad() : Matrix(p->value().rows(), p->value().cols()));
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& w = params[k]->mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double fp = eval();
      w[i] = orig - eps;
      const double fm = eval();
      w[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      const double err =
          std::abs(a - numeric) / std::max({floor, std::abs(a), std::abs(numeric)});
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_param = params[k]->name();
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (auto* p : params) p->zero_grad();
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace perft

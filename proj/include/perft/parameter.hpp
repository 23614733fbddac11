#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "perft/autograd.hpp"

namespace perft {

/// What a parameter is for; drives freezing and parameter accounting.
enum class ParamRole {
  base,         // pretrained backbone weight, frozen under every PEFT strategy
  adapter,      // bottleneck adapter factor (incl. attention / gate LoRA)
  peft_router,  // router over PEFT experts
  head,         // task readout; always trainable, never counted
};

inline const char* to_string(ParamRole r) {
  switch (r) {
    case ParamRole::base: return "base";
    case ParamRole::adapter: return "adapter";
    case ParamRole::peft_router: return "peft_router";
    case ParamRole::head: return "head";
  }
  return "?";
}

/// A named, persistent leaf of the computation graph. Copying a Parameter
/// deep-copies its value; the copy never shares gradient state.
class Parameter {
 public:
  Parameter() = default;

  Parameter(std::string name, Matrix value, ParamRole role, bool frozen = false)
      : name_(std::move(name)), role_(role), leaf_(Tensor::leaf(std::move(value), !frozen)) {}

  Parameter(const Parameter& o)
      : name_(o.name_), role_(o.role_), leaf_(Tensor::leaf(o.value(), !o.frozen())) {}

  Parameter& operator=(const Parameter& o) {
    if (this != &o) {
      name_ = o.name_;
      role_ = o.role_;
      leaf_ = Tensor::leaf(o.value(), !o.frozen());
    }
    return *this;
  }

  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const noexcept { return name_; }
  ParamRole role() const noexcept { return role_; }

  /// Graph handle. Ops built on it route gradients back here.
  const Tensor& tensor() const noexcept { return leaf_; }

  const Matrix& value() const { return leaf_.value(); }

  /// Direct write access, for optimizers, loaders and finite differences.
  Matrix& mutable_value() { return leaf_.node()->value; }

  const Matrix* grad() const { return leaf_.grad(); }
  void zero_grad() { leaf_.node()->grad.reset(); }

  bool frozen() const { return !leaf_.requires_grad(); }
  void set_frozen(bool f) {
    leaf_.node()->requires_grad = !f;
    if (f) zero_grad();
  }

  std::size_t size() const { return value().size(); }

 private:
  std::string name_;
  ParamRole role_ = ParamRole::base;
  Tensor leaf_;
};

using ParamRefs = std::vector<Parameter*>;

}  // namespace perft

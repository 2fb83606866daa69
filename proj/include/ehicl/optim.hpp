// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehicl/tensor.hpp"

namespace ehicl {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamWOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay.
///
///   w <- w - lr * wd * w
///   w <- w - lr * m_hat / (sqrt(v_hat) + eps)
///
/// with bias-corrected first and second moments. Gradients are zeroed after
/// each step.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWOptions options = {});

  /// Throws Error naming every parameter that has no gradient buffer.
  void step();
  void zero_grad();

  std::uint64_t step_count() const { return step_; }
  const AdamWOptions& options() const { return options_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedTensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace ehicl

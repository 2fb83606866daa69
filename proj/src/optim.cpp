// SPDX-License-Identifier: Apache-2.0
#include "ehicl/optim.hpp"

#include <cmath>

#include "ehicl/error.hpp"

namespace ehicl {

AdamW::AdamW(std::vector<NamedTensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.tensor.defined()) throw Error("AdamW: parameter '" + p.name + "' is undefined");
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  std::string missing;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) missing += (missing.empty() ? "" : ", ") + p.name;
  }
  if (!missing.empty()) throw Error("AdamW::step: no gradient for parameter(s): " + missing);

  ++step_;
  const double lr = options_.learning_rate;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = params_[k].tensor;
    auto data = w.mutable_data();
    const auto grad = w.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      data[i] -= lr * options_.weight_decay * data[i];
      data[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace ehicl

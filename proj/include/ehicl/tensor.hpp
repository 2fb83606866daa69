// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ehicl/random.hpp"

namespace ehicl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  bool recorded = false;  // produced by an op recorded on a tape
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() for
/// a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, RandomStream& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor eye(std::size_t n);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Extent along `axis`; negative axes count from the end.
  std::size_t dim(int axis) const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double operator[](std::size_t i) const { return data()[i]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> grad_buffer() const;
  void zero_grad();

  Tensor clone() const;
  /// Copy of the values with no gradient tracking.
  Tensor detach() const { return clone(); }

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
  friend Tensor make_result(Shape shape, std::vector<double> data);
};

/// Allocates an op result. Used by op implementations.
Tensor make_result(Shape shape, std::vector<double> data);

/// Ordered record of differentiable operations.
///
/// Ops append themselves when a tape is active on the current thread (see
/// TapeScope) and at least one input requires a gradient. Recording order is
/// a topological order by construction, so backward() is a single reverse
/// sweep that visits every node once.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward);

  /// Populates gradients of every requires-grad tensor reachable from `loss`.
  /// Leaf gradients accumulate across calls; intermediate gradients are reset
  /// at the start of each call.
  void backward(const Tensor& loss);

  void clear();
  std::size_t size() const { return nodes_.size(); }

  /// Number of node backward rules executed by the most recent backward().
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

/// Makes `tape` the active tape for the current thread for the scope's
/// lifetime. Scopes nest; the previous tape is restored on exit.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Backward on the thread's active tape.
void backward(const Tensor& loss);

/// Finite-value checks after every op. On by default in debug builds.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();
void check_finite(const Tensor& t, const char* where);

}  // namespace ehicl

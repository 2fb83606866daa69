// SPDX-License-Identifier: Apache-2.0
#include "ehicl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ehicl/error.hpp"

namespace ehicl {

namespace {

thread_local Tape* g_active_tape = nullptr;

#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

const detail::TensorImpl& require(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw Error("use of an undefined tensor");
  return *impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("Tensor::from_data: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::randn(Shape shape, RandomStream& rng, double stddev, bool requires_grad) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = stddev * rng.normal();
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::eye(std::size_t n) {
  Tensor t = zeros({n, n});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return t;
}

const Shape& Tensor::shape() const { return require(impl_).shape; }

std::size_t Tensor::numel() const { return require(impl_).data.size(); }

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("Tensor::dim: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::data() const { return require(impl_).data; }

std::span<double> Tensor::mutable_data() {
  require(impl_);
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape()) +
                                     " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return require(impl_).requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require(impl_);
  impl_->requires_grad = value;
}

bool Tensor::has_grad() const { return !require(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const { return require(impl_).grad; }

std::span<double> Tensor::grad_buffer() const {
  require(impl_);
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  auto g = grad_buffer();
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& impl = require(impl_);
  return from_data(impl.shape, impl.data);
}

Tensor make_result(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

void Tape::record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward) {
  output.impl_->requires_grad = true;
  output.impl_->recorded = true;
  nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  std::size_t end = nodes_.size();
  while (end > 0 && !nodes_[end - 1].output.is_same(loss)) --end;
  if (end == 0) throw Error("backward: loss was not recorded on this tape");

  for (std::size_t i = 0; i < end; ++i) nodes_[i].output.impl_->grad.clear();
  loss.grad_buffer()[0] = 1.0;

  last_visits_ = 0;
  for (std::size_t i = end; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output.impl_->grad.empty()) continue;  // not reachable from loss
    node.backward();
    ++last_visits_;
  }
}

void Tape::clear() {
  nodes_.clear();
  last_visits_ = 0;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw Error("backward: no active tape on this thread");
  tape->backward(loss);
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

bool finite_checks_enabled() { return g_finite_checks; }

void check_finite(const Tensor& t, const char* where) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericalError(std::string(where) + ": non-finite value at flat index " +
                           std::to_string(i) + " of tensor " + shape_str(t.shape()));
    }
  }
}

}  // namespace ehicl

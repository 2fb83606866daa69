// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "ehicl/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the active
// tape when any input requires a gradient. Shape violations throw ShapeError
// with the op name and the offending shapes.
//
// Broadcasting is limited to leading axes: in binary elementwise ops one
// operand may have a shape that is a suffix of the other's (a bias row over a
// batch of rows, say). Batched matmul broadcasts a rank-2 operand over the
// other operand's batch axes.
namespace ehicl {

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);     // [..., n, k] x [..., k, m]
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // [..., n, k] x [..., m, k]^T

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
/// This is the nonlinearity used by every MLP in the pipeline.
Tensor gelu(const Tensor& a);

/// Elementwise map with a caller-supplied derivative; `derivative(x, y)`
/// receives the input and the forward value.
Tensor map_elementwise(const Tensor& a, const std::function<double(double)>& fn,
                       const std::function<double(double, double)>& derivative,
                       const char* name = "map_elementwise");

// Normalization over the last axis.
Tensor softmax(const Tensor& a);
/// Zero mean, unit variance over the last axis; no affine part.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);

// Structure.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
/// Gathers entries along `axis`; indices may repeat (gradients accumulate).
Tensor take(const Tensor& a, int axis, const std::vector<std::size_t>& indices);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_last(const Tensor& a);  // drops the last axis
/// Max over the second-to-last axis: [..., n, m] -> [..., m].
Tensor max_over_rows(const Tensor& a);
Tensor l1_norm(const Tensor& a);       // sum |x|
Tensor squared_norm(const Tensor& a);  // sum x^2
Tensor l2_norm(const Tensor& a);       // sqrt(sum x^2)

}  // namespace ehicl

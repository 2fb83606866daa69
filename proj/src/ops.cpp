// SPDX-License-Identifier: Apache-2.0
#include "ehicl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "ehicl/error.hpp"

namespace ehicl {

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(Tensor out, const char* name) {
  if (finite_checks_enabled()) check_finite(out, name);
  return out;
}

void check_defined(const Tensor& t, const char* name) {
  if (!t.defined()) throw Error(std::string(name) + ": undefined input tensor");
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* name, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  return static_cast<std::size_t>(a);
}

// ---------------------------------------------------------------------------
// GEMM kernels on row-major blocks; all accumulate into C.

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// C[n,m] += A[n,k] * B[k,m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  MutMap(c, n, m).noalias() += ConstMap(a, n, k) * ConstMap(b, k, m);
}

// C[n,m] += A[n,k] * B[m,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  MutMap(c, n, m).noalias() += ConstMap(a, n, k) * ConstMap(b, m, k).transpose();
}

// C[n,m] += A[k,n]^T * B[k,m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
             std::size_t m) {
  MutMap(c, n, m).noalias() += ConstMap(a, k, n).transpose() * ConstMap(b, k, m);
}

struct MatmulPlan {
  std::size_t batch = 1, n = 0, k = 0, m = 0;
  bool a_shared = false;  // rank-2 operand reused for every batch entry
  bool b_shared = false;
  Shape out_shape;
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs, bool b_transposed, const char* name) {
  auto fail = [&](const std::string& why) {
    throw ShapeError(std::string(name) + ": " + why + " (lhs " + shape_str(as) + ", rhs " +
                     shape_str(bs) + ")");
  };
  if (as.size() < 2 || bs.size() < 2) fail("operands must have rank >= 2");
  MatmulPlan p;
  p.n = as[as.size() - 2];
  p.k = as[as.size() - 1];
  const std::size_t bk = b_transposed ? bs[bs.size() - 1] : bs[bs.size() - 2];
  p.m = b_transposed ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (bk != p.k) fail("inner dimensions differ");
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  Shape batch_shape;
  if (a_batch == b_batch) {
    batch_shape = a_batch;
  } else if (a_batch.empty()) {
    p.a_shared = true;
    batch_shape = b_batch;
  } else if (b_batch.empty()) {
    p.b_shared = true;
    batch_shape = a_batch;
  } else {
    fail("batch dimensions differ");
  }
  p.batch = shape_numel(batch_shape);
  p.out_shape = batch_shape;
  p.out_shape.push_back(p.n);
  p.out_shape.push_back(p.m);
  return p;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool b_transposed, const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  const MatmulPlan p = plan_matmul(a.shape(), b.shape(), b_transposed, name);
  const std::size_t a_stride = p.a_shared ? 0 : p.n * p.k;
  const std::size_t b_stride = p.b_shared ? 0 : p.k * p.m;
  const std::size_t c_stride = p.n * p.m;
  std::vector<double> out(p.batch * c_stride, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t t = 0; t < p.batch; ++t) {
    if (b_transposed) {
      gemm_nt(ad + t * a_stride, bd + t * b_stride, out.data() + t * c_stride, p.n, p.k, p.m);
    } else {
      gemm_nn(ad + t * a_stride, bd + t * b_stride, out.data() + t * c_stride, p.n, p.k, p.m);
    }
  }
  Tensor result = make_result(p.out_shape, std::move(out));
  if (tracking({&a, &b})) {
    active_tape()->record({a, b}, result, [a, b, result, p, a_stride, b_stride, c_stride,
                                           b_transposed]() {
      const double* g = result.grad().data();
      const double* ad = a.data().data();
      const double* bd = b.data().data();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        for (std::size_t t = 0; t < p.batch; ++t) {
          // dA = dC B^T  (or dC B when B was used transposed)
          if (b_transposed) {
            gemm_nn(g + t * c_stride, bd + t * b_stride, ga + t * a_stride, p.n, p.m, p.k);
          } else {
            gemm_nt(g + t * c_stride, bd + t * b_stride, ga + t * a_stride, p.n, p.m, p.k);
          }
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        for (std::size_t t = 0; t < p.batch; ++t) {
          if (b_transposed) {
            // dB[m,k] = dC^T A
            gemm_tn(g + t * c_stride, ad + t * a_stride, gb + t * b_stride, p.n, p.m, p.k);
          } else {
            // dB[k,m] = A^T dC
            gemm_tn(ad + t * a_stride, g + t * c_stride, gb + t * b_stride, p.n, p.k, p.m);
          }
        }
      }
    });
  }
  return finish(result, name);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with leading-axis broadcasting.

struct BroadcastPlan {
  Shape out_shape;
  std::size_t n_out = 0, n_a = 0, n_b = 0;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

BroadcastPlan plan_broadcast(const Tensor& a, const Tensor& b, const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  BroadcastPlan p;
  if (is_suffix(b.shape(), a.shape())) {
    p.out_shape = a.shape();
  } else if (is_suffix(a.shape(), b.shape())) {
    p.out_shape = b.shape();
  } else {
    throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not broadcast-compatible");
  }
  p.n_out = shape_numel(p.out_shape);
  p.n_a = a.numel();
  p.n_b = b.numel();
  return p;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const BroadcastPlan p = plan_broadcast(a, b, name);
  std::vector<double> out(p.n_out);
  const auto ad = a.data();
  const auto bd = b.data();
  if (p.n_a == p.n_out && p.n_b == p.n_out) {
    for (std::size_t i = 0; i < p.n_out; ++i) {
      switch (kind) {
        case BinaryKind::kAdd: out[i] = ad[i] + bd[i]; break;
        case BinaryKind::kSub: out[i] = ad[i] - bd[i]; break;
        case BinaryKind::kMul: out[i] = ad[i] * bd[i]; break;
      }
    }
  } else {
    for (std::size_t i = 0; i < p.n_out; ++i) {
      const double x = ad[i % p.n_a];
      const double y = bd[i % p.n_b];
      switch (kind) {
        case BinaryKind::kAdd: out[i] = x + y; break;
        case BinaryKind::kSub: out[i] = x - y; break;
        case BinaryKind::kMul: out[i] = x * y; break;
      }
    }
  }
  Tensor result = make_result(p.out_shape, std::move(out));
  if (tracking({&a, &b})) {
    active_tape()->record({a, b}, result, [a, b, result, p, kind]() {
      const auto g = result.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        const auto bd = b.data();
        for (std::size_t i = 0; i < p.n_out; ++i) {
          const double d = kind == BinaryKind::kMul ? bd[i % p.n_b] : 1.0;
          ga[i % p.n_a] += g[i] * d;
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        const auto ad = a.data();
        for (std::size_t i = 0; i < p.n_out; ++i) {
          double d = 1.0;
          if (kind == BinaryKind::kSub) d = -1.0;
          if (kind == BinaryKind::kMul) d = ad[i % p.n_a];
          gb[i % p.n_b] += g[i] * d;
        }
      }
    });
  }
  return finish(result, name);
}

// Elementwise unary op given value and derivative rules.
template <typename Fn, typename Df>
Tensor unary(const Tensor& a, Fn fn, Df df, const char* name) {
  check_defined(a, name);
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fn(ad[i]);
  Tensor result = make_result(a.shape(), std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, df]() {
      const auto g = result.grad();
      const auto x = a.data();
      const auto y = result.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
  }
  return finish(result, name);
}

// Splits a shape into (outer, extent, inner) around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Reduction to a scalar: value = fold(data), grad_i = g * df(x_i, value).
template <typename Df>
Tensor scalar_reduction(const Tensor& a, double value, Df df, const char* name) {
  Tensor result = make_result({}, {value});
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, df]() {
      const double g = result.grad()[0];
      const double v = result.data()[0];
      const auto x = a.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * df(x[i], v);
    });
  }
  return finish(result, name);
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, "matmul"); }

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  return matmul_impl(a, b, true, "matmul_bt");
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; }, "scale");
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; },
      "add_scalar");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, "abs");
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kC * (x + kA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
      },
      "gelu");
}

Tensor map_elementwise(const Tensor& a, const std::function<double(double)>& fn,
                       const std::function<double(double, double)>& derivative,
                       const char* name) {
  return unary(a, fn, derivative, name);
}

Tensor softmax(const Tensor& a) {
  check_defined(a, "softmax");
  if (a.rank() == 0) throw ShapeError("softmax: needs rank >= 1, got scalar");
  const std::size_t m = a.dim(-1);
  const std::size_t rows = m == 0 ? 0 : a.numel() / m;
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    double* yr = out.data() + r * m;
    const double mx = *std::max_element(xr, xr + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < m; ++j) yr[j] /= total;
  }
  Tensor result = make_result(a.shape(), std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, rows, m]() {
      const auto g = result.grad();
      const auto y = result.data();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
        for (std::size_t j = 0; j < m; ++j) {
          ga[r * m + j] += y[r * m + j] * (g[r * m + j] - dot);
        }
      }
    });
  }
  return finish(result, "softmax");
}

Tensor layer_norm(const Tensor& a, double eps) {
  check_defined(a, "layer_norm");
  if (a.rank() == 0) throw ShapeError("layer_norm: needs rank >= 1, got scalar");
  const std::size_t m = a.dim(-1);
  const std::size_t rows = m == 0 ? 0 : a.numel() / m;
  const auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += xr[j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = (xr[j] - mu) * inv_std[r];
  }
  Tensor result = make_result(a.shape(), std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, rows, m, inv_std]() {
      const auto g = result.grad();
      const auto y = result.data();
      auto ga = a.grad_buffer();
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t r = 0; r < rows; ++r) {
        double g_mean = 0.0, gy_mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          g_mean += g[r * m + j];
          gy_mean += g[r * m + j] * y[r * m + j];
        }
        g_mean *= inv_m;
        gy_mean *= inv_m;
        for (std::size_t j = 0; j < m; ++j) {
          ga[r * m + j] += inv_std[r] * (g[r * m + j] - g_mean - y[r * m + j] * gy_mean);
        }
      }
    });
  }
  return finish(result, "layer_norm");
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const auto x = a.data();
  Tensor result = make_result(std::move(shape), std::vector<double>(x.begin(), x.end()));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result]() {
      const auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "permute");
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  {
    std::vector<bool> seen(r, false);
    bool ok = axes.size() == r;
    for (std::size_t i = 0; ok && i < axes.size(); ++i) {
      ok = axes[i] < r && !seen[axes[i]];
      if (ok) seen[axes[i]] = true;
    }
    if (!ok) throw ShapeError("permute: invalid axis order for shape " + shape_str(in));
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = a.numel();
  // source[i] = flat input index feeding flat output index i.
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    source[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto x = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[source[i]];
  Tensor result = make_result(out_shape, std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, source = std::move(source)]() {
      const auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[source[i]] += g[i];
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) check_defined(p, "concat");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat", first);
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " +
                       shape_str(first) + " along axis " + std::to_string(axis));
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit split = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> block_sizes;
  for (const auto& p : parts) block_sizes.push_back(p.shape()[ax] * split.inner);
  const std::size_t out_block = split.extent * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto x = parts[k].data();
      std::copy_n(x.data() + o * block_sizes[k], block_sizes[k], out.data() + o * out_block + col);
      col += block_sizes[k];
    }
  }
  Tensor result = make_result(out_shape, std::move(out));
  bool any = false;
  if (active_tape()) {
    for (const auto& p : parts) any = any || p.requires_grad();
  }
  if (any) {
    active_tape()->record(parts, result, [parts, result, split, block_sizes, out_block]() {
      const auto g = result.grad();
      std::size_t col = 0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (parts[k].requires_grad()) {
          auto gp = parts[k].grad_buffer();
          for (std::size_t o = 0; o < split.outer; ++o) {
            const double* src = g.data() + o * out_block + col;
            double* dst = gp.data() + o * block_sizes[k];
            for (std::size_t i = 0; i < block_sizes[k]; ++i) dst[i] += src[i];
          }
        }
        col += block_sizes[k];
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  check_defined(a, "slice");
  const std::size_t ax = normalize_axis(axis, a.rank(), "slice", a.shape());
  if (begin > end || end > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_str(a.shape()) + " axis " +
                     std::to_string(axis));
  }
  const AxisSplit split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t in_block = split.extent * split.inner;
  const std::size_t out_block = (end - begin) * split.inner;
  const std::size_t skip = begin * split.inner;
  const auto x = a.data();
  std::vector<double> out(split.outer * out_block);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.data() + o * in_block + skip, out_block, out.data() + o * out_block);
  }
  Tensor result = make_result(out_shape, std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, split, in_block, out_block, skip]() {
      const auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t i = 0; i < out_block; ++i) {
          ga[o * in_block + skip + i] += g[o * out_block + i];
        }
      }
    });
  }
  return result;
}

Tensor take(const Tensor& a, int axis, const std::vector<std::size_t>& indices) {
  check_defined(a, "take");
  const std::size_t ax = normalize_axis(axis, a.rank(), "take", a.shape());
  const AxisSplit split = split_at(a.shape(), ax);
  for (auto i : indices) {
    if (i >= split.extent) {
      throw ShapeError("take: index " + std::to_string(i) + " out of range for shape " +
                       shape_str(a.shape()) + " axis " + std::to_string(axis));
    }
  }
  Shape out_shape = a.shape();
  out_shape[ax] = indices.size();
  const std::size_t in_block = split.extent * split.inner;
  const std::size_t out_block = indices.size() * split.inner;
  const auto x = a.data();
  std::vector<double> out(split.outer * out_block);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::copy_n(x.data() + o * in_block + indices[k] * split.inner, split.inner,
                  out.data() + o * out_block + k * split.inner);
    }
  }
  Tensor result = make_result(out_shape, std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, indices, split, in_block, out_block]() {
      const auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t k = 0; k < indices.size(); ++k) {
          const double* src = g.data() + o * out_block + k * split.inner;
          double* dst = ga.data() + o * in_block + indices[k] * split.inner;
          for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  double total = 0.0;
  for (double v : a.data()) total += v;
  return scalar_reduction(a, total, [](double, double) { return 1.0; }, "sum");
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return scalar_reduction(a, total * inv, [inv](double, double) { return inv; }, "mean");
}

Tensor sum_last(const Tensor& a) {
  check_defined(a, "sum_last");
  if (a.rank() == 0) throw ShapeError("sum_last: needs rank >= 1, got scalar");
  const std::size_t m = a.dim(-1);
  const std::size_t rows = m == 0 ? 0 : a.numel() / m;
  const auto x = a.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) out[r] += x[r * m + j];
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor result = make_result(out_shape, std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, rows, m]() {
      const auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += g[r];
      }
    });
  }
  return finish(result, "sum_last");
}

Tensor max_over_rows(const Tensor& a) {
  check_defined(a, "max_over_rows");
  if (a.rank() < 2) throw ShapeError("max_over_rows: needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t n = a.dim(-2);
  const std::size_t m = a.dim(-1);
  if (n == 0) throw ShapeError("max_over_rows: zero rows in " + shape_str(a.shape()));
  const std::size_t batch = a.numel() / (n * m);
  const auto x = a.data();
  std::vector<double> out(batch * m);
  std::vector<std::size_t> argmax(batch * m);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data() + b * n * m;
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (xb[i * m + j] > xb[best * m + j]) best = i;
      }
      out[b * m + j] = xb[best * m + j];
      argmax[b * m + j] = b * n * m + best * m + j;
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  Tensor result = make_result(out_shape, std::move(out));
  if (tracking({&a})) {
    active_tape()->record({a}, result, [a, result, argmax = std::move(argmax)]() {
      const auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[argmax[i]] += g[i];
    });
  }
  return finish(result, "max_over_rows");
}

Tensor l1_norm(const Tensor& a) {
  check_defined(a, "l1_norm");
  double total = 0.0;
  for (double v : a.data()) total += std::fabs(v);
  return scalar_reduction(
      a, total, [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
      "l1_norm");
}

Tensor squared_norm(const Tensor& a) {
  check_defined(a, "squared_norm");
  double total = 0.0;
  for (double v : a.data()) total += v * v;
  return scalar_reduction(a, total, [](double x, double) { return 2.0 * x; }, "squared_norm");
}

Tensor l2_norm(const Tensor& a) {
  check_defined(a, "l2_norm");
  double total = 0.0;
  for (double v : a.data()) total += v * v;
  const double norm = std::sqrt(total);
  return scalar_reduction(
      a, norm, [](double x, double n) { return n > 0.0 ? x / n : 0.0; }, "l2_norm");
}

}  // namespace ehicl

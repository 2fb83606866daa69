// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "ehicl/error.hpp"
#include "ehicl/ops.hpp"
#include "ehicl/optim.hpp"
#include "ehicl/random.hpp"
#include "support/grad_check.hpp"
#include "support/op_cases.hpp"

namespace ehicl {
namespace {

using testing::numeric_gradient;
using testing::op_cases;
using testing::relative_error;

TEST(ForwardOps, MatmulByIdentityIsNoOp) {
  RandomStream rng(7);
  Tensor a = Tensor::randn({3, 3}, rng);
  Tensor c = matmul(Tensor::eye(3), a);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(ForwardOps, SoftmaxOfZerosIsUniform) {
  Tensor s = softmax(Tensor::zeros({3}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-15);
}

TEST(ForwardOps, LayerNormOfConstantVectorIsNearZero) {
  Tensor y = layer_norm(Tensor::full({8}, 4.25));
  for (double v : y.data()) EXPECT_LT(std::fabs(v), 1e-3);
}

TEST(ForwardOps, ShapeMismatchNamesOpAndShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), ShapeError);
}

TEST(ForwardOps, BroadcastAddsBiasOverLeadingAxes) {
  Tensor x = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor b = Tensor::from_data({2}, {10, 20});
  Tensor y = add(x, b);
  EXPECT_EQ(y[0], 11);
  EXPECT_EQ(y[1], 22);
  EXPECT_EQ(y[7], 28);
}

TEST(ForwardOps, SoftmaxRowsAreStochastic) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomStream rng(seed);
    Tensor x = Tensor::randn({5, 7}, rng, 10.0);
    Tensor y = softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y[r * 7 + j], 0.0);
        total += y[r * 7 + j];
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(ForwardOps, PermuteMatchesIndexing) {
  Tensor x = Tensor::from_data({2, 3, 4}, [] {
    std::vector<double> v(24);
    for (int i = 0; i < 24; ++i) v[i] = i;
    return v;
  }());
  Tensor y = permute(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[c * 6 + a * 3 + b], x[a * 12 + b * 4 + c]);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Tensor x = Tensor::from_data({4}, {1, -2, 3, 0.5}, true);
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareSumGivesTwiceInput) {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape tape;
  Tensor x = Tensor::zeros({3}, true);
  TapeScope scope(tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  Tape tape;
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  TapeScope scope(tape);
  Tensor loss = add(sum(x), sum(scale(x, 3.0)));
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 4.0);
}

TEST(Backward, VisitsEachReachableNodeOnceInReverse) {
  Tape tape;
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  TapeScope scope(tape);
  Tensor a = scale(x, 2.0);
  Tensor unused = square(x);
  Tensor loss = sum(a);
  ASSERT_EQ(tape.size(), 3u);
  tape.backward(loss);
  EXPECT_EQ(tape.last_backward_visits(), 2u);
  (void)unused;
}

// Random 3-layer MLP against the finite-difference oracle.
TEST(Backward, MlpMatchesFiniteDifferences) {
  RandomStream rng(11);
  Tensor x = Tensor::randn({4, 5}, rng);
  Tensor w1 = Tensor::randn({5, 8}, rng, 0.5, true);
  Tensor b1 = Tensor::randn({8}, rng, 0.1, true);
  Tensor w2 = Tensor::randn({8, 8}, rng, 0.5, true);
  Tensor b2 = Tensor::randn({8}, rng, 0.1, true);
  Tensor w3 = Tensor::randn({8, 2}, rng, 0.5, true);
  auto forward = [&] {
    Tensor h = gelu(add(matmul(x, w1), b1));
    h = gelu(add(matmul(h, w2), b2));
    return squared_norm(matmul(h, w3));
  };
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(forward());
  }
  for (Tensor* p : {&w1, &b1, &w2, &b2, &w3}) {
    const auto numeric = numeric_gradient(*p, [&] { return forward().item(); });
    EXPECT_LT(relative_error(p->grad(), numeric), 1e-3);
  }
}

// Every op against central differences on 20 seeds. The loss contracts the
// op output with a fixed random weighting so every output entry matters.
TEST(Backward, EveryOpMatchesFiniteDifferencesOnTwentySeeds) {
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      RandomStream rng(1000 + seed);
      std::vector<Tensor> inputs;
      for (const auto& s : c.input_shapes) inputs.push_back(Tensor::randn(s, rng, c.input_scale, true));
      const Tensor probe = c.op(inputs);
      const Tensor weights = Tensor::randn(probe.shape(), rng);
      auto loss = [&] { return sum(mul(c.op(inputs), weights)); };
      for (auto& t : inputs) t.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        tape.backward(loss());
      }
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto numeric = numeric_gradient(inputs[k], [&] { return loss().item(); });
        EXPECT_LT(relative_error(inputs[k].grad(), numeric), 1e-3)
            << c.name << " input " << k << " seed " << seed;
      }
    }
  }
}

TEST(Backward, ReplayIsBitIdentical) {
  auto run = [] {
    RandomStream rng(5);
    Tensor w = Tensor::randn({6, 6}, rng, 0.4, true);
    Tensor x = Tensor::randn({3, 6}, rng);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = mean(square(softmax(matmul(layer_norm(x), w))));
    tape.backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, IsLinearInTheLoss) {
  RandomStream rng(9);
  Tensor x = Tensor::randn({4, 3}, rng, 1.0, true);
  auto f = [&] { return squared_norm(gelu(x)); };
  auto g = [&] { return sum(softmax(x)); };
  const double a = 0.7, b = -2.3;
  auto grad_of = [&](const std::function<Tensor()>& loss) {
    x.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto combined = grad_of([&] { return add(scale(f(), a), scale(g(), b)); });
  const auto gf = grad_of(f);
  const auto gg = grad_of(g);
  for (std::size_t i = 0; i < combined.size(); ++i) {
    EXPECT_NEAR(combined[i], a * gf[i] + b * gg[i], 1e-9);
  }
}

TEST(Backward, NoTapeMeansNoRecording) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteChecks, NonFiniteValuesRaiseWhenEnabled) {
  const bool saved = finite_checks_enabled();
  set_finite_checks(true);
  Tensor x = Tensor::from_data({2}, {1.0, INFINITY});
  EXPECT_THROW(add(x, x), NumericalError);
  set_finite_checks(saved);
}

TEST(AdamW, ZeroGradientAndNoDecayLeavesParametersUnchanged) {
  Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  w.zero_grad();
  AdamW opt({{"w", w}}, {.learning_rate = 0.1, .weight_decay = 0.0});
  opt.step();
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], -2.0);
  EXPECT_EQ(w[2], 0.5);
}

TEST(AdamW, OneStepDescendsOnSquare) {
  Tensor w = Tensor::from_data({1}, {1.0}, true);
  AdamW opt({{"w", w}}, {.learning_rate = 0.1});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(squared_norm(w));
  }
  opt.step();
  EXPECT_LT(std::fabs(w[0]), 1.0);
  EXPECT_EQ(opt.step_count(), 1u);
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

// Scalar AdamW recurrence iterated directly; the library must follow it and
// land near the minimum of (w - 3)^2.
TEST(AdamW, ConvergesOnShiftedQuadraticLikeDirectIteration) {
  const AdamWOptions o{.learning_rate = 0.1};
  double w_ref = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2.0 * (w_ref - 3.0);
    m = o.beta1 * m + (1 - o.beta1) * g;
    v = o.beta2 * v + (1 - o.beta2) * g * g;
    const double mh = m / (1 - std::pow(o.beta1, t));
    const double vh = v / (1 - std::pow(o.beta2, t));
    w_ref -= o.learning_rate * o.weight_decay * w_ref;
    w_ref -= o.learning_rate * mh / (std::sqrt(vh) + o.eps);
  }
  ASSERT_LT(std::fabs(w_ref - 3.0), 0.05);

  Tensor w = Tensor::from_data({1}, {0.0}, true);
  AdamW opt({{"w", w}}, o);
  for (int t = 0; t < 200; ++t) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(squared_norm(add_scalar(w, -3.0)));
    opt.step();
  }
  EXPECT_NEAR(w[0], w_ref, 1e-12);
  EXPECT_LT(std::fabs(w[0] - 3.0), 0.05);
  EXPECT_EQ(opt.step_count(), 200u);
}

TEST(AdamW, MissingGradientListsParameter) {
  Tensor a = Tensor::zeros({2}, true);
  Tensor b = Tensor::zeros({2}, true);
  a.zero_grad();
  AdamW opt({{"encoder.weight", a}, {"decoder.bias", b}});
  try {
    opt.step();
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.bias"), std::string::npos);
    EXPECT_EQ(std::string(e.what()).find("encoder.weight"), std::string::npos);
  }
  EXPECT_EQ(opt.step_count(), 0u);
}

TEST(RandomStream, SameSeedSameSequence) {
  RandomStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.uniform(), b.uniform());
}

TEST(RandomStream, DifferentSeedsDiverge) {
  RandomStream a(1), b(2);
  bool differs = false;
  for (int i = 0; i < 10; ++i) differs = differs || a.uniform() != b.uniform();
  EXPECT_TRUE(differs);
}

TEST(RandomStream, NormalMomentsMatch) {
  RandomStream rng(2024);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  EXPECT_LT(std::fabs(mean), 0.02);
  EXPECT_GT(var, 0.95);
  EXPECT_LT(var, 1.05);
}

TEST(RandomStream, PermutationIsBijective) {
  RandomStream rng(3);
  auto p = rng.permutation(50);
  std::vector<bool> seen(50, false);
  for (auto i : p) {
    ASSERT_LT(i, 50u);
    EXPECT_FALSE(seen[i]);
    seen[i] = true;
  }
  RandomStream again(3);
  EXPECT_EQ(again.permutation(50), p);
}

TEST(RandomStream, ForkIsIndependentOfParentState) {
  RandomStream a(8);
  RandomStream child1 = a.fork(3);
  a.uniform();
  RandomStream child2 = a.fork(3);
  EXPECT_EQ(child1.uniform(), child2.uniform());
  EXPECT_NE(a.fork(3).uniform(), a.fork(4).uniform());
}

}  // namespace
}  // namespace ehicl

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <queue>
#include <set>

#include <unistd.h>

#include "ehicl/error.hpp"
#include "ehicl/hand_model.hpp"
#include "ehicl/ops.hpp"
#include "support/grad_check.hpp"
#include "support/naive_lbs.hpp"

namespace ehicl {
namespace {

using testing::axis_angle_matrix;
using testing::naive_forward;
using testing::random_params;

const HandRig& rig() {
  static const HandRig r = build_rig(17);
  return r;
}

HandParams zero_params(Side side = Side::right) {
  HandParams p;
  p.side = side;
  return p;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

Eigen::Vector3d wrist_rest(const HandRig& r, const HandParams& p) {
  Eigen::Vector3d j = Eigen::Vector3d::Zero();
  for (std::size_t v = 0; v < kVertices; ++v) {
    for (int c = 0; c < 3; ++c) {
      double x = r.rest_vertices[3 * v + c];
      for (std::size_t k = 0; k < kBetaSize; ++k) x += r.shape_blend[(3 * v + c) * kBetaSize + k] * p.beta[k];
      j[c] += r.joint_regressor[v] * x;
    }
  }
  return j;
}

TEST(HandRig, SameSeedIsBitIdentical) {
  const HandRig a = build_rig(3), b = build_rig(3), c = build_rig(4);
  EXPECT_EQ(a.rest_vertices, b.rest_vertices);
  EXPECT_EQ(a.shape_blend, b.shape_blend);
  EXPECT_EQ(a.skinning_weights, b.skinning_weights);
  EXPECT_EQ(a.joint_regressor, b.joint_regressor);
  EXPECT_EQ(a.faces, b.faces);
  EXPECT_NE(a.rest_vertices, c.rest_vertices);
}

TEST(HandRig, DimensionsMatchTheParametricInterface) {
  const HandRig& r = rig();
  EXPECT_EQ(r.rest_vertices.size(), kVertices * 3);
  EXPECT_EQ(r.skinning_weights.size(), kVertices * kSkinnedJoints);
  EXPECT_EQ(r.shape_blend.size(), kVertices * 3 * kBetaSize);
  EXPECT_EQ(r.joint_regressor.size(), kReportedJoints * kVertices);
  EXPECT_EQ(r.parents.size(), kSkinnedJoints);
  EXPECT_EQ(r.reported_parents.size(), kReportedJoints);
}

TEST(HandRig, WeightAndRegressorRowsAreConvex) {
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    const HandRig r = build_rig(seed);
    for (std::size_t v = 0; v < kVertices; ++v) {
      double total = 0.0;
      for (std::size_t j = 0; j < kSkinnedJoints; ++j) {
        const double w = r.skinning_weights[v * kSkinnedJoints + j];
        EXPECT_GE(w, 0.0);
        total += w;
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
    for (std::size_t j = 0; j < kReportedJoints; ++j) {
      double total = 0.0;
      for (std::size_t v = 0; v < kVertices; ++v) {
        EXPECT_GE(r.joint_regressor[j * kVertices + v], 0.0);
        total += r.joint_regressor[j * kVertices + v];
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(HandRig, MeshIsClosedTwoManifold) {
  const HandRig& r = rig();
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> undirected;
  std::set<std::pair<std::uint32_t, std::uint32_t>> directed;
  for (const auto& f : r.faces) {
    for (int e = 0; e < 3; ++e) {
      const std::uint32_t a = f[e], b = f[(e + 1) % 3];
      ASSERT_LT(a, kVertices);
      ASSERT_NE(a, b);
      ++undirected[{std::min(a, b), std::max(a, b)}];
      EXPECT_TRUE(directed.insert({a, b}).second) << "edge " << a << "->" << b << " repeated";
    }
  }
  for (const auto& [edge, count] : undirected) {
    EXPECT_EQ(count, 2) << edge.first << "-" << edge.second;
  }
  std::vector<bool> used(kVertices, false);
  for (const auto& f : r.faces) {
    for (auto v : f) used[v] = true;
  }
  EXPECT_TRUE(std::all_of(used.begin(), used.end(), [](bool b) { return b; }));
}

TEST(HandRig, KinematicTreeHasSingleRootAndNoCycles) {
  const HandRig& r = rig();
  for (const auto* parents : {&r.parents, &r.reported_parents}) {
    int roots = 0;
    for (std::size_t j = 0; j < parents->size(); ++j) {
      if ((*parents)[j] < 0) ++roots;
      std::size_t steps = 0;
      for (int k = static_cast<int>(j); k >= 0; k = (*parents)[k]) {
        ASSERT_LE(++steps, parents->size()) << "cycle through joint " << j;
      }
    }
    EXPECT_EQ(roots, 1);
  }
}

// Graph-distance oracle: breadth-first depth from the root over child lists.
TEST(HandRig, FingertipsAreTheFiveMostDistalJoints) {
  for (std::uint64_t seed : {0ull, 5ull, 1234ull}) {
    const HandRig r = build_rig(seed);
    const auto& parents = r.reported_parents;
    std::vector<std::vector<std::size_t>> children(parents.size());
    std::size_t root = 0;
    for (std::size_t j = 0; j < parents.size(); ++j) {
      if (parents[j] < 0) root = j;
      else children[parents[j]].push_back(j);
    }
    std::vector<int> depth(parents.size(), -1);
    std::queue<std::size_t> q;
    q.push(root);
    depth[root] = 0;
    while (!q.empty()) {
      const auto j = q.front();
      q.pop();
      for (auto c : children[j]) {
        depth[c] = depth[j] + 1;
        q.push(c);
      }
    }
    std::vector<std::size_t> order(parents.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return depth[a] > depth[b]; });
    std::set<std::size_t> top(order.begin(), order.begin() + 5);
    EXPECT_EQ(top, (std::set<std::size_t>{16, 17, 18, 19, 20}));
    EXPECT_GT(depth[order[4]], depth[order[5]]);
    // Tip joints sit at the far end of each finger in space, too.
    for (int f = 0; f < 5; ++f) EXPECT_EQ(r.reported_parents[16 + f], 11 + f);
  }
}

TEST(HandForward, ZeroPoseReproducesRestMeshExactly) {
  const HandGeometry g = forward(rig(), zero_params());
  EXPECT_EQ(g.vertices, rig().rest_vertices);
}

TEST(HandForward, JointsAreRegressedFromVertices) {
  RandomStream rng(2);
  const HandGeometry g = forward(rig(), random_params(rng, Side::right));
  for (std::size_t j = 0; j < kReportedJoints; ++j) {
    for (int c = 0; c < 3; ++c) {
      double x = 0.0;
      for (std::size_t v = 0; v < kVertices; ++v) x += rig().joint_regressor[j * kVertices + v] * g.vertices[3 * v + c];
      EXPECT_NEAR(g.joints[3 * j + c], x, 1e-9);
    }
  }
}

TEST(HandForward, GlobalOrientationRotatesAboutTheRoot) {
  RandomStream rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    HandParams p = zero_params();
    for (double& f : p.phi) f = rng.normal();
    const HandGeometry g = forward(rig(), p);
    const Eigen::Matrix3d R = axis_angle_matrix(p.phi[0], p.phi[1], p.phi[2]);
    const Eigen::Vector3d j0 = wrist_rest(rig(), p);
    for (std::size_t v = 0; v < kVertices; ++v) {
      const Eigen::Vector3d rest(rig().rest_vertices[3 * v], rig().rest_vertices[3 * v + 1],
                                 rig().rest_vertices[3 * v + 2]);
      const Eigen::Vector3d expected = R * (rest - j0) + j0;
      for (int c = 0; c < 3; ++c) ASSERT_NEAR(g.vertices[3 * v + c], expected[c], 1e-9);
    }
  }
}

TEST(HandForward, MatchesNaiveLbsOracleOnFiftyDraws) {
  RandomStream rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Side side = trial % 2 ? Side::left : Side::right;
    const HandParams p = random_params(rng, side, 0.6);
    const HandGeometry fast = forward(rig(), p);
    const HandGeometry slow = naive_forward(rig(), p);
    worst = std::max({worst, max_abs_diff(fast.vertices, slow.vertices),
                      max_abs_diff(fast.joints, slow.joints)});
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(HandForward, BatchedPathMatchesPerHandPath) {
  RandomStream rng(8);
  std::vector<HandParams> hands;
  for (int i = 0; i < 5; ++i) hands.push_back(random_params(rng, i % 2 ? Side::left : Side::right));
  const ParamTensors t = pack_params(hands);
  const HandBatch b = forward_batch(rig(), t.theta, t.beta, t.phi, t.sides);
  for (std::size_t i = 0; i < hands.size(); ++i) {
    const HandGeometry g = forward(rig(), hands[i]);
    for (std::size_t k = 0; k < kVertices * 3; ++k) ASSERT_EQ(b.vertices[i * kVertices * 3 + k], g.vertices[k]);
  }
}

// Perturb the index-finger PIP (joint 7). Only vertices dominated by that
// joint or its descendant DIP (joint 12) may move.
TEST(HandForward, MidFingerPerturbationIsLocal) {
  RandomStream rng(30);
  for (int trial = 0; trial < 5; ++trial) {
    const HandParams base = random_params(rng, trial % 2 ? Side::left : Side::right);
    HandParams moved = base;
    moved.theta[(7 - 1) * 3 + 0] += 0.3;
    moved.theta[(7 - 1) * 3 + 2] -= 0.2;
    const HandGeometry a = naive_forward(rig(), base);
    const HandGeometry b = naive_forward(rig(), moved);
    const HandGeometry fa = forward(rig(), base);
    const HandGeometry fb = forward(rig(), moved);
    std::size_t moved_count = 0;
    for (std::size_t v = 0; v < kVertices; ++v) {
      const double* w = &rig().skinning_weights[v * kSkinnedJoints];
      const auto dominant = std::max_element(w, w + kSkinnedJoints) - w;
      double delta = 0.0, fdelta = 0.0;
      for (int c = 0; c < 3; ++c) {
        delta = std::max(delta, std::fabs(a.vertices[3 * v + c] - b.vertices[3 * v + c]));
        fdelta = std::max(fdelta, std::fabs(fa.vertices[3 * v + c] - fb.vertices[3 * v + c]));
      }
      const bool affected = dominant == 7 || dominant == 12;
      if (!affected) {
        EXPECT_LT(delta, 1e-6) << "vertex " << v;
        EXPECT_LT(fdelta, 1e-6) << "vertex " << v;
      } else if (fdelta > 1e-3) {
        ++moved_count;
      }
    }
    EXPECT_GT(moved_count, 0u);
  }
}

TEST(HandForward, RigidEquivarianceAboutTheRoot) {
  RandomStream rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const HandParams p = random_params(rng, trial % 2 ? Side::left : Side::right);
    const Eigen::Matrix3d R = axis_angle_matrix(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d RP = R * axis_angle_matrix(p.phi[0], p.phi[1], p.phi[2]);
    const Eigen::AngleAxisd aa(RP);
    HandParams q = p;
    for (int c = 0; c < 3; ++c) q.phi[c] = aa.angle() * aa.axis()[c];
    const HandGeometry g0 = forward(rig(), p);
    const HandGeometry g1 = forward(rig(), q);
    // The root is the rest wrist of the posed side.
    Eigen::Vector3d j0 = wrist_rest(rig(), p);
    if (p.side == Side::left) j0.x() = -j0.x();
    for (std::size_t v = 0; v < kVertices; ++v) {
      const Eigen::Vector3d x(g0.vertices[3 * v], g0.vertices[3 * v + 1], g0.vertices[3 * v + 2]);
      const Eigen::Vector3d expected = R * (x - j0) + j0;
      for (int c = 0; c < 3; ++c) ASSERT_NEAR(g1.vertices[3 * v + c], expected[c], 1e-6);
    }
  }
}

TEST(HandForward, ExactlyLinearInShapeAtRestPose) {
  RandomStream rng(6);
  HandParams a = zero_params(), b = zero_params(), ab = zero_params();
  for (std::size_t k = 0; k < kBetaSize; ++k) {
    a.beta[k] = rng.normal();
    b.beta[k] = rng.normal();
    ab.beta[k] = a.beta[k] + b.beta[k];
  }
  const auto ga = forward(rig(), a).vertices;
  const auto gb = forward(rig(), b).vertices;
  const auto gab = forward(rig(), ab).vertices;
  const auto& rest = rig().rest_vertices;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    EXPECT_NEAR(gab[i] - rest[i], (ga[i] - rest[i]) + (gb[i] - rest[i]), 1e-9);
  }
}

TEST(HandForward, LeftHandMirrorsRightHand) {
  RandomStream rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const HandParams right = random_params(rng, Side::right);
    HandParams left = right;
    left.side = Side::left;
    for (std::size_t j = 0; j < kPoseJoints; ++j) {
      left.theta[3 * j + 1] = -right.theta[3 * j + 1];
      left.theta[3 * j + 2] = -right.theta[3 * j + 2];
    }
    left.phi[1] = -right.phi[1];
    left.phi[2] = -right.phi[2];
    const auto gr = forward(rig(), right);
    const auto gl = forward(rig(), left);
    for (std::size_t v = 0; v < kVertices; ++v) {
      EXPECT_NEAR(gl.vertices[3 * v], -gr.vertices[3 * v], 1e-9);
      EXPECT_NEAR(gl.vertices[3 * v + 1], gr.vertices[3 * v + 1], 1e-9);
      EXPECT_NEAR(gl.vertices[3 * v + 2], gr.vertices[3 * v + 2], 1e-9);
    }
  }
}

TEST(HandGradients, ShapeJacobianAtRestEqualsBlendBasis) {
  RandomStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t v = rng.below(kVertices);
    const int c = static_cast<int>(rng.below(3));
    HandParams p = zero_params();
    ParamTensors t = pack_params(std::span<const HandParams>(&p, 1), true);
    std::vector<double> onehot(kVertices * 3, 0.0);
    onehot[3 * v + c] = 1.0;
    Tape tape;
    {
      TapeScope scope(tape);
      const HandBatch b = forward_batch(rig(), t.theta, t.beta, t.phi, t.sides);
      tape.backward(sum(mul(b.vertices, Tensor::from_data({1, kVertices, 3}, onehot))));
    }
    for (std::size_t k = 0; k < kBetaSize; ++k) {
      EXPECT_EQ(t.beta.grad()[k], rig().shape_blend[(3 * v + c) * kBetaSize + k]);
    }
  }
}

TEST(HandGradients, ParameterGradientsMatchFiniteDifferences) {
  RandomStream rng(44);
  for (int trial = 0; trial < 4; ++trial) {
    const HandParams p = random_params(rng, trial % 2 ? Side::left : Side::right);
    ParamTensors t = pack_params(std::span<const HandParams>(&p, 1), true);
    const Tensor target = Tensor::randn({1, kVertices, 3}, rng, 30.0);
    const Tensor jtarget = Tensor::randn({1, kReportedJoints, 3}, rng, 30.0);
    auto loss = [&] {
      const HandBatch b = forward_batch(rig(), t.theta, t.beta, t.phi, t.sides);
      return add(mean(square(sub(b.vertices, target))), mean(abs(sub(b.joints, jtarget))));
    };
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(loss());
    }
    for (Tensor* x : {&t.phi, &t.theta, &t.beta}) {
      const auto numeric = testing::numeric_gradient(*x, [&] { return loss().item(); });
      EXPECT_LT(testing::relative_error(x->grad(), numeric), 1e-3);
    }
  }
}

TEST(HandGradients, UnusedJointHasZeroGradient) {
  RandomStream rng(5);
  const HandParams p = random_params(rng, Side::right);
  ParamTensors t = pack_params(std::span<const HandParams>(&p, 1), true);
  Tape tape;
  {
    TapeScope scope(tape);
    const HandBatch b = forward_batch(rig(), t.theta, t.beta, t.phi, t.sides);
    tape.backward(add(mean(b.vertices), mean(b.joints)));
  }
  const std::size_t row = 15 - 1;  // little-finger DIP
  for (int c = 0; c < 3; ++c) EXPECT_EQ(t.theta.grad()[3 * row + c], 0.0);
  double used = 0.0;
  for (int c = 0; c < 3; ++c) used += std::fabs(t.theta.grad()[3 * (10 - 1) + c]);
  EXPECT_GT(used, 0.0);
}

TEST(Rodrigues, MatchesAngleAxisAndFiniteDifferences) {
  RandomStream rng(9);
  std::vector<double> rows;
  for (double scale : {0.0, 1e-9, 1e-4, 9e-4, 1.1e-3, 0.5, 2.0, 3.1}) {
    Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
    d = scale * d.normalized();
    rows.insert(rows.end(), {d.x(), d.y(), d.z()});
  }
  const std::size_t n = rows.size() / 3;
  Tensor r = Tensor::from_data({n, 3}, rows, true);
  const Tensor R = rodrigues(r);
  for (std::size_t i = 0; i < n; ++i) {
    const auto M = axis_angle_matrix(rows[3 * i], rows[3 * i + 1], rows[3 * i + 2]);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) EXPECT_NEAR(R[9 * i + 3 * a + b], M(a, b), 1e-14);
  }
  const Tensor w = Tensor::randn({n, 9}, rng);
  auto loss = [&] { return sum(mul(rodrigues(r), w)); };
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(loss());
  }
  const auto numeric = testing::numeric_gradient(r, [&] { return loss().item(); }, 1e-6);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> idx{3 * i, 3 * i + 1, 3 * i + 2};
    EXPECT_LT(testing::relative_error(testing::pick(r.grad(), idx), testing::pick(numeric, idx)), 1e-6)
        << "row " << i;
  }
}

TEST(HandParams, WrapsLongAxisAnglesAndRejectsNonFinite) {
  std::vector<double> theta(kThetaSize, 0.0), beta(kBetaSize, 0.0), phi{7.0, 0.0, 0.0};
  theta[0] = 0.0;
  theta[3] = 3.0;
  theta[4] = 4.0;  // norm 5, kept
  const HandParams p = HandParams::create(theta, beta, phi, Side::left);
  EXPECT_NEAR(p.phi[0], 7.0 - 2.0 * std::numbers::pi, 1e-12);
  EXPECT_EQ(p.theta[3], 3.0);
  EXPECT_EQ(p.theta[4], 4.0);
  phi[0] = 2.0 * std::numbers::pi * 3 + 0.5;
  EXPECT_LT(std::fabs(HandParams::create(theta, beta, phi, Side::left).phi[0]), 2.0 * std::numbers::pi);
  beta[2] = NAN;
  EXPECT_THROW(HandParams::create(theta, beta, phi, Side::left), DataError);
  EXPECT_THROW(HandParams::create(std::vector<double>(44), beta, phi, Side::left), ShapeError);
}

TEST(HandParams, VectorRoundTrip) {
  RandomStream rng(1);
  const HandParams p = random_params(rng, Side::left);
  const auto v = p.to_vector();
  ASSERT_EQ(v.size(), kParamVectorSize);
  EXPECT_EQ(v.back(), -1.0);
  EXPECT_EQ(HandParams::from_vector(v, Side::left), p);
}

class RigFile : public ::testing::Test {
 protected:
  std::filesystem::path path = std::filesystem::temp_directory_path() /
                               ("ehicl_rig_" + std::to_string(::getpid()) + ".bin");
  void TearDown() override { std::filesystem::remove(path); }
  std::string bytes() {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  }
  void overwrite(const std::string& b) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
  }
};

TEST_F(RigFile, RoundTripIsBitExact) {
  save_rig(rig(), path);
  const HandRig loaded = load_rig(path);
  EXPECT_EQ(loaded.seed, rig().seed);
  EXPECT_EQ(loaded.rest_vertices, rig().rest_vertices);
  EXPECT_EQ(loaded.faces, rig().faces);
  EXPECT_EQ(loaded.parents, rig().parents);
  EXPECT_EQ(loaded.shape_blend, rig().shape_blend);
  RandomStream rng(2);
  const HandParams p = random_params(rng, Side::right);
  EXPECT_EQ(forward(loaded, p).vertices, forward(rig(), p).vertices);
}

TEST_F(RigFile, DamageIsReportedByKind) {
  save_rig(rig(), path);
  const std::string good = bytes();
  std::string bad_magic = good;
  bad_magic[5] = '9';
  overwrite(bad_magic);
  EXPECT_THROW(load_rig(path), FormatVersionError);
  overwrite(good.substr(0, good.size() - 100));
  EXPECT_THROW(load_rig(path), TruncatedBlobError);
  overwrite(good + std::string(16, '\0'));
  EXPECT_THROW(load_rig(path), ManifestMismatchError);
}

}  // namespace
}  // namespace ehicl

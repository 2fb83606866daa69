// SPDX-License-Identifier: Apache-2.0
#include "ehicl/hand_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ehicl/blob_io.hpp"
#include "ehicl/error.hpp"
#include "ehicl/ops.hpp"
#include "ehicl/random.hpp"

namespace ehicl {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Vec3 {
  double x = 0, y = 0, z = 0;
};
Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
Vec3 normalized(Vec3 a) {
  const double n = std::sqrt(a.x * a.x + a.y * a.y + a.z * a.z);
  return (1.0 / n) * a;
}

// Palm ellipsoid and finger tube resolution. 288 + 5 * 98 = 778 vertices.
constexpr std::size_t kPalmRings = 11;
constexpr std::size_t kPalmSegments = 26;
constexpr std::size_t kFingerRings = 12;
constexpr std::size_t kFingerSegments = 8;
constexpr std::size_t kPalmVertices = kPalmRings * kPalmSegments + 2;
constexpr std::size_t kFingerVertices = kFingerRings * kFingerSegments + 2;
static_assert(kPalmVertices + 5 * kFingerVertices == kVertices);

// Rings whose centroids define the MCP, PIP and DIP joints.
constexpr std::size_t kJointRings[3] = {0, 4, 8};

// Closed surface of `rings` x `segments` vertices between two poles, with
// vertex `first` the first pole, then ring-major order, then the last pole.
void append_capped_tube(std::vector<std::array<std::uint32_t, 3>>& faces, std::uint32_t first,
                        std::size_t rings, std::size_t segments) {
  const auto ring_vertex = [&](std::size_t r, std::size_t s) {
    return static_cast<std::uint32_t>(first + 1 + r * segments + s % segments);
  };
  const auto last = static_cast<std::uint32_t>(first + 1 + rings * segments);
  for (std::size_t s = 0; s < segments; ++s) {
    faces.push_back({first, ring_vertex(0, s + 1), ring_vertex(0, s)});
  }
  for (std::size_t r = 0; r + 1 < rings; ++r) {
    for (std::size_t s = 0; s < segments; ++s) {
      faces.push_back({ring_vertex(r, s), ring_vertex(r, s + 1), ring_vertex(r + 1, s + 1)});
      faces.push_back({ring_vertex(r, s), ring_vertex(r + 1, s + 1), ring_vertex(r + 1, s)});
    }
  }
  for (std::size_t s = 0; s < segments; ++s) {
    faces.push_back({last, ring_vertex(rings - 1, s), ring_vertex(rings - 1, s + 1)});
  }
}

struct FingerLayout {
  Vec3 base;
  Vec3 dir;
  double length;
  double radius;
};

void rodrigues_coefficients(double s, double& a, double& b, double& da, double& db) {
  const double theta = std::sqrt(s);
  if (theta < 1e-3) {
    a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
    b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
    da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0;
    db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
    return;
  }
  const double sn = std::sin(theta);
  const double cs = std::cos(theta);
  const double half = std::sin(0.5 * theta);
  const double one_minus_cos = 2.0 * half * half;
  a = sn / theta;
  b = one_minus_cos / s;
  da = (theta * cs - sn) / (2.0 * s * theta);
  db = (theta * sn - 2.0 * one_minus_cos) / (2.0 * s * s);
}

Tensor constant(Shape shape, std::vector<double> data) {
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

const char* side_name(Side side) { return side == Side::left ? "left" : "right"; }

void wrap_axis_angle(std::span<double, 3> r) {
  const double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
  if (n < kTwoPi) return;
  const double wrapped = std::fmod(n, kTwoPi);
  for (double& v : r) v *= wrapped / n;
}

HandParams HandParams::create(std::span<const double> theta, std::span<const double> beta,
                              std::span<const double> phi, Side side) {
  if (theta.size() != kThetaSize || beta.size() != kBetaSize || phi.size() != kPhiSize) {
    throw ShapeError("HandParams: expected 45/10/3 values, got " + std::to_string(theta.size()) +
                     "/" + std::to_string(beta.size()) + "/" + std::to_string(phi.size()));
  }
  HandParams p;
  p.side = side;
  std::copy(theta.begin(), theta.end(), p.theta.begin());
  std::copy(beta.begin(), beta.end(), p.beta.begin());
  std::copy(phi.begin(), phi.end(), p.phi.begin());
  const auto check = [](std::span<const double> v, const char* block) {
    for (double x : v) {
      if (!std::isfinite(x)) throw DataError(std::string("HandParams: non-finite ") + block);
    }
  };
  check(p.theta, "theta");
  check(p.beta, "beta");
  check(p.phi, "phi");
  for (std::size_t j = 0; j < kPoseJoints; ++j) {
    wrap_axis_angle(std::span<double, 3>(p.theta.data() + 3 * j, 3));
  }
  wrap_axis_angle(std::span<double, 3>(p.phi.data(), 3));
  return p;
}

std::vector<double> HandParams::to_vector() const {
  std::vector<double> out;
  out.reserve(kParamVectorSize);
  out.insert(out.end(), theta.begin(), theta.end());
  out.insert(out.end(), beta.begin(), beta.end());
  out.insert(out.end(), phi.begin(), phi.end());
  out.push_back(side == Side::right ? 1.0 : -1.0);
  return out;
}

HandParams HandParams::from_vector(std::span<const double> values, Side side) {
  if (values.size() < kThetaSize + kBetaSize + kPhiSize) {
    throw ShapeError("HandParams::from_vector: need 58 values, got " +
                     std::to_string(values.size()));
  }
  return create(values.subspan(0, kThetaSize), values.subspan(kThetaSize, kBetaSize),
                values.subspan(kThetaSize + kBetaSize, kPhiSize), side);
}

void HandRig::finalize() {
  rest_t = constant({kVertices * 3}, rest_vertices);
  std::vector<double> blend(kBetaSize * kVertices * 3);
  for (std::size_t i = 0; i < kVertices * 3; ++i) {
    for (std::size_t k = 0; k < kBetaSize; ++k) blend[k * kVertices * 3 + i] = shape_blend[i * kBetaSize + k];
  }
  blend_t = constant({kBetaSize, kVertices * 3}, std::move(blend));
  regressor16_t = constant({kSkinnedJoints, kVertices},
                           std::vector<double>(joint_regressor.begin(),
                                               joint_regressor.begin() + kSkinnedJoints * kVertices));
  regressor21_t = constant({kReportedJoints, kVertices}, joint_regressor);
  weights_t = constant({kVertices, kSkinnedJoints}, skinning_weights);
}

HandRig build_rig(std::uint64_t seed) {
  RandomStream rng(mix_seed(seed ^ 0x48414e44u));
  const auto jitter = [&](double base) {
    return base * (1.0 + 0.04 * std::clamp(rng.normal(), -2.0, 2.0));
  };

  HandRig rig;
  rig.seed = seed;
  rig.rest_vertices.reserve(kVertices * 3);
  const auto push = [&](Vec3 p) {
    rig.rest_vertices.push_back(p.x);
    rig.rest_vertices.push_back(p.y);
    rig.rest_vertices.push_back(p.z);
  };

  // Palm: ellipsoid standing on the wrist, fingers along +y, thumb toward -x.
  const double half_w = 0.5 * jitter(84.0);
  const double half_l = 0.5 * jitter(92.0);
  const double half_t = 0.5 * jitter(26.0);
  push({0.0, 0.0, 0.0});
  for (std::size_t r = 0; r < kPalmRings; ++r) {
    const double t = std::numbers::pi * static_cast<double>(r + 1) / (kPalmRings + 1);
    for (std::size_t s = 0; s < kPalmSegments; ++s) {
      const double u = kTwoPi * static_cast<double>(s) / kPalmSegments;
      push({half_w * std::sin(t) * std::cos(u), half_l - half_l * std::cos(t),
            half_t * std::sin(t) * std::sin(u)});
    }
  }
  push({0.0, 2.0 * half_l, 0.0});
  append_capped_tube(rig.faces, 0, kPalmRings, kPalmSegments);

  // Fingers: thumb, index, middle, ring, little.
  std::array<FingerLayout, 5> fingers;
  fingers[0] = {{-0.75 * half_w, 0.55 * half_l, -0.3 * half_t},
                normalized({-0.75, 0.65, -0.25}), jitter(58.0), jitter(10.0)};
  const double xs[4] = {-0.6, -0.2, 0.2, 0.6};
  const double splay[4] = {-0.08, -0.02, 0.04, 0.10};
  const double lengths[4] = {74.0, 80.0, 76.0, 60.0};
  const double radii[4] = {9.0, 9.0, 8.5, 7.5};
  for (int f = 0; f < 4; ++f) {
    const double x = xs[f] * half_w;
    const double top = half_l + 0.85 * half_l * std::sqrt(1.0 - (x / half_w) * (x / half_w));
    fingers[f + 1] = {{x, top - (f == 3 ? 6.0 : 0.0), 0.0},
                      {std::sin(splay[f]), std::cos(splay[f]), 0.0},
                      jitter(lengths[f]),
                      jitter(radii[f])};
  }

  std::vector<double> axial(kVertices, 0.0);  // distance along the finger axis
  std::vector<Vec3> finger_dir(kVertices);
  for (std::size_t f = 0; f < 5; ++f) {
    const auto& fl = fingers[f];
    const auto first = static_cast<std::uint32_t>(rig.rest_vertices.size() / 3);
    const Vec3 e1 = normalized(cross(fl.dir, {0.0, 0.0, 1.0}));
    const Vec3 e2 = cross(e1, fl.dir);
    auto add = [&](Vec3 p, double s) {
      axial[rig.rest_vertices.size() / 3] = s;
      finger_dir[rig.rest_vertices.size() / 3] = fl.dir;
      push(p);
    };
    add(fl.base, 0.0);
    for (std::size_t r = 0; r < kFingerRings; ++r) {
      const double s = fl.length * (static_cast<double>(r) + 0.5) / (kFingerRings + 0.25);
      const double radius = fl.radius * (1.0 - 0.3 * static_cast<double>(r) / (kFingerRings - 1));
      const Vec3 c = fl.base + s * fl.dir;
      for (std::size_t k = 0; k < kFingerSegments; ++k) {
        const double u = kTwoPi * static_cast<double>(k) / kFingerSegments;
        add(c + (radius * std::cos(u)) * e1 + (radius * std::sin(u)) * e2, s);
      }
    }
    add(fl.base + fl.length * fl.dir, fl.length);
    append_capped_tube(rig.faces, first, kFingerRings, kFingerSegments);
  }

  rig.parents = {-1, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  rig.reported_parents = rig.parents;
  for (int f = 0; f < 5; ++f) rig.reported_parents.push_back(11 + f);

  // Joint regressor: ring centroids and fingertip poles.
  rig.joint_regressor.assign(kReportedJoints * kVertices, 0.0);
  for (std::size_t s = 0; s < kPalmSegments; ++s) {
    rig.joint_regressor[1 + s] = 1.0 / kPalmSegments;
  }
  for (std::size_t f = 0; f < 5; ++f) {
    const std::size_t first = kPalmVertices + f * kFingerVertices;
    for (std::size_t level = 0; level < 3; ++level) {
      const std::size_t joint = 1 + 5 * level + f;
      const std::size_t ring_start = first + 1 + kJointRings[level] * kFingerSegments;
      for (std::size_t k = 0; k < kFingerSegments; ++k) {
        rig.joint_regressor[joint * kVertices + ring_start + k] = 1.0 / kFingerSegments;
      }
    }
    rig.joint_regressor[(16 + f) * kVertices + first + kFingerVertices - 1] = 1.0;
  }

  // Skinning: each segment is driven by its joint, blended with the parent
  // over the first two rings. Dyadic weights keep the rest pose exact.
  rig.skinning_weights.assign(kVertices * kSkinnedJoints, 0.0);
  for (std::size_t v = 0; v < kPalmVertices; ++v) rig.skinning_weights[v * kSkinnedJoints] = 1.0;
  for (std::size_t f = 0; f < 5; ++f) {
    const std::size_t first = kPalmVertices + f * kFingerVertices;
    const std::size_t mcp = 1 + f, pip = 6 + f;
    const std::size_t dip = f == 4 ? pip : 11 + f;
    const std::size_t chain[4] = {0, mcp, pip, dip};
    auto set = [&](std::size_t v, std::size_t joint, double w) {
      rig.skinning_weights[v * kSkinnedJoints + joint] += w;
    };
    set(first, mcp, 0.625);
    set(first, 0, 0.375);
    for (std::size_t r = 0; r < kFingerRings; ++r) {
      const std::size_t segment = 1 + r / 4;  // 1 proximal, 2 middle, 3 distal
      const std::size_t offset = r % 4;
      const double own = offset == 0 ? 0.75 : (offset == 1 ? 0.875 : 1.0);
      for (std::size_t k = 0; k < kFingerSegments; ++k) {
        const std::size_t v = first + 1 + r * kFingerSegments + k;
        set(v, chain[segment], own);
        if (own < 1.0) set(v, chain[segment - 1], 1.0 - own);
      }
    }
    set(first + kFingerVertices - 1, dip, 1.0);
  }

  // Shape basis: scale, finger length, palm width, thickness, then six seeded
  // smooth fields (affine plus a low-frequency sinusoid).
  rig.shape_blend.assign(kVertices * 3 * kBetaSize, 0.0);
  const Vec3 center{0.0, half_l, 0.0};
  std::array<std::array<double, 9>, 6> affine;
  std::array<Vec3, 6> wave_dir, wave_disp;
  std::array<double, 6> wave_phase;
  for (std::size_t k = 0; k < 6; ++k) {
    for (double& m : affine[k]) m = 0.015 * rng.normal();
    wave_dir[k] = normalized({rng.normal(), rng.normal(), rng.normal()});
    wave_disp[k] = normalized({rng.normal(), rng.normal(), rng.normal()});
    wave_phase[k] = rng.uniform(0.0, kTwoPi);
  }
  for (std::size_t v = 0; v < kVertices; ++v) {
    const Vec3 p{rig.rest_vertices[3 * v], rig.rest_vertices[3 * v + 1], rig.rest_vertices[3 * v + 2]};
    const Vec3 q = p - center;
    auto put = [&](std::size_t k, Vec3 d) {
      rig.shape_blend[(3 * v + 0) * kBetaSize + k] = d.x;
      rig.shape_blend[(3 * v + 1) * kBetaSize + k] = d.y;
      rig.shape_blend[(3 * v + 2) * kBetaSize + k] = d.z;
    };
    put(0, 0.05 * q);
    put(1, v < kPalmVertices ? Vec3{} : (0.08 * axial[v]) * finger_dir[v]);
    put(2, {0.06 * p.x, 0.0, 0.0});
    put(3, {0.0, 0.0, 0.1 * p.z});
    for (std::size_t k = 0; k < 6; ++k) {
      const auto& m = affine[k];
      const Vec3 lin{m[0] * q.x + m[1] * q.y + m[2] * q.z, m[3] * q.x + m[4] * q.y + m[5] * q.z,
                     m[6] * q.x + m[7] * q.y + m[8] * q.z};
      const double phase = kTwoPi / 60.0 * (wave_dir[k].x * p.x + wave_dir[k].y * p.y + wave_dir[k].z * p.z);
      put(4 + k, lin + (0.8 * std::sin(phase + wave_phase[k])) * wave_disp[k]);
    }
  }

  rig.finalize();
  return rig;
}

Tensor rodrigues(const Tensor& axis_angles) {
  if (axis_angles.rank() != 2 || axis_angles.dim(1) != 3) {
    throw ShapeError("rodrigues: expected [N, 3], got " + shape_str(axis_angles.shape()));
  }
  const std::size_t n = axis_angles.dim(0);
  const auto r = axis_angles.data();
  std::vector<double> out(n * 9);
  std::vector<double> coeff(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = r[3 * i], y = r[3 * i + 1], z = r[3 * i + 2];
    const double s = x * x + y * y + z * z;
    double a, b, da, db;
    rodrigues_coefficients(s, a, b, da, db);
    coeff[4 * i] = a;
    coeff[4 * i + 1] = b;
    coeff[4 * i + 2] = da;
    coeff[4 * i + 3] = db;
    // R = I + a K + b (r r^T - s I), with K the cross-product matrix of r.
    double* m = out.data() + 9 * i;
    m[0] = 1.0 + b * (x * x - s);
    m[1] = -a * z + b * x * y;
    m[2] = a * y + b * x * z;
    m[3] = a * z + b * y * x;
    m[4] = 1.0 + b * (y * y - s);
    m[5] = -a * x + b * y * z;
    m[6] = -a * y + b * z * x;
    m[7] = a * x + b * z * y;
    m[8] = 1.0 + b * (z * z - s);
  }
  Tensor result = make_result({n, 9}, std::move(out));
  if (active_tape() && axis_angles.requires_grad()) {
    active_tape()->record({axis_angles}, result, [axis_angles, result, n, coeff = std::move(coeff)]() {
      const auto g = result.grad();
      const auto r = axis_angles.data();
      auto gr = axis_angles.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double* gm = g.data() + 9 * i;
        const double v[3] = {r[3 * i], r[3 * i + 1], r[3 * i + 2]};
        const double s = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        const double a = coeff[4 * i], b = coeff[4 * i + 1];
        const double da = coeff[4 * i + 2], db = coeff[4 * i + 3];
        const double k_contract = gm[3] * v[2] - gm[1] * v[2] + gm[2] * v[1] - gm[6] * v[1] +
                                  gm[7] * v[0] - gm[5] * v[0];
        double q = 0.0;
        double trace = gm[0] + gm[4] + gm[8];
        for (int p = 0; p < 3; ++p) {
          for (int c = 0; c < 3; ++c) q += gm[3 * p + c] * v[p] * v[c];
        }
        q -= s * trace;
        const double dk[3] = {gm[7] - gm[5], gm[2] - gm[6], gm[3] - gm[1]};
        for (int k = 0; k < 3; ++k) {
          double outer = 0.0;
          for (int j = 0; j < 3; ++j) outer += gm[3 * k + j] * v[j] + gm[3 * j + k] * v[j];
          gr[3 * i + k] += 2.0 * v[k] * (da * k_contract + db * q) + a * dk[k] +
                           b * (outer - 2.0 * v[k] * trace);
        }
      }
    });
  }
  return result;
}

ParamTensors pack_params(std::span<const HandParams> hands, bool requires_grad) {
  const std::size_t h = hands.size();
  std::vector<double> theta, beta, phi;
  theta.reserve(h * kThetaSize);
  beta.reserve(h * kBetaSize);
  phi.reserve(h * kPhiSize);
  ParamTensors out;
  for (const auto& p : hands) {
    theta.insert(theta.end(), p.theta.begin(), p.theta.end());
    beta.insert(beta.end(), p.beta.begin(), p.beta.end());
    phi.insert(phi.end(), p.phi.begin(), p.phi.end());
    out.sides.push_back(p.side);
  }
  out.theta = Tensor::from_data({h, kThetaSize}, std::move(theta), requires_grad);
  out.beta = Tensor::from_data({h, kBetaSize}, std::move(beta), requires_grad);
  out.phi = Tensor::from_data({h, kPhiSize}, std::move(phi), requires_grad);
  return out;
}

HandBatch forward_batch(const HandRig& rig, const Tensor& theta, const Tensor& beta,
                        const Tensor& phi, std::span<const Side> sides) {
  const std::size_t h = sides.size();
  if (theta.shape() != Shape{h, kThetaSize} || beta.shape() != Shape{h, kBetaSize} ||
      phi.shape() != Shape{h, kPhiSize}) {
    throw ShapeError("hand forward: expected theta [" + std::to_string(h) + ", 45], beta [" +
                     std::to_string(h) + ", 10], phi [" + std::to_string(h) + ", 3], got " +
                     shape_str(theta.shape()) + ", " + shape_str(beta.shape()) + ", " +
                     shape_str(phi.shape()));
  }
  constexpr std::size_t J = kSkinnedJoints;
  constexpr std::size_t V = kVertices;

  // Left hands run through the right-hand rig with mirrored rotations; the
  // output is mirrored back across x.
  const bool any_left = std::any_of(sides.begin(), sides.end(), [](Side s) { return s == Side::left; });
  Tensor rot = reshape(concat({phi, theta}, 1), {h, J, 3});
  if (any_left) {
    std::vector<double> sign(h * J * 3, 1.0);
    for (std::size_t i = 0; i < h; ++i) {
      if (sides[i] != Side::left) continue;
      for (std::size_t j = 0; j < J; ++j) {
        sign[(i * J + j) * 3 + 1] = -1.0;
        sign[(i * J + j) * 3 + 2] = -1.0;
      }
    }
    rot = mul(rot, constant({h, J, 3}, std::move(sign)));
  }

  const Tensor shaped = reshape(add(matmul(beta, rig.blend_t), rig.rest_t), {h, V, 3});
  const Tensor rest_joints = matmul(rig.regressor16_t, shaped);  // [h, J, 3]
  const Tensor local_r = reshape(rodrigues(reshape(rot, {h * J, 3})), {h, J, 3, 3});
  // Rotation about the joint's rest position: t = j - R j.
  const Tensor local_t =
      sub(rest_joints, reshape(matmul(local_r, reshape(rest_joints, {h, J, 3, 1})), {h, J, 3}));

  // Compose down the tree one level at a time; levels are contiguous joint
  // ranges whose parents are the previous level in the same order.
  const std::size_t levels[4][2] = {{0, 1}, {1, 6}, {6, 11}, {11, 16}};
  std::vector<Tensor> global_r{slice(local_r, 1, 0, 1)};
  std::vector<Tensor> global_t{slice(local_t, 1, 0, 1)};
  for (int l = 1; l < 4; ++l) {
    const std::size_t begin = levels[l][0], end = levels[l][1];
    Tensor pr = global_r.back(), pt = global_t.back();
    if (l == 1) {
      const std::vector<std::size_t> root(end - begin, 0);
      pr = take(pr, 1, root);
      pt = take(pt, 1, root);
    }
    const std::size_t n = end - begin;
    const Tensor lr = slice(local_r, 1, begin, end);
    const Tensor lt = slice(local_t, 1, begin, end);
    global_r.push_back(matmul(pr, lr));
    global_t.push_back(add(reshape(matmul(pr, reshape(lt, {h, n, 3, 1})), {h, n, 3}), pt));
  }
  const Tensor gr = reshape(concat(global_r, 1), {h, J, 9});
  const Tensor gt = concat(global_t, 1);
  const Tensor transforms = concat({gr, gt}, 2);              // [h, J, 12]
  const Tensor blended = matmul(rig.weights_t, transforms);   // [h, V, 12]
  const Tensor br = reshape(slice(blended, 2, 0, 9), {h, V, 3, 3});
  const Tensor bt = slice(blended, 2, 9, 12);
  Tensor verts = add(reshape(matmul(br, reshape(shaped, {h, V, 3, 1})), {h, V, 3}), bt);
  if (any_left) {
    std::vector<double> sign(h * V * 3, 1.0);
    for (std::size_t i = 0; i < h; ++i) {
      if (sides[i] != Side::left) continue;
      for (std::size_t v = 0; v < V; ++v) sign[(i * V + v) * 3] = -1.0;
    }
    verts = mul(verts, constant({h, V, 3}, std::move(sign)));
  }
  return {verts, matmul(rig.regressor21_t, verts)};
}

HandGeometry forward(const HandRig& rig, const HandParams& params) {
  const ParamTensors t = pack_params(std::span<const HandParams>(&params, 1));
  const HandBatch b = forward_batch(rig, t.theta, t.beta, t.phi, t.sides);
  return {std::vector<double>(b.vertices.data().begin(), b.vertices.data().end()),
          std::vector<double>(b.joints.data().begin(), b.joints.data().end())};
}

void save_rig(const HandRig& rig, const std::filesystem::path& path) {
  std::vector<double> faces, parents, reported;
  for (const auto& f : rig.faces) faces.insert(faces.end(), f.begin(), f.end());
  for (int p : rig.parents) parents.push_back(p);
  for (int p : rig.reported_parents) reported.push_back(p);
  nlohmann::json manifest{{"format", "ehicl-rig"}, {"version", 1}, {"seed", rig.seed},
                          {"vertices", kVertices}, {"faces", rig.faces.size()}};
  write_blob_file(path, "EHRIG1", manifest,
                  {{"rest_vertices", {kVertices, 3}, rig.rest_vertices},
                   {"faces", {rig.faces.size(), 3}, faces},
                   {"parents", {kSkinnedJoints}, parents},
                   {"reported_parents", {kReportedJoints}, reported},
                   {"skinning_weights", {kVertices, kSkinnedJoints}, rig.skinning_weights},
                   {"shape_blend", {kVertices, 3, kBetaSize}, rig.shape_blend},
                   {"joint_regressor", {kReportedJoints, kVertices}, rig.joint_regressor}});
}

HandRig load_rig(const std::filesystem::path& path) {
  const BlobFile file = read_blob_file(path, "EHRIG1");
  HandRig rig;
  try {
    rig.seed = file.manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError("rig manifest: " + std::string(e.what()));
  }
  const auto* faces = file.find("faces");
  if (!faces || faces->shape.size() != 2 || faces->shape[1] != 3) {
    throw ManifestMismatchError("rig file: faces missing or not [F, 3]");
  }
  rig.rest_vertices = file.get("rest_vertices", {kVertices, 3}).data;
  for (std::size_t i = 0; i < faces->shape[0]; ++i) {
    rig.faces.push_back({static_cast<std::uint32_t>(faces->data[3 * i]),
                         static_cast<std::uint32_t>(faces->data[3 * i + 1]),
                         static_cast<std::uint32_t>(faces->data[3 * i + 2])});
  }
  for (double p : file.get("parents", {kSkinnedJoints}).data) rig.parents.push_back(static_cast<int>(p));
  for (double p : file.get("reported_parents", {kReportedJoints}).data) {
    rig.reported_parents.push_back(static_cast<int>(p));
  }
  rig.skinning_weights = file.get("skinning_weights", {kVertices, kSkinnedJoints}).data;
  rig.shape_blend = file.get("shape_blend", {kVertices, 3, kBetaSize}).data;
  rig.joint_regressor = file.get("joint_regressor", {kReportedJoints, kVertices}).data;
  rig.finalize();
  return rig;
}

}  // namespace ehicl

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ehicl/tensor.hpp"

namespace ehicl {

enum class Side { left, right };

const char* side_name(Side side);

inline constexpr std::size_t kPoseJoints = 15;
inline constexpr std::size_t kThetaSize = kPoseJoints * 3;
inline constexpr std::size_t kBetaSize = 10;
inline constexpr std::size_t kPhiSize = 3;
/// theta, beta, phi, side flag.
inline constexpr std::size_t kParamVectorSize = kThetaSize + kBetaSize + kPhiSize + 1;

inline constexpr std::size_t kVertices = 778;
inline constexpr std::size_t kSkinnedJoints = 16;
inline constexpr std::size_t kReportedJoints = 21;
inline constexpr std::size_t kWristJoint = 0;

/// Pose, shape and global orientation of one hand. Rows of theta are the
/// 15 non-root skinned joints in rig order (joint index = row + 1).
struct HandParams {
  std::array<double, kThetaSize> theta{};
  std::array<double, kBetaSize> beta{};
  std::array<double, kPhiSize> phi{};
  Side side = Side::right;

  /// Validates finiteness (DataError) and wraps every axis-angle to norm < 2 pi.
  static HandParams create(std::span<const double> theta, std::span<const double> beta,
                           std::span<const double> phi, Side side);

  /// Flat [theta | beta | phi | side], side encoded +1 right, -1 left.
  std::vector<double> to_vector() const;
  /// Inverse of to_vector for the first 58 entries; side is given explicitly.
  static HandParams from_vector(std::span<const double> values, Side side);

  bool operator==(const HandParams&) const = default;
};

/// Rescales an axis-angle so its norm lies in [0, 2 pi). Same rotation.
void wrap_axis_angle(std::span<double, 3> r);

struct HandGeometry {
  std::vector<double> vertices;  // kVertices x 3, mm
  std::vector<double> joints;    // kReportedJoints x 3, mm
};

/// Procedurally generated stand-in for a licensed parametric hand.
///
/// Six closed surfaces: a palm ellipsoid and one tube per finger. Joint 0 is
/// the wrist; joints 1-5, 6-10 and 11-15 are the MCP, PIP and DIP joints of
/// thumb, index, middle, ring and little finger; reported joints 16-20 add
/// the fingertips. The little-finger DIP (joint 15) carries no skinning
/// weight, its distal segment follows the PIP.
struct HandRig {
  std::uint64_t seed = 0;
  std::vector<double> rest_vertices;     // V x 3
  std::vector<std::array<std::uint32_t, 3>> faces;
  std::vector<int> parents;              // 16 skinned joints, -1 for the root
  std::vector<int> reported_parents;     // 21 reported joints
  std::vector<double> skinning_weights;  // V x 16
  std::vector<double> shape_blend;       // V x 3 x 10
  std::vector<double> joint_regressor;   // 21 x V

  // Tensor views of the constants above, built once.
  Tensor rest_t;         // [V*3]
  Tensor blend_t;       // [10, V*3]
  Tensor regressor16_t;  // [16, V]
  Tensor regressor21_t;  // [21, V]
  Tensor weights_t;     // [V, 16]

  /// Re-derives the tensor views from the plain arrays.
  void finalize();
};

HandRig build_rig(std::uint64_t seed);

/// Batched, tape-aware forward pass.
///
/// theta: [H, 45], beta: [H, 10], phi: [H, 3]. Returns vertices [H, V, 3] and
/// joints [H, 21, 3]. Differentiable in all three inputs.
struct HandBatch {
  Tensor vertices;
  Tensor joints;
};
HandBatch forward_batch(const HandRig& rig, const Tensor& theta, const Tensor& beta,
                        const Tensor& phi, std::span<const Side> sides);

/// Packs parameters into the [H, *] tensors forward_batch takes.
struct ParamTensors {
  Tensor theta, beta, phi;
  std::vector<Side> sides;
};
ParamTensors pack_params(std::span<const HandParams> hands, bool requires_grad = false);

HandGeometry forward(const HandRig& rig, const HandParams& params);

/// Axis-angle rows [N, 3] to row-major rotation matrices [N, 9].
Tensor rodrigues(const Tensor& axis_angles);

void save_rig(const HandRig& rig, const std::filesystem::path& path);
HandRig load_rig(const std::filesystem::path& path);

}  // namespace ehicl

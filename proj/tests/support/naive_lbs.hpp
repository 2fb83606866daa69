// SPDX-License-Identifier: Apache-2.0
#pragma once

// Straightforward per-vertex linear blend skinning written against the raw
// rig arrays, with rotations from Eigen's AngleAxis. Left hands are posed on
// an x-mirrored copy of the rest mesh with the rotations taken as given.

#include <Eigen/Geometry>

#include <vector>

#include "ehicl/hand_model.hpp"

namespace ehicl::testing {

inline Eigen::Matrix3d axis_angle_matrix(double x, double y, double z) {
  const Eigen::Vector3d r(x, y, z);
  const double angle = r.norm();
  if (angle == 0.0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, r / angle).toRotationMatrix();
}

inline HandGeometry naive_forward(const HandRig& rig, const HandParams& p) {
  const double mirror = p.side == Side::left ? -1.0 : 1.0;
  std::vector<Eigen::Vector3d> rest(kVertices);
  for (std::size_t v = 0; v < kVertices; ++v) {
    for (int c = 0; c < 3; ++c) {
      double x = rig.rest_vertices[3 * v + c];
      for (std::size_t k = 0; k < kBetaSize; ++k) x += rig.shape_blend[(3 * v + c) * kBetaSize + k] * p.beta[k];
      rest[v][c] = x;
    }
    rest[v].x() *= mirror;
  }
  std::vector<Eigen::Vector3d> joint(kSkinnedJoints, Eigen::Vector3d::Zero());
  for (std::size_t j = 0; j < kSkinnedJoints; ++j) {
    for (std::size_t v = 0; v < kVertices; ++v) joint[j] += rig.joint_regressor[j * kVertices + v] * rest[v];
  }
  std::vector<Eigen::Matrix3d> rot(kSkinnedJoints);
  std::vector<Eigen::Vector3d> trans(kSkinnedJoints);
  for (std::size_t j = 0; j < kSkinnedJoints; ++j) {
    const double* r = j == 0 ? p.phi.data() : p.theta.data() + 3 * (j - 1);
    const Eigen::Matrix3d local = axis_angle_matrix(r[0], r[1], r[2]);
    const Eigen::Vector3d local_t = joint[j] - local * joint[j];
    const int parent = rig.parents[j];
    if (parent < 0) {
      rot[j] = local;
      trans[j] = local_t;
    } else {
      rot[j] = rot[parent] * local;
      trans[j] = rot[parent] * local_t + trans[parent];
    }
  }
  HandGeometry out;
  out.vertices.assign(kVertices * 3, 0.0);
  for (std::size_t v = 0; v < kVertices; ++v) {
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (std::size_t j = 0; j < kSkinnedJoints; ++j) {
      const double w = rig.skinning_weights[v * kSkinnedJoints + j];
      if (w != 0.0) acc += w * (rot[j] * rest[v] + trans[j]);
    }
    for (int c = 0; c < 3; ++c) out.vertices[3 * v + c] = acc[c];
  }
  out.joints.assign(kReportedJoints * 3, 0.0);
  for (std::size_t j = 0; j < kReportedJoints; ++j) {
    for (std::size_t v = 0; v < kVertices; ++v) {
      for (int c = 0; c < 3; ++c) {
        out.joints[3 * j + c] += rig.joint_regressor[j * kVertices + v] * out.vertices[3 * v + c];
      }
    }
  }
  return out;
}

inline HandParams random_params(RandomStream& rng, Side side, double pose_sd = 0.4) {
  std::vector<double> theta(kThetaSize), beta(kBetaSize), phi(kPhiSize);
  for (double& t : theta) t = pose_sd * rng.normal();
  for (double& b : beta) b = rng.normal();
  for (double& f : phi) f = rng.normal();
  return HandParams::create(theta, beta, phi, side);
}

}  // namespace ehicl::testing

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <vector>

#include "ehicl/random.hpp"

namespace ehicl::testing {

inline std::vector<double> random_cloud(RandomStream& rng, std::size_t n, double sd = 30.0) {
  std::vector<double> p(3 * n);
  for (double& x : p) x = sd * rng.normal();
  return p;
}

inline Eigen::Matrix3d random_rotation(RandomStream& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

inline std::vector<double> transform(const std::vector<double>& p, const Eigen::Matrix3d& r, double s,
                              const Eigen::Vector3d& t) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size() / 3; ++i) {
    const Eigen::Vector3d x = s * r * Eigen::Vector3d(p[3 * i], p[3 * i + 1], p[3 * i + 2]) + t;
    for (int c = 0; c < 3; ++c) out[3 * i + c] = x[c];
  }
  return out;
}

inline double sq_residual(const std::vector<double>& pred, const std::vector<double>& gt, const Eigen::Matrix3d& r,
                   double s, const Eigen::Vector3d& t) {
  const auto moved = transform(pred, r, s, t);
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += (moved[i] - gt[i]) * (moved[i] - gt[i]);
  return total;
}

// Random-search oracle: global draws over (R, s, t) plus shrinking local
// perturbations of the best point found so far.
inline double random_search_residual(const std::vector<double>& pred, const std::vector<double>& gt,
                              RandomStream& rng, int samples) {
  Eigen::Vector3d mp = Eigen::Vector3d::Zero(), mg = Eigen::Vector3d::Zero();
  const std::size_t n = pred.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    mp += Eigen::Vector3d(pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]) / n;
    mg += Eigen::Vector3d(gt[3 * i], gt[3 * i + 1], gt[3 * i + 2]) / n;
  }
  double best = std::numeric_limits<double>::infinity();
  Eigen::Matrix3d br = Eigen::Matrix3d::Identity();
  double bs = 1.0;
  Eigen::Vector3d bt = mg - mp;
  for (int k = 0; k < samples; ++k) {
    Eigen::Matrix3d r;
    double s;
    Eigen::Vector3d t;
    if (k < samples / 2) {
      r = random_rotation(rng);
      s = std::exp(rng.uniform(-1.0, 1.0));
      t = mg - s * r * mp + Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    } else {
      const double radius = 0.3 * std::pow(1e-3, static_cast<double>(k - samples / 2) / (samples / 2));
      const Eigen::Vector3d w(rng.normal(0, radius), rng.normal(0, radius), rng.normal(0, radius));
      r = Eigen::AngleAxisd(w.norm(), w.norm() > 0 ? w.normalized() : Eigen::Vector3d::UnitX()) * br;
      s = bs * std::exp(rng.normal(0, radius));
      t = bt + 10.0 * Eigen::Vector3d(rng.normal(0, radius), rng.normal(0, radius), rng.normal(0, radius));
    }
    const double res = sq_residual(pred, gt, r, s, t);
    if (res < best) {
      best = res;
      br = r;
      bs = s;
      bt = t;
    }
  }
  return best;
}

}  // namespace ehicl::testing

// SPDX-License-Identifier: Apache-2.0
#include "ehicl/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "ehicl/error.hpp"

namespace ehicl {

namespace {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

Points as_points(std::span<const double> flat) {
  Points p(static_cast<Eigen::Index>(flat.size() / 3), 3);
  for (std::size_t i = 0; i < flat.size(); ++i) p.data()[i] = flat[i];
  return p;
}

void check_pair(std::span<const double> pred, std::span<const double> gt, const char* name) {
  if (pred.size() != gt.size() || pred.size() % 3 != 0) {
    throw ShapeError(std::string(name) + ": point sets of " + std::to_string(pred.size()) + " and " +
                     std::to_string(gt.size()) + " values are not matching N x 3 arrays");
  }
  if (pred.empty()) throw ShapeError(std::string(name) + ": empty point set");
}

std::vector<double> distances(std::span<const double> pred, std::span<const double> gt, bool aligned) {
  std::vector<double> moved;
  if (aligned) {
    moved = procrustes_align(pred, gt).aligned_points;
    pred = moved;
  }
  std::vector<double> out(pred.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double dx = pred[3 * i] - gt[3 * i];
    const double dy = pred[3 * i + 1] - gt[3 * i + 1];
    const double dz = pred[3 * i + 2] - gt[3 * i + 2];
    out[i] = std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

AlignmentResult procrustes_align(std::span<const double> pred, std::span<const double> gt) {
  check_pair(pred, gt, "procrustes_align");
  const auto n = static_cast<Eigen::Index>(pred.size() / 3);
  if (n < 3) throw ShapeError("procrustes_align: need at least 3 points, got " + std::to_string(n));
  const Points x = as_points(pred);
  const Points y = as_points(gt);
  const Eigen::RowVector3d mx = x.colwise().mean();
  const Eigen::RowVector3d my = y.colwise().mean();
  const Points xc = x.rowwise() - mx;
  const Points yc = y.rowwise() - my;

  const Eigen::JacobiSVD<Eigen::Matrix3d> gt_spread(yc.transpose() * yc);
  const auto sv = gt_spread.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0]) {
    throw DegenerateConfigurationError("procrustes_align: ground-truth points are collinear or coincident");
  }
  const double var_x = xc.squaredNorm() / static_cast<double>(n);
  if (!(var_x > 0.0)) {
    throw DegenerateConfigurationError("procrustes_align: predicted points coincide");
  }

  if (std::ranges::equal(pred, gt)) {
    // Identity is the exact minimizer; skip the SVD round-off.
    AlignmentResult same;
    same.rotation = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    same.aligned_points.assign(gt.begin(), gt.end());
    return same;
  }
  const Eigen::Matrix3d cov = yc.transpose() * xc / static_cast<double>(n);
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d sign(1.0, 1.0, 1.0);
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) sign[2] = -1.0;
  const Eigen::Matrix3d r = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  const double s = svd.singularValues().dot(sign) / var_x;
  const Eigen::Vector3d t = my.transpose() - s * r * mx.transpose();

  AlignmentResult out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.rotation[3 * i + j] = r(i, j);
    out.translation[i] = t[i];
  }
  out.scale = s;
  out.aligned_points.resize(pred.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d p = s * r * x.row(i).transpose() + t;
    for (int c = 0; c < 3; ++c) {
      out.aligned_points[3 * i + c] = p[c];
      const double d = p[c] - gt[3 * i + c];
      out.residual += d * d;
    }
  }
  return out;
}

double mean_point_error(std::span<const double> pred, std::span<const double> gt, bool aligned) {
  check_pair(pred, gt, "mean_point_error");
  return mean_of(distances(pred, gt, aligned));
}

double mpjpe(std::span<const double> pred_joints, std::span<const double> gt_joints, bool aligned) {
  check_pair(pred_joints, gt_joints, "mpjpe");
  return mean_point_error(pred_joints, gt_joints, aligned);
}

double mpvpe(std::span<const double> pred_vertices, std::span<const double> gt_vertices, bool aligned) {
  check_pair(pred_vertices, gt_vertices, "mpvpe");
  return mean_point_error(pred_vertices, gt_vertices, aligned);
}

double f_score(std::span<const double> pred, std::span<const double> gt, double threshold, bool aligned) {
  if (!(threshold > 0.0)) throw Error("f_score: threshold must be positive, got " + std::to_string(threshold));
  check_pair(pred, gt, "f_score");
  const auto d = distances(pred, gt, aligned);
  std::size_t within = 0;
  for (double x : d) within += x <= threshold ? 1 : 0;
  return static_cast<double>(within) / static_cast<double>(d.size());
}

double mrrpe(const std::optional<Point3>& pred_left, const std::optional<Point3>& pred_right,
             const std::optional<Point3>& gt_left, const std::optional<Point3>& gt_right) {
  if (!pred_left || !pred_right || !gt_left || !gt_right) {
    throw DataError("mrrpe: both hands are required; sample is excluded from bimanual aggregation");
  }
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double d = ((*pred_left)[c] - (*pred_right)[c]) - ((*gt_left)[c] - (*gt_right)[c]);
    total += d * d;
  }
  return std::sqrt(total);
}

HandErrors hand_errors(const HandGeometry& pred, const HandGeometry& gt, const MetricOptions& options) {
  HandErrors e;
  e.mpjpe = mpjpe(pred.joints, gt.joints, false);
  e.p_mpjpe = mpjpe(pred.joints, gt.joints, true);
  e.mpvpe = mpvpe(pred.vertices, gt.vertices, false);
  const auto aligned = distances(pred.vertices, gt.vertices, true);
  e.p_mpvpe = mean_of(aligned);
  const auto raw = options.align_f_scores ? std::vector<double>{} : distances(pred.vertices, gt.vertices, false);
  const auto& d = options.align_f_scores ? aligned : raw;
  for (double t : options.f_thresholds) {
    if (!(t > 0.0)) throw Error("f_score: threshold must be positive, got " + std::to_string(t));
    std::size_t within = 0;
    for (double x : d) within += x <= t ? 1 : 0;
    e.f_at[t] = static_cast<double>(within) / static_cast<double>(d.size());
  }
  return e;
}

const char* setting_name(Setting s) { return s == Setting::general ? "general" : "bimanual"; }

MetricReport aggregate(std::span<const SampleEvaluation> samples, Setting setting) {
  MetricReport report;
  report.setting = setting;
  MetricMeans sums;
  double mrrpe_sum = 0.0;

  const auto add_hand = [&](const SampleEvaluation& s, const HandEvaluation& h, std::optional<double> m) {
    report.rows.push_back({s.id, h.side, h.errors, m});
    sums.mpjpe += h.errors.mpjpe;
    sums.p_mpjpe += h.errors.p_mpjpe;
    sums.mpvpe += h.errors.mpvpe;
    sums.p_mpvpe += h.errors.p_mpvpe;
    for (const auto& [t, f] : h.errors.f_at) sums.f_at[t] += f;
    ++report.hand_count;
  };

  for (const auto& s : samples) {
    if (setting == Setting::general) {
      bool any = false;
      for (const auto& h : s.hands) {
        if (!h.detected) {
          ++report.excluded_hands;
          continue;
        }
        add_hand(s, h, std::nullopt);
        any = true;
      }
      any ? ++report.sample_count : ++report.excluded_samples;
      continue;
    }
    const HandEvaluation* left = nullptr;
    const HandEvaluation* right = nullptr;
    for (const auto& h : s.hands) (h.side == Side::left ? left : right) = &h;
    if (!left || !right || !left->detected || !right->detected) {
      for (const auto& h : s.hands) report.excluded_hands += h.detected ? 0 : 1;
      ++report.excluded_samples;
      continue;
    }
    const double m = mrrpe(left->pred_root, right->pred_root, left->gt_root, right->gt_root);
    add_hand(s, *left, m);
    add_hand(s, *right, m);
    mrrpe_sum += m;
    ++report.sample_count;
  }

  if (report.hand_count == 0) return report;
  report.empty = false;
  const double n = static_cast<double>(report.hand_count);
  MetricMeans means;
  means.mpjpe = sums.mpjpe / n;
  means.p_mpjpe = sums.p_mpjpe / n;
  means.mpvpe = sums.mpvpe / n;
  means.p_mpvpe = sums.p_mpvpe / n;
  for (const auto& [t, f] : sums.f_at) means.f_at[t] = f / n;
  if (setting == Setting::bimanual) means.mrrpe = mrrpe_sum / static_cast<double>(report.sample_count);
  report.means = means;
  return report;
}

namespace {

std::string threshold_key(double t) {
  std::string s = std::to_string(t);
  s.erase(s.find_last_not_of('0') + 1);
  if (!s.empty() && s.back() == '.') s.pop_back();
  return "F@" + s;
}

nlohmann::json errors_json(const HandErrors& e) {
  nlohmann::json j{{"MPJPE", e.mpjpe}, {"P-MPJPE", e.p_mpjpe}, {"MPVPE", e.mpvpe}, {"P-MPVPE", e.p_mpvpe}};
  nlohmann::json f = nlohmann::json::array();
  for (const auto& [t, v] : e.f_at) f.push_back({t, v});
  j["F"] = f;
  return j;
}

HandErrors errors_from_json(const nlohmann::json& j) {
  HandErrors e;
  e.mpjpe = j.at("MPJPE").get<double>();
  e.p_mpjpe = j.at("P-MPJPE").get<double>();
  e.mpvpe = j.at("MPVPE").get<double>();
  e.p_mpvpe = j.at("P-MPVPE").get<double>();
  for (const auto& pair : j.at("F")) e.f_at[pair.at(0).get<double>()] = pair.at(1).get<double>();
  return e;
}

}  // namespace

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j{{"setting", setting_name(r.setting)},
                   {"empty", r.empty},
                   {"samples", r.sample_count},
                   {"hands", r.hand_count},
                   {"excluded_hands", r.excluded_hands},
                   {"excluded_samples", r.excluded_samples}};
  if (r.means) {
    const auto& m = *r.means;
    nlohmann::json means{{"MPJPE", m.mpjpe}, {"P-MPJPE", m.p_mpjpe}, {"MPVPE", m.mpvpe}, {"P-MPVPE", m.p_mpvpe}};
    for (const auto& [t, f] : m.f_at) means[threshold_key(t)] = f;
    nlohmann::json f = nlohmann::json::array();
    for (const auto& [t, v] : m.f_at) f.push_back({t, v});
    means["F"] = f;
    means["MRRPE"] = m.mrrpe ? nlohmann::json(*m.mrrpe) : nlohmann::json(nullptr);
    j["means"] = means;
  } else {
    j["means"] = nullptr;
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json e = errors_json(row.errors);
    e["sample"] = row.sample_id;
    e["side"] = side_name(row.side);
    e["MRRPE"] = row.mrrpe ? nlohmann::json(*row.mrrpe) : nlohmann::json(nullptr);
    rows.push_back(e);
  }
  j["rows"] = rows;
  return j;
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.setting = j.at("setting").get<std::string>() == "general" ? Setting::general : Setting::bimanual;
  r.empty = j.at("empty").get<bool>();
  r.sample_count = j.at("samples").get<std::size_t>();
  r.hand_count = j.at("hands").get<std::size_t>();
  r.excluded_hands = j.at("excluded_hands").get<std::size_t>();
  r.excluded_samples = j.at("excluded_samples").get<std::size_t>();
  if (!j.at("means").is_null()) {
    const auto& m = j.at("means");
    MetricMeans means;
    means.mpjpe = m.at("MPJPE").get<double>();
    means.p_mpjpe = m.at("P-MPJPE").get<double>();
    means.mpvpe = m.at("MPVPE").get<double>();
    means.p_mpvpe = m.at("P-MPVPE").get<double>();
    for (const auto& pair : m.at("F")) means.f_at[pair.at(0).get<double>()] = pair.at(1).get<double>();
    if (!m.at("MRRPE").is_null()) means.mrrpe = m.at("MRRPE").get<double>();
    r.means = means;
  }
  for (const auto& row : j.at("rows")) {
    MetricRow out;
    out.sample_id = row.at("sample").get<std::string>();
    out.side = row.at("side").get<std::string>() == "left" ? Side::left : Side::right;
    out.errors = errors_from_json(row);
    if (!row.at("MRRPE").is_null()) out.mrrpe = row.at("MRRPE").get<double>();
    r.rows.push_back(std::move(out));
  }
  return r;
}

}  // namespace ehicl

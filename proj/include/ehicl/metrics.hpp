// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehicl/hand_model.hpp"

namespace ehicl {

using Point3 = std::array<double, 3>;

struct AlignmentResult {
  std::array<double, 9> rotation{};  // row-major, det +1
  double scale = 1.0;
  Point3 translation{};
  std::vector<double> aligned_points;  // N x 3
  double residual = 0.0;               // sum of squared distances to gt
};

/// Similarity transform (s, R, t) minimizing sum |s R p_i + t - g_i|^2.
///
/// Closed-form centered-SVD solution with a sign correction on the smallest
/// singular direction so R is a proper rotation. Points are N x 3, N >= 3.
/// Throws DegenerateConfigurationError when the centered gt has rank < 2 or
/// pred collapses to a point.
AlignmentResult procrustes_align(std::span<const double> pred, std::span<const double> gt);

/// Mean Euclidean distance between corresponding rows of two N x 3 sets,
/// after Procrustes alignment when `aligned` is set.
double mean_point_error(std::span<const double> pred, std::span<const double> gt, bool aligned);

/// mean_point_error over the 21 joints.
double mpjpe(std::span<const double> pred_joints, std::span<const double> gt_joints, bool aligned);
/// mean_point_error over the 778 vertices.
double mpvpe(std::span<const double> pred_vertices, std::span<const double> gt_vertices, bool aligned);

/// Fraction of points within `threshold` mm (inclusive).
double f_score(std::span<const double> pred, std::span<const double> gt, double threshold, bool aligned);

/// |(pl - pr) - (gl - gr)|. Absent hands raise a DataError: the sample does
/// not belong in bimanual aggregation.
double mrrpe(const std::optional<Point3>& pred_left, const std::optional<Point3>& pred_right,
             const std::optional<Point3>& gt_left, const std::optional<Point3>& gt_right);

struct MetricOptions {
  std::vector<double> f_thresholds{5.0, 15.0};
  bool align_f_scores = true;
};

struct HandErrors {
  double mpjpe = 0, p_mpjpe = 0, mpvpe = 0, p_mpvpe = 0;
  std::map<double, double> f_at;
};

/// Geometry in the hand's own frame plus the wrist position in the camera
/// frame, used only by MRRPE.
struct HandEvaluation {
  Side side = Side::right;
  bool detected = true;
  HandErrors errors;
  Point3 pred_root{};
  Point3 gt_root{};
};

HandErrors hand_errors(const HandGeometry& pred, const HandGeometry& gt, const MetricOptions& options = {});

struct SampleEvaluation {
  std::string id;
  int involvement = 0;
  std::vector<HandEvaluation> hands;  // one entry per ground-truth hand
};

enum class Setting { general, bimanual };
const char* setting_name(Setting s);

struct MetricMeans {
  double mpjpe = 0, p_mpjpe = 0, mpvpe = 0, p_mpvpe = 0;
  std::map<double, double> f_at;
  std::optional<double> mrrpe;  // bimanual only
};

struct MetricRow {
  std::string sample_id;
  Side side = Side::right;
  HandErrors errors;
  std::optional<double> mrrpe;
};

struct MetricReport {
  Setting setting = Setting::general;
  /// Empty marker: no sample survived the filter. `means` is then absent.
  bool empty = true;
  std::optional<MetricMeans> means;
  std::size_t sample_count = 0;
  std::size_t hand_count = 0;
  std::size_t excluded_hands = 0;    // ground-truth hands dropped for failed detection
  std::size_t excluded_samples = 0;  // samples contributing nothing under this setting
  std::vector<MetricRow> rows;
};

/// general: every detected hand counts once. bimanual: only samples whose
/// two hands are both present and detected, with MRRPE from the wrists.
MetricReport aggregate(std::span<const SampleEvaluation> samples, Setting setting);

nlohmann::json to_json(const MetricReport& report);
MetricReport metric_report_from_json(const nlohmann::json& j);

}  // namespace ehicl

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ehicl/hand_model.hpp"
#include "ehicl/icl.hpp"
#include "ehicl/metrics.hpp"
#include "ehicl/retrieval.hpp"

namespace ehicl {

enum class Split { train, val, test };
const char* split_name(Split s);
Split split_from_string(std::string_view s);

/// Coarse-estimate corruption. Angles in radians.
struct NoiseConfig {
  double pose_sigma = 0.1;      // theta and phi
  double shape_sigma = 0.3;     // beta
  double two_hand_factor = 2.0;  // sigma multiplier on two-hand samples
  double feature_sigma = 0.05;  // image feature noise
  double p_swap = 0.05;         // left/right coarse exchange, two-hand samples
  double p_miss = 0.03;         // per-hand detection loss
};

enum class MaskSchedule { per_epoch, fixed };
const char* mask_schedule_name(MaskSchedule m);
MaskSchedule mask_schedule_from_string(std::string_view s);

/// Every knob of a run. Defaults follow the published training recipe
/// (100 epochs, lr 1e-4, batch 64); desk() is the CPU profile.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t train_size = 2000;
  std::size_t val_size = 400;
  std::size_t test_size = 400;
  /// left-only, right-only, both, none.
  std::array<double, kInvolvementClasses> proportions{0.068, 0.121, 0.786, 0.025};
  NoiseConfig noise;
  double mask_ratio = 0.7;
  MaskSchedule mask_schedule = MaskSchedule::per_epoch;
  /// Training queries draw a fresh coarse estimate from their gt each epoch.
  bool resample_coarse = true;
  std::size_t epochs = 100;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  LossWeights lambdas;
  IclConfig model;
  RetrievalStrategy strategy = RetrievalStrategy::combined;
  PromptStyle prompt_style = PromptStyle::description;
  DatasetMode dataset_mode = DatasetMode::mano_supervised;
  bool template_targets = true;
  bool perceptual_on_joints = false;
  double vlm_flip_probability = 0.0;
  int validation_runs = 3;
  std::uint64_t rig_seed = 7;
  std::size_t eval_batch = 64;
  std::size_t threads = 0;  // 0: hardware concurrency

  /// 30 epochs, batch 16, pose sigma 0.15; everything else as above.
  static RunConfig desk();

  void validate() const;  // ConfigError

  /// Flat `key = value` lines, one per field, in a fixed order. `#` starts a
  /// comment. Keys absent from a document keep the values of `base`.
  std::string to_text() const;
  static RunConfig from_text(std::string_view text);
  static RunConfig from_text(std::string_view text, RunConfig base);
  void set(std::string_view key, std::string_view value);  // ConfigError on unknown keys
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig load(const std::filesystem::path& path, RunConfig base);
  void save(const std::filesystem::path& path) const;
  nlohmann::json to_json() const;
};

struct SyntheticSample {
  std::string id;
  Split split = Split::train;
  Involvement involvement = Involvement::none;
  std::array<std::optional<HandParams>, kSlots> gt;
  std::array<std::optional<HandParams>, kSlots> coarse;  // present exactly where gt is
  std::array<bool, kSlots> detected{};
  std::array<Point3, kSlots> translation{};  // wrist offset in the camera frame, mm
  bool swapped = false;
  std::vector<double> image_features;
  std::string object, verb, pose;

  std::string image_ref() const;  // the id; templates are classified by id
  ImageMetadata metadata() const;
};

struct Corpus {
  std::vector<SyntheticSample> samples;

  std::vector<std::size_t> indices(Split s) const;
  /// Blob file with magic "EHCRP1".
  void save(const std::filesystem::path& path) const;
  static Corpus load(const std::filesystem::path& path);
};

struct CoarseEstimate {
  std::array<std::optional<HandParams>, kSlots> coarse;
  std::array<bool, kSlots> detected{};
  bool swapped = false;
};

/// gt plus Gaussian noise on theta/phi (pose_sigma) and beta (shape_sigma),
/// both scaled by two_hand_factor when two hands are present; then the
/// left/right exchange with p_swap and per-hand detection loss with p_miss.
CoarseEstimate corrupt_to_coarse(const std::array<std::optional<HandParams>, kSlots>& gt, RandomStream& rng,
                                 const NoiseConfig& noise);

/// Fixed random linear map from the gt joints of both hands to the image
/// feature space, plus feature noise.
std::vector<double> image_features(const std::array<std::optional<HandParams>, kSlots>& gt, const HandRig& rig,
                                   const RunConfig& config, RandomStream& rng);

/// train_size + val_size + test_size samples, splits in that order.
Corpus generate_corpus(const RunConfig& config, const HandRig& rig);

/// Mock VLM that knows every corpus image, keyed by sample id.
std::unique_ptr<MockVlmClient> make_mock_vlm(const Corpus& corpus, const RunConfig& config);

/// One record per train sample: description from the VLM, detected hands
/// only. Not yet validated.
TemplateDb build_template_db(const Corpus& corpus, VlmClient& client, const RunConfig& config);

/// Classification, description and embedding of a query image. The gt is
/// attached only when `with_gt` is set.
struct PreparedQuery {
  std::size_t sample = 0;
  QueryInput input;
  RetrievalQuery retrieval;
};
PreparedQuery prepare_query(const Corpus& corpus, std::size_t index, VlmClient& client, const RunConfig& config,
                            bool with_gt);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0, l_mano = 0, l_v = 0, l_j = 0, l_3d = 0;  // hand-weighted epoch means
  std::size_t supervised_hands = 0;
  double val_p_mpvpe = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> curve;
  std::size_t best_epoch = 0;
  double best_val = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Retrieve, bundle, mask, forward, loss, backward, AdamW step per batch.
/// Keeps the weights of the epoch with the lowest validation P-MPVPE.
/// NumericalError naming the batch on a non-finite loss.
TrainResult train(const RunConfig& config, const Corpus& corpus, const TemplateDb& db, VlmClient& client,
                  const HandRig& rig, const EpochCallback& on_epoch = {});

struct SamplePrediction {
  std::string id;
  Involvement involvement = Involvement::none;
  std::string template_id;
  double similarity = 0;
  bool fallback = false;
  std::array<std::optional<HandParams>, kSlots> refined;
  std::optional<double> gain;  // mean coarse minus refined P-MPVPE over evaluated hands
};

struct TypeBreakdown {
  Involvement involvement = Involvement::none;
  std::size_t samples = 0;
  MetricReport refined, coarse;
};

struct RunReport {
  std::string split;
  std::size_t samples = 0;
  MetricReport refined_general, refined_bimanual, coarse_general, coarse_bimanual;
  std::array<TypeBreakdown, kInvolvementClasses> by_type;
  std::vector<EpochLog> loss_curve;
  std::vector<HistogramBin> histogram;
  std::optional<double> similarity_gain_correlation;
  std::vector<SamplePrediction> predictions;

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
};

/// Inference-mode refinement of every sample in `split` against templates
/// from `db`, metrics for refined and coarse parameters.
RunReport evaluate(const PipelineWeights& weights, const Corpus& corpus, Split split, const TemplateDb& db,
                   VlmClient& client, const HandRig& rig, const RunConfig& config);

/// Writes report.json, report.csv, report.txt, loss_curve.csv and
/// similarity_histogram.csv into `dir`.
void emit_report(const RunReport& report, const std::filesystem::path& dir);

/// Fixed-column metric table, one row per (model, setting, type).
std::string report_csv(const RunReport& report);
std::string report_table(const RunReport& report);
std::string loss_curve_csv(std::span<const EpochLog> curve);
std::vector<EpochLog> parse_loss_curve_csv(std::string_view csv);  // DataError on malformed rows
std::string histogram_csv(std::span<const HistogramBin> bins);
inline constexpr std::array<const char*, 13> kReportColumns = {
    "model",   "setting", "type",   "samples", "hands", "mpjpe", "p_mpjpe",
    "mpvpe",   "p_mpvpe", "f_at_5", "f_at_15", "mrrpe", "excluded_hands"};

/// Locale-independent decimal rendering.
std::string format_fixed(double value, int precision);
std::string format_shortest(double value);

/// External keypoint predictions: one JSON object per line,
/// {"id": ..., "hands": {"left": {"pred": [63], "gt": [63], "detected": bool}, "right": ...}}.
struct KeypointSample {
  std::string id;
  std::array<std::optional<std::vector<double>>, kSlots> pred, gt;
  std::array<bool, kSlots> detected{true, true};
};
std::vector<KeypointSample> read_keypoints(const std::filesystem::path& path);
std::vector<KeypointSample> parse_keypoints(std::string_view jsonl);

struct KeypointReport {
  Setting setting = Setting::general;
  bool empty = true;
  std::size_t samples = 0, hands = 0, excluded_hands = 0;
  double mpjpe = 0, p_mpjpe = 0;
  std::map<double, double> f_at;
  std::optional<double> mrrpe;
  nlohmann::json to_json() const;
};
KeypointReport evaluate_keypoints(std::span<const KeypointSample> samples, Setting setting,
                                  const MetricOptions& options = {});

/// Output directory layout shared by the CLI subcommands.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "run.conf"; }
  std::filesystem::path corpus() const { return root / "corpus.bin"; }
  std::filesystem::path rig() const { return root / "rig.bin"; }
  std::filesystem::path templates() const { return root / "templates"; }
  std::filesystem::path checkpoint() const { return root / "checkpoint.bin"; }
  std::filesystem::path loss_curve() const { return root / "loss_curve.csv"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

/// gen -> validate -> train -> eval on the test split, every artifact written
/// under `paths`. Returns the test report.
RunReport run_full(const RunConfig& config, const RunPaths& paths, const EpochCallback& on_epoch = {});

/// Central finite differences against the tape gradient of the training
/// loss, end to end through MANO forward, refinement and bundling. Uses the
/// first `samples` training queries of a corpus generated from `config`;
/// the zero-initialized decoder output layer is drawn at 0.05 scale so every
/// parameter receives gradient. `per_parameter` entries are sampled from
/// each tensor.
struct GradCheckEntry {
  std::string parameter;
  std::size_t checked = 0;
  double relative_error = 0;  // ||analytic - numeric|| / max(norms, 1e-8)
};
std::vector<GradCheckEntry> end_to_end_grad_check(const RunConfig& config, const HandRig& rig,
                                                  std::size_t samples = 3, std::size_t per_parameter = 6,
                                                  double step = 1e-5);

/// Runs fn(i) for i in [0, n) on up to `threads` workers over contiguous
/// chunks; results must be written to index i only.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace ehicl

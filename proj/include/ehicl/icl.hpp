// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehicl/hand_model.hpp"
#include "ehicl/optim.hpp"
#include "ehicl/random.hpp"
#include "ehicl/retrieval.hpp"
#include "ehicl/tensor.hpp"

namespace ehicl {

/// Width of the flat parameter rows the encoder and decoder see:
/// theta | beta | phi (| side flag on the encoder side).
inline constexpr std::size_t kManoRow = kThetaSize + kBetaSize + kPhiSize;
/// Hand slots per token set: left, right.
inline constexpr std::size_t kSlots = 2;

struct IclConfig {
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t mano_hidden = 128;
  std::size_t image_feature_dim = 96;
  std::size_t image_tokens = 4;  // image_feature_dim is split evenly across these
  std::size_t text_dim = kTextEmbeddingDim;
  std::size_t phi_hidden = 16;
  std::size_t phi_dim = 32;
  std::uint64_t phi_seed = 0x5eedf00d;
  double phi_input_scale = 0.02;  // mm -> encoder units
  double theta_input_scale = 1.0 / 0.3;  // theta entries of encoder rows, so pose and shape share a scale
  bool decoder_reads_coarse = true;      // decoder sees the scaled coarse row next to its target token
  double decoder_gain = 10.0;            // decoder output multiplier before the residual add

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static IclConfig from_json(const nlohmann::json& j);
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
  Tensor operator()(const Tensor& x) const;
};

/// Two-layer perceptron, GELU in between.
struct Mlp {
  Linear fc1, fc2;
  Tensor operator()(const Tensor& x) const;
};

/// Affine part applied after layer_norm.
struct Norm {
  Tensor gain, bias;  // [d]
  Tensor operator()(const Tensor& x) const;
};

struct CrossAttention {
  Norm norm;   // applied to the structural queries
  Tensor wq, wk, wv, wo;  // [d, d], no biases
};

struct EncoderLayer {
  Norm norm1, norm2;
  Linear qkv;  // [d, 3d]
  Linear proj;
  Mlp mlp;
};

/// Every learnable tensor of the refinement pipeline.
struct PipelineWeights {
  IclConfig config;
  Mlp mano_encoder;         // kParamVectorSize -> d
  Tensor hand_identity;     // [2, d]
  Tensor absent_token;      // [d], structural token of a missing hand
  Mlp feature_projection;   // image chunk -> d
  Tensor image_position;    // [image_tokens, d]
  Mlp text_projection;      // text_dim -> d
  CrossAttention fusion;
  Tensor mask_token;        // [d]
  Tensor role_embedding;    // [4, d]
  Tensor position_embedding;  // [kSlots, d]
  std::vector<EncoderLayer> layers;
  Norm final_norm;
  Mlp mano_decoder;  // d -> kManoRow, output layer zero-initialized

  /// Weights N(0, 1/fan_in), biases zero, embeddings N(0, 0.02^2), norm
  /// gains one. The decoder output layer starts at zero so refinement begins
  /// as the identity on the coarse estimate.
  static PipelineWeights init(const IclConfig& config, std::uint64_t seed);

  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  PipelineWeights clone() const;
};

enum class TokenRole : std::size_t { template_input = 0, template_target = 1, query_input = 2, query_target = 3 };
const char* role_name(TokenRole r);
inline constexpr std::array<TokenRole, 4> kRoles = {TokenRole::template_input, TokenRole::template_target,
                                                    TokenRole::query_input, TokenRole::query_target};
bool is_target(TokenRole r);

struct TokenSet {
  TokenRole role = TokenRole::template_input;
  Tensor tokens;              // [n, d], fused, before role/position embeddings
  std::vector<bool> mask;     // true -> replaced by the mask embedding
  std::vector<bool> present;  // false for absent-hand padding
  std::vector<double> fusion_attention;  // [n, context] rows
  std::size_t context_tokens = 0;
};

/// The four token sets in fixed order: template input, template target,
/// query input, query target. Each set holds one token per hand slot.
struct TokenBundle {
  std::array<TokenSet, 4> sets;
  std::string template_id, query_id;
  bool inference = false;
  // Residual bases and supervision, per hand slot.
  std::array<std::optional<HandParams>, kSlots> template_coarse, template_gt;
  std::array<std::optional<HandParams>, kSlots> query_coarse, query_gt;  // query_gt empty in inference

  const TokenSet& set(TokenRole r) const { return sets[static_cast<std::size_t>(r)]; }
  TokenSet& set(TokenRole r) { return sets[static_cast<std::size_t>(r)]; }
  std::size_t target_tokens() const;
  std::size_t masked_targets() const;
};

/// Flattened (theta, beta, phi, side) rows -> MLP -> one token per row.
Tensor encode_mano(const PipelineWeights& w, const Tensor& rows);  // [H, 59] -> [H, d]
std::vector<double> encoder_row(const HandParams& p, double theta_scale = 1.0);
std::vector<double> mano_row(const HandParams& p);  // the 58 continuous entries

struct FusionResult {
  Tensor tokens;     // [G, n, d]
  Tensor attention;  // [G, n, n_image + n_text]
};

/// Structural tokens attend over the concatenated image and text tokens.
/// Shapes: structural [G, n, d], image [G, ni, d], text [G, nt, d]. Residual:
/// out = structural + attention(values) wo.
FusionResult fuse(const Tensor& structural, const Tensor& image, const Tensor& text, const PipelineWeights& w);

/// Image feature vectors [G, k] -> [G, image_tokens, d]; text [G, text_dim] -> [G, 1, d].
Tensor image_tokens(const PipelineWeights& w, const Tensor& features);
Tensor text_tokens(const PipelineWeights& w, const Tensor& embeddings);

enum class BundleMode { training, inference };

struct QueryInput {
  std::string id;
  std::array<std::optional<HandParams>, kSlots> coarse;  // absent where undetected
  std::array<std::optional<HandParams>, kSlots> gt;      // needed in training mode only
  std::vector<double> image_features;
  std::vector<double> text_embedding;
};

/// Builds bundles for a batch of (template, query) pairs in one pass.
/// Inference never reads query gt and masks all of query_target. Training
/// throws DataError when a query hand with coarse parameters lacks gt.
std::vector<TokenBundle> build_bundles(std::span<const TemplateRecord* const> templates,
                                       std::span<const QueryInput> queries, const PipelineWeights& w,
                                       BundleMode mode);
TokenBundle build_bundle(const TemplateRecord& tpl, const QueryInput& query, const PipelineWeights& w,
                         BundleMode mode);

/// Masks exactly round(ratio * n) of the n target tokens, pooled over both
/// target sets; input sets are left alone. ConfigError for ratio outside
/// [0, 1]; Error on an inference bundle.
void apply_mask(TokenBundle& bundle, double ratio, RandomStream& rng);

struct RefineOptions {
  bool retain_attention = false;
};

struct RefineOutput {
  std::size_t batch = 0;
  /// Decoded rows for the target slots, residual base added:
  /// [B, 4, kManoRow] in order tpl left, tpl right, qry left, qry right.
  Tensor decoded;
  /// Query predictions per bundle and slot, axis-angles wrapped; empty where
  /// the query hand is absent.
  std::vector<std::array<std::optional<HandParams>, kSlots>> query;
  bool attention_retained = false;
  std::vector<std::vector<double>> attention;  // per layer, [B, heads, T, T]
};

/// Full self-attention over the concatenated bundle tokens, then the MANO
/// decoder on the target positions. All bundles must share one layout.
RefineOutput refine(std::span<const TokenBundle> bundles, const PipelineWeights& w, const RefineOptions& options = {});
std::array<std::optional<HandParams>, kSlots> refine_one(const TokenBundle& bundle, const PipelineWeights& w);

/// Fixed-seed frozen point encoder: centering, per-point ReLU MLP, max-pool, MLP.
/// Its tensors never require gradients, so inputs still get gradients.
struct PhiEncoder {
  Linear point1, point2, head;
  double input_scale = 0.02;

  static PhiEncoder create(const IclConfig& config);
  Tensor operator()(const Tensor& points) const;  // [H, N, 3] -> [H, phi_dim]
  std::vector<NamedTensor> parameters() const;
};

// Losses on batches of hands; each is a mean over the leading hand axis.
Tensor loss_mano(const Tensor& pred, const Tensor& gt);      // [H, 58]: summed squares
Tensor loss_vertices(const Tensor& pred, const Tensor& gt);  // [H, V, 3]: mean |d|
Tensor loss_joints(const Tensor& pred, const Tensor& gt);    // [H, 21, 3]: mean |d|
Tensor loss_3d(const Tensor& pred_points, const Tensor& gt_points, const PhiEncoder& phi);

enum class DatasetMode { mano_supervised, joints_only };
const char* dataset_mode_name(DatasetMode m);
DatasetMode dataset_mode_from_string(std::string_view s);

struct LossWeights {
  double mano = 0.05;
  double vertices = 5.0;
  double joints = 5.0;
  double perceptual = 0.01;
};

struct LossTerms {
  Tensor l_mano, l_v, l_j, l_3d;  // scalar tensors; undefined terms count as 0
};

struct LossBreakdown {
  double l_mano = 0, l_v = 0, l_3d = 0, l_j = 0, total = 0;
  LossWeights weights;
  DatasetMode mode = DatasetMode::mano_supervised;
  Tensor total_tensor;  // differentiable total, undefined when nothing is supervised
  std::size_t supervised_hands = 0;
};

/// mano_supervised: lm*Lmano + lv*LV + l3d*L3D. joints_only: lj*LJ + l3d*L3D.
LossBreakdown total_loss(const LossTerms& terms, DatasetMode mode, const LossWeights& weights = {});

struct LossOptions {
  DatasetMode mode = DatasetMode::mano_supervised;
  LossWeights weights;
  bool template_targets = true;  // supervise masked template targets too
  bool perceptual_on_joints = false;
};

/// Supervises every masked target token whose hand has gt.
LossBreakdown pipeline_loss(const RefineOutput& out, std::span<const TokenBundle> bundles, const HandRig& rig,
                            const PhiEncoder& phi, const LossOptions& options = {});

struct AttentionExport {
  std::size_t layers = 0, heads = 0, tokens = 0;
  std::vector<std::string> labels;  // "<role>/<slot>" per token index
  std::vector<TokenRole> roles;
  std::vector<std::vector<double>> matrices;  // layers * heads, row-major T x T
  nlohmann::json to_json() const;
};

/// Attention of bundle `index` from a refine() call with retention on.
/// Error when retention was off.
AttentionExport export_attention(const RefineOutput& out, std::size_t index = 0);

struct Checkpoint {
  PipelineWeights weights;
  std::uint64_t rig_seed = 0;
  LossWeights lambdas;
  std::uint64_t step = 0;
  nlohmann::json run_config;  // free-form, stored verbatim
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ehicl

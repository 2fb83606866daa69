// SPDX-License-Identifier: Apache-2.0
#include "ehicl/icl.hpp"

#include <algorithm>
#include <cmath>

#include "ehicl/blob_io.hpp"
#include "ehicl/error.hpp"
#include "ehicl/ops.hpp"

namespace ehicl {

namespace {

constexpr const char* kCheckpointMagic = "EHICL1";

Tensor normal_init(Shape shape, RandomStream& rng, double sd) {
  return Tensor::randn(std::move(shape), rng, sd, true);
}

Linear make_linear(std::size_t in, std::size_t out, RandomStream& rng, bool zero = false) {
  Linear l;
  l.w = zero ? Tensor::zeros({in, out}, true) : normal_init({in, out}, rng, 1.0 / std::sqrt(double(in)));
  l.b = Tensor::zeros({out}, true);
  return l;
}

Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out, RandomStream& rng, bool zero_out = false) {
  return {make_linear(in, hidden, rng), make_linear(hidden, out, rng, zero_out)};
}

Norm make_norm(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

Tensor constant(Shape shape, std::vector<double> data) { return Tensor::from_data(std::move(shape), std::move(data)); }

void add_params(std::vector<NamedTensor>& out, const std::string& name, const Linear& l) {
  out.push_back({name + ".w", l.w});
  out.push_back({name + ".b", l.b});
}
void add_params(std::vector<NamedTensor>& out, const std::string& name, const Mlp& m) {
  add_params(out, name + ".fc1", m.fc1);
  add_params(out, name + ".fc2", m.fc2);
}
void add_params(std::vector<NamedTensor>& out, const std::string& name, const Norm& n) {
  out.push_back({name + ".gain", n.gain});
  out.push_back({name + ".bias", n.bias});
}

Side slot_side(std::size_t slot) { return slot == kLeftSlot ? Side::left : Side::right; }

}  // namespace

void IclConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("model dim " + std::to_string(d_model) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  if (image_tokens == 0 || image_feature_dim % image_tokens != 0) {
    throw ConfigError("image feature dim " + std::to_string(image_feature_dim) + " must split evenly into " +
                      std::to_string(image_tokens) + " image tokens");
  }
  if (mlp_ratio == 0 || mano_hidden == 0 || text_dim == 0 || phi_hidden == 0 || phi_dim == 0) {
    throw ConfigError("network widths must be positive");
  }
  if (!(theta_input_scale > 0) || !std::isfinite(theta_input_scale) || !(decoder_gain > 0) ||
      !std::isfinite(decoder_gain)) {
    throw ConfigError("theta input scale and decoder gain must be positive and finite");
  }
}

nlohmann::json IclConfig::to_json() const {
  return {{"d_model", d_model},       {"layers", layers},
          {"heads", heads},           {"mlp_ratio", mlp_ratio},
          {"mano_hidden", mano_hidden}, {"image_feature_dim", image_feature_dim},
          {"image_tokens", image_tokens}, {"text_dim", text_dim},
          {"phi_hidden", phi_hidden}, {"phi_dim", phi_dim},
          {"phi_seed", phi_seed},     {"phi_input_scale", phi_input_scale},
          {"theta_input_scale", theta_input_scale}, {"decoder_reads_coarse", decoder_reads_coarse},
          {"decoder_gain", decoder_gain}};
}

IclConfig IclConfig::from_json(const nlohmann::json& j) {
  IclConfig c;
  try {
    c.d_model = j.at("d_model");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.mano_hidden = j.at("mano_hidden");
    c.image_feature_dim = j.at("image_feature_dim");
    c.image_tokens = j.at("image_tokens");
    c.text_dim = j.at("text_dim");
    c.phi_hidden = j.at("phi_hidden");
    c.phi_dim = j.at("phi_dim");
    c.phi_seed = j.at("phi_seed");
    c.phi_input_scale = j.at("phi_input_scale");
    c.theta_input_scale = j.at("theta_input_scale");
    c.decoder_reads_coarse = j.at("decoder_reads_coarse");
    c.decoder_gain = j.at("decoder_gain");
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, w), b); }
Tensor Mlp::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
Tensor Norm::operator()(const Tensor& x) const { return add(mul(layer_norm(x), gain), bias); }

PipelineWeights PipelineWeights::init(const IclConfig& config, std::uint64_t seed) {
  config.validate();
  RandomStream rng(mix_seed(seed));
  const std::size_t d = config.d_model;
  const double emb = 0.02;
  PipelineWeights w;
  w.config = config;
  w.mano_encoder = make_mlp(kParamVectorSize, config.mano_hidden, d, rng);
  w.hand_identity = normal_init({kSlots, d}, rng, emb);
  w.absent_token = normal_init({d}, rng, emb);
  w.feature_projection = make_mlp(config.image_feature_dim / config.image_tokens, d, d, rng);
  w.image_position = normal_init({config.image_tokens, d}, rng, emb);
  w.text_projection = make_mlp(config.text_dim, d, d, rng);
  const double sd = 1.0 / std::sqrt(double(d));
  w.fusion = {make_norm(d), normal_init({d, d}, rng, sd), normal_init({d, d}, rng, sd),
              normal_init({d, d}, rng, sd), normal_init({d, d}, rng, sd)};
  w.mask_token = normal_init({d}, rng, emb);
  w.role_embedding = normal_init({4, d}, rng, emb);
  w.position_embedding = normal_init({kSlots, d}, rng, emb);
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    layer.norm1 = make_norm(d);
    layer.norm2 = make_norm(d);
    layer.qkv = make_linear(d, 3 * d, rng);
    layer.proj = make_linear(d, d, rng);
    layer.mlp = make_mlp(d, config.mlp_ratio * d, d, rng);
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = make_norm(d);
  w.mano_decoder = make_mlp(d + (config.decoder_reads_coarse ? kManoRow : 0), config.mano_hidden, kManoRow, rng, true);
  return w;
}

std::vector<NamedTensor> PipelineWeights::parameters() const {
  std::vector<NamedTensor> p;
  add_params(p, "mano_encoder", mano_encoder);
  p.push_back({"hand_identity", hand_identity});
  p.push_back({"absent_token", absent_token});
  add_params(p, "feature_projection", feature_projection);
  p.push_back({"image_position", image_position});
  add_params(p, "text_projection", text_projection);
  add_params(p, "fusion.norm", fusion.norm);
  p.push_back({"fusion.wq", fusion.wq});
  p.push_back({"fusion.wk", fusion.wk});
  p.push_back({"fusion.wv", fusion.wv});
  p.push_back({"fusion.wo", fusion.wo});
  p.push_back({"mask_token", mask_token});
  p.push_back({"role_embedding", role_embedding});
  p.push_back({"position_embedding", position_embedding});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string n = "layers." + std::to_string(l);
    add_params(p, n + ".norm1", layers[l].norm1);
    add_params(p, n + ".norm2", layers[l].norm2);
    add_params(p, n + ".qkv", layers[l].qkv);
    add_params(p, n + ".proj", layers[l].proj);
    add_params(p, n + ".mlp", layers[l].mlp);
  }
  add_params(p, "final_norm", final_norm);
  add_params(p, "mano_decoder", mano_decoder);
  return p;
}

std::size_t PipelineWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

PipelineWeights PipelineWeights::clone() const {
  PipelineWeights copy = init(config, 0);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor target = dst[i].tensor;
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), target.mutable_data().begin());
  }
  return copy;
}

const char* role_name(TokenRole r) {
  switch (r) {
    case TokenRole::template_input: return "template_input";
    case TokenRole::template_target: return "template_target";
    case TokenRole::query_input: return "query_input";
    case TokenRole::query_target: return "query_target";
  }
  return "?";
}

bool is_target(TokenRole r) { return r == TokenRole::template_target || r == TokenRole::query_target; }

std::size_t TokenBundle::target_tokens() const {
  return set(TokenRole::template_target).mask.size() + set(TokenRole::query_target).mask.size();
}

std::size_t TokenBundle::masked_targets() const {
  std::size_t n = 0;
  for (auto r : {TokenRole::template_target, TokenRole::query_target}) {
    n += static_cast<std::size_t>(std::count(set(r).mask.begin(), set(r).mask.end(), true));
  }
  return n;
}

std::vector<double> encoder_row(const HandParams& p, double theta_scale) {
  auto v = p.to_vector();
  for (std::size_t i = 0; i < kThetaSize; ++i) v[i] *= theta_scale;
  return v;
}

std::vector<double> mano_row(const HandParams& p) {
  auto v = p.to_vector();
  v.resize(kManoRow);
  return v;
}

Tensor encode_mano(const PipelineWeights& w, const Tensor& rows) {
  if (rows.rank() != 2 || rows.dim(1) != kParamVectorSize) {
    throw ShapeError("encode_mano: expected [H, " + std::to_string(kParamVectorSize) + "] rows, got " +
                     shape_str(rows.shape()));
  }
  return w.mano_encoder(rows);
}

Tensor image_tokens(const PipelineWeights& w, const Tensor& features) {
  const auto& c = w.config;
  if (features.rank() != 2 || features.dim(1) != c.image_feature_dim) {
    throw ShapeError("image features: expected [G, " + std::to_string(c.image_feature_dim) + "], got " +
                     shape_str(features.shape()));
  }
  const Tensor chunks = reshape(features, {features.dim(0), c.image_tokens, c.image_feature_dim / c.image_tokens});
  return add(w.feature_projection(chunks), w.image_position);
}

Tensor text_tokens(const PipelineWeights& w, const Tensor& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != w.config.text_dim) {
    throw ShapeError("text embeddings: expected [G, " + std::to_string(w.config.text_dim) + "], got " +
                     shape_str(embeddings.shape()));
  }
  const Tensor t = w.text_projection(embeddings);
  return reshape(t, {t.dim(0), 1, t.dim(1)});
}

FusionResult fuse(const Tensor& structural, const Tensor& image, const Tensor& text, const PipelineWeights& w) {
  const std::size_t d = w.config.d_model;
  const auto check = [&](const Tensor& t, const char* modality) {
    if (t.rank() != 3 || t.dim(2) != d) {
      throw ShapeError(std::string("fuse: ") + modality + " tokens have shape " + shape_str(t.shape()) +
                       ", expected [G, n, " + std::to_string(d) + "]");
    }
    if (t.dim(0) != structural.dim(0)) {
      throw ShapeError(std::string("fuse: ") + modality + " tokens cover " + std::to_string(t.dim(0)) +
                       " groups, structural tokens " + std::to_string(structural.dim(0)));
    }
  };
  if (structural.rank() != 3) throw ShapeError("fuse: structural tokens must be [G, n, d], got " + shape_str(structural.shape()));
  check(structural, "structural");
  check(image, "image");
  check(text, "text");
  const Tensor context = concat({image, text}, 1);
  const Tensor q = matmul(w.fusion.norm(structural), w.fusion.wq);
  const Tensor k = matmul(context, w.fusion.wk);
  const Tensor v = matmul(context, w.fusion.wv);
  const Tensor attn = softmax(scale(matmul_bt(q, k), 1.0 / std::sqrt(double(d))));
  return {add(structural, matmul(matmul(attn, v), w.fusion.wo)), attn};
}

std::vector<TokenBundle> build_bundles(std::span<const TemplateRecord* const> templates,
                                       std::span<const QueryInput> queries, const PipelineWeights& w,
                                       BundleMode mode) {
  if (templates.size() != queries.size()) throw ShapeError("build_bundles: templates and queries differ in count");
  const std::size_t B = queries.size();
  if (B == 0) return {};
  const auto& c = w.config;
  const bool inference = mode == BundleMode::inference;

  std::vector<TokenBundle> bundles(B);
  // Encoder rows for every present hand; positions index into them, with
  // `absent` pointing at the padding token appended after.
  std::vector<double> rows;
  std::vector<std::size_t> source(B * 8);
  std::vector<std::size_t> slots(B * 8);
  std::size_t n_rows = 0;
  std::vector<std::size_t> pending;
  const auto push = [&](const std::optional<HandParams>& p, std::size_t pos) {
    slots[pos] = pos % kSlots;
    if (!p) {
      pending.push_back(pos);
      return;
    }
    const auto r = encoder_row(*p, w.config.theta_input_scale);
    rows.insert(rows.end(), r.begin(), r.end());
    source[pos] = n_rows++;
  };

  std::vector<double> image_data, text_data;
  for (std::size_t b = 0; b < B; ++b) {
    const TemplateRecord& t = *templates[b];
    const QueryInput& q = queries[b];
    if (!t.usable()) throw DataError("build_bundle: template '" + t.id + "' is not a validated exemplar");
    TokenBundle& bundle = bundles[b];
    bundle.template_id = t.id;
    bundle.query_id = q.id;
    bundle.inference = inference;
    for (std::size_t s = 0; s < kSlots; ++s) {
      if (t.coarse[s].has_value() != t.gt[s].has_value()) {
        throw DataError("template '" + t.id + "': coarse and gt hands disagree in slot " + std::to_string(s));
      }
      bundle.template_coarse[s] = t.coarse[s];
      bundle.template_gt[s] = t.gt[s];
      bundle.query_coarse[s] = q.coarse[s];
      if (!inference) {
        if (q.coarse[s] && !q.gt[s]) {
          throw DataError("query '" + q.id + "': training bundle needs gt for the " + side_name(slot_side(s)) + " hand");
        }
        bundle.query_gt[s] = q.coarse[s] ? q.gt[s] : std::nullopt;
      }
    }
    const std::size_t base = b * 8;
    for (std::size_t s = 0; s < kSlots; ++s) push(t.coarse[s], base + 0 + s);
    for (std::size_t s = 0; s < kSlots; ++s) push(t.gt[s], base + 2 + s);
    for (std::size_t s = 0; s < kSlots; ++s) push(q.coarse[s], base + 4 + s);
    for (std::size_t s = 0; s < kSlots; ++s) push(inference ? std::nullopt : bundle.query_gt[s], base + 6 + s);

    for (const auto* f : {&t.image_features, &q.image_features}) {
      if (f->size() != c.image_feature_dim) {
        throw ShapeError("build_bundle: image features of width " + std::to_string(f->size()) + ", expected " +
                         std::to_string(c.image_feature_dim));
      }
      image_data.insert(image_data.end(), f->begin(), f->end());
    }
    for (const auto* e : {&t.text_embedding, &q.text_embedding}) {
      if (e->size() != c.text_dim) {
        throw ShapeError("build_bundle: text embedding of width " + std::to_string(e->size()) + ", expected " +
                         std::to_string(c.text_dim));
      }
      text_data.insert(text_data.end(), e->begin(), e->end());
    }
  }
  for (auto pos : pending) source[pos] = n_rows;

  Tensor table = reshape(w.absent_token, {1, c.d_model});
  if (n_rows > 0) table = concat({encode_mano(w, constant({n_rows, kParamVectorSize}, rows)), table}, 0);
  Tensor structural = add(take(table, 0, source), take(w.hand_identity, 0, slots));
  structural = reshape(structural, {2 * B, 4, c.d_model});

  const Tensor img = image_tokens(w, constant({2 * B, c.image_feature_dim}, image_data));
  const Tensor txt = text_tokens(w, constant({2 * B, c.text_dim}, text_data));
  const FusionResult fused = fuse(structural, img, txt, w);
  const std::size_t n_ctx = fused.attention.dim(2);
  const auto attn = fused.attention.data();
  const Tensor flat = reshape(fused.tokens, {B * 8, c.d_model});

  for (std::size_t b = 0; b < B; ++b) {
    TokenBundle& bundle = bundles[b];
    for (std::size_t r = 0; r < 4; ++r) {
      TokenSet& set = bundle.sets[r];
      set.role = kRoles[r];
      const std::size_t begin = b * 8 + r * kSlots;
      set.tokens = slice(flat, 0, begin, begin + kSlots);
      set.context_tokens = n_ctx;
      set.fusion_attention.assign(attn.begin() + begin * n_ctx, attn.begin() + (begin + kSlots) * n_ctx);
      set.mask.assign(kSlots, false);
      set.present.resize(kSlots);
      for (std::size_t s = 0; s < kSlots; ++s) {
        switch (set.role) {
          case TokenRole::template_input: set.present[s] = bundle.template_coarse[s].has_value(); break;
          case TokenRole::template_target: set.present[s] = bundle.template_gt[s].has_value(); break;
          case TokenRole::query_input:
          case TokenRole::query_target: set.present[s] = bundle.query_coarse[s].has_value(); break;
        }
      }
    }
    if (inference) bundle.set(TokenRole::query_target).mask.assign(kSlots, true);
  }
  return bundles;
}

TokenBundle build_bundle(const TemplateRecord& tpl, const QueryInput& query, const PipelineWeights& w,
                         BundleMode mode) {
  const TemplateRecord* t = &tpl;
  return std::move(build_bundles({&t, 1}, {&query, 1}, w, mode).front());
}

void apply_mask(TokenBundle& bundle, double ratio, RandomStream& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1], got " + std::to_string(ratio));
  if (bundle.inference) throw Error("apply_mask: inference bundles are masked at construction");
  auto& tpl = bundle.set(TokenRole::template_target).mask;
  auto& qry = bundle.set(TokenRole::query_target).mask;
  const std::size_t n = tpl.size() + qry.size();
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::fill(tpl.begin(), tpl.end(), false);
  std::fill(qry.begin(), qry.end(), false);
  const auto order = rng.permutation(n);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = order[i];
    if (j < tpl.size()) tpl[j] = true;
    else qry[j - tpl.size()] = true;
  }
}

namespace {

struct Layout {
  std::size_t tokens = 0;
  std::vector<std::size_t> role_of, slot_of, targets;  // per token position
};

Layout layout_of(const TokenBundle& b) {
  Layout l;
  for (std::size_t r = 0; r < 4; ++r) {
    const auto& set = b.sets[r];
    if (set.role != kRoles[r]) throw Error("refine: token sets out of canonical order");
    for (std::size_t s = 0; s < set.mask.size(); ++s) {
      if (is_target(set.role)) l.targets.push_back(l.tokens);
      l.role_of.push_back(r);
      l.slot_of.push_back(s);
      ++l.tokens;
    }
  }
  return l;
}

}  // namespace

RefineOutput refine(std::span<const TokenBundle> bundles, const PipelineWeights& w, const RefineOptions& options) {
  RefineOutput out;
  out.batch = bundles.size();
  if (bundles.empty()) return out;
  const auto& c = w.config;
  const std::size_t d = c.d_model, B = bundles.size(), H = c.heads, dh = d / H;
  const Layout layout = layout_of(bundles[0]);
  const std::size_t T = layout.tokens;
  if (layout.targets.size() != 2 * kSlots || T != 4 * kSlots) throw Error("refine: bundles must hold one token per hand slot");

  std::vector<Tensor> parts;
  std::vector<std::size_t> pick(B * T);
  std::vector<double> base(B * 2 * kSlots * kManoRow, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const TokenBundle& bundle = bundles[b];
    if (layout_of(bundle).tokens != T) throw Error("refine: bundles have different layouts");
    for (std::size_t r = 0; r < 4; ++r) {
      const auto& set = bundle.sets[r];
      if (set.tokens.rank() != 2 || set.tokens.dim(1) != d || set.tokens.dim(0) != set.mask.size()) {
        throw ShapeError("refine: token set " + std::string(role_name(set.role)) + " has shape " +
                         shape_str(set.tokens.shape()));
      }
      if (!is_target(set.role) && std::any_of(set.mask.begin(), set.mask.end(), [](bool m) { return m; })) {
        throw Error("refine: input token sets must not be masked");
      }
      parts.push_back(set.tokens);
    }
    for (std::size_t t = 0; t < T; ++t) {
      const auto& set = bundle.sets[layout.role_of[t]];
      pick[b * T + t] = set.mask[layout.slot_of[t]] ? B * T : b * T + t;
    }
    for (std::size_t j = 0; j < 2 * kSlots; ++j) {
      const auto& src = j < kSlots ? bundle.template_coarse[j] : bundle.query_coarse[j - kSlots];
      if (src) {
        const auto row = mano_row(*src);
        std::copy(row.begin(), row.end(), base.begin() + (b * 2 * kSlots + j) * kManoRow);
      }
    }
  }
  parts.push_back(reshape(w.mask_token, {1, d}));
  Tensor x = take(concat(parts, 0), 0, pick);
  x = reshape(x, {B, T, d});
  x = add(x, take(w.role_embedding, 0, layout.role_of));
  x = add(x, take(w.position_embedding, 0, layout.slot_of));

  out.attention_retained = options.retain_attention;
  for (const auto& layer : w.layers) {
    const Tensor qkv = permute(reshape(layer.qkv(layer.norm1(x)), {B, T, 3, H, dh}), {2, 0, 3, 1, 4});
    const auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {B, H, T, dh}); };
    const Tensor attn = softmax(scale(matmul_bt(part(0), part(1)), 1.0 / std::sqrt(double(dh))));
    if (options.retain_attention) out.attention.emplace_back(attn.data().begin(), attn.data().end());
    const Tensor mixed = reshape(permute(matmul(attn, part(2)), {0, 2, 1, 3}), {B, T, d});
    x = add(x, layer.proj(mixed));
    x = add(x, layer.mlp(layer.norm2(x)));
  }
  x = w.final_norm(reshape(x, {B * T, d}));
  std::vector<std::size_t> target_rows;
  for (std::size_t b = 0; b < B; ++b) {
    for (auto t : layout.targets) target_rows.push_back(b * T + t);
  }
  Tensor dec_in = take(x, 0, target_rows);
  if (w.config.decoder_reads_coarse) {
    std::vector<double> scaled = base;
    for (std::size_t r = 0; r < scaled.size() / kManoRow; ++r)
      for (std::size_t i = 0; i < kThetaSize; ++i) scaled[r * kManoRow + i] *= w.config.theta_input_scale;
    dec_in = concat({dec_in, constant({B * 2 * kSlots, kManoRow}, scaled)}, 1);
  }
  const Tensor delta = scale(w.mano_decoder(dec_in), w.config.decoder_gain);
  out.decoded = reshape(add(delta, constant({B * 2 * kSlots, kManoRow}, base)), {B, 2 * kSlots, kManoRow});

  const auto values = out.decoded.data();
  out.query.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < kSlots; ++s) {
      if (!bundles[b].query_coarse[s]) continue;
      const std::size_t row = b * 2 * kSlots + kSlots + s;
      out.query[b][s] = HandParams::from_vector(values.subspan(row * kManoRow, kManoRow), slot_side(s));
    }
  }
  return out;
}

std::array<std::optional<HandParams>, kSlots> refine_one(const TokenBundle& bundle, const PipelineWeights& w) {
  return refine({&bundle, 1}, w).query[0];
}

PhiEncoder PhiEncoder::create(const IclConfig& c) {
  RandomStream rng(mix_seed(c.phi_seed));
  PhiEncoder phi;
  const auto frozen = [&](std::size_t in, std::size_t out) {
    Linear l;
    l.w = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(double(in)));
    l.b = Tensor::randn({out}, rng, 0.1);
    return l;
  };
  phi.point1 = frozen(3, c.phi_hidden);
  phi.point2 = frozen(c.phi_hidden, c.phi_hidden);
  phi.head = frozen(c.phi_hidden, c.phi_dim);
  phi.input_scale = c.phi_input_scale;
  return phi;
}

Tensor PhiEncoder::operator()(const Tensor& points) const {
  if (points.rank() != 3 || points.dim(2) != 3 || points.dim(1) == 0) {
    throw ShapeError("phi: expected [H, N>=1, 3] points, got " + shape_str(points.shape()));
  }
  const std::size_t n = points.dim(1);
  const Tensor avg = matmul(Tensor::full({1, n}, 1.0 / double(n)), points);  // [H, 1, 3]
  const Tensor centered = scale(sub(points, take(avg, 1, std::vector<std::size_t>(n, 0))), input_scale);
  const Tensor hidden = map_elementwise(
      point1(centered), [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; },
      "phi_relu");
  const Tensor per_point = point2(hidden);
  return head(gelu(max_over_rows(per_point)));
}

std::vector<NamedTensor> PhiEncoder::parameters() const {
  std::vector<NamedTensor> p;
  add_params(p, "phi.point1", point1);
  add_params(p, "phi.point2", point2);
  add_params(p, "phi.head", head);
  return p;
}

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* name) {
  if (a.shape() != b.shape() || a.rank() == 0) {
    throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor loss_mano(const Tensor& pred, const Tensor& gt) {
  check_same(pred, gt, "loss_mano");
  return scale(squared_norm(sub(pred, gt)), 1.0 / double(pred.dim(0)));
}

Tensor loss_vertices(const Tensor& pred, const Tensor& gt) {
  check_same(pred, gt, "loss_vertices");
  return mean(abs(sub(pred, gt)));
}

Tensor loss_joints(const Tensor& pred, const Tensor& gt) {
  check_same(pred, gt, "loss_joints");
  return mean(abs(sub(pred, gt)));
}

Tensor loss_3d(const Tensor& pred_points, const Tensor& gt_points, const PhiEncoder& phi) {
  check_same(pred_points, gt_points, "loss_3d");
  return scale(squared_norm(sub(phi(pred_points), phi(gt_points))), 1.0 / double(pred_points.dim(0)));
}

const char* dataset_mode_name(DatasetMode m) { return m == DatasetMode::mano_supervised ? "mano" : "joints"; }

DatasetMode dataset_mode_from_string(std::string_view s) {
  if (s == "mano") return DatasetMode::mano_supervised;
  if (s == "joints") return DatasetMode::joints_only;
  throw ConfigError("dataset mode must be 'mano' or 'joints', got '" + std::string(s) + "'");
}

LossBreakdown total_loss(const LossTerms& terms, DatasetMode mode, const LossWeights& weights) {
  LossBreakdown out;
  out.weights = weights;
  out.mode = mode;
  const auto value = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
  out.l_mano = value(terms.l_mano);
  out.l_v = value(terms.l_v);
  out.l_j = value(terms.l_j);
  out.l_3d = value(terms.l_3d);
  std::vector<std::pair<double, const Tensor*>> active;
  if (mode == DatasetMode::mano_supervised) {
    active = {{weights.mano, &terms.l_mano}, {weights.vertices, &terms.l_v}, {weights.perceptual, &terms.l_3d}};
  } else {
    active = {{weights.joints, &terms.l_j}, {weights.perceptual, &terms.l_3d}};
  }
  for (const auto& [lambda, t] : active) {
    if (!t->defined()) continue;
    if (t->numel() != 1) throw ShapeError("total_loss: loss terms must be scalars, got " + shape_str(t->shape()));
    const Tensor weighted = scale(*t, lambda);
    out.total_tensor = out.total_tensor.defined() ? add(out.total_tensor, weighted) : weighted;
  }
  out.total = out.total_tensor.defined() ? out.total_tensor.item() : 0.0;
  return out;
}

LossBreakdown pipeline_loss(const RefineOutput& out, std::span<const TokenBundle> bundles, const HandRig& rig,
                            const PhiEncoder& phi, const LossOptions& options) {
  if (bundles.size() != out.batch) throw ShapeError("pipeline_loss: refine output and bundles differ in batch size");
  std::vector<std::size_t> rows;
  std::vector<double> gt_rows;
  std::vector<HandParams> gt_hands;
  std::vector<Side> sides;
  for (std::size_t b = 0; b < bundles.size(); ++b) {
    const TokenBundle& bundle = bundles[b];
    for (std::size_t j = 0; j < 2 * kSlots; ++j) {
      const bool query = j >= kSlots;
      if (!query && !options.template_targets) continue;
      const std::size_t s = j % kSlots;
      const auto& set = bundle.set(query ? TokenRole::query_target : TokenRole::template_target);
      const auto& gt = query ? bundle.query_gt[s] : bundle.template_gt[s];
      if (!set.mask[s] || !set.present[s] || !gt) continue;
      rows.push_back(b * 2 * kSlots + j);
      const auto r = mano_row(*gt);
      gt_rows.insert(gt_rows.end(), r.begin(), r.end());
      gt_hands.push_back(*gt);
      sides.push_back(slot_side(s));
    }
  }
  LossTerms terms;
  if (!rows.empty()) {
    const std::size_t h = rows.size();
    const Tensor pred = take(reshape(out.decoded, {out.batch * 2 * kSlots, kManoRow}), 0, rows);
    const HandBatch pg = forward_batch(rig, slice(pred, 1, 0, kThetaSize),
                                       slice(pred, 1, kThetaSize, kThetaSize + kBetaSize),
                                       slice(pred, 1, kThetaSize + kBetaSize, kManoRow), sides);
    const ParamTensors packed = pack_params(gt_hands);
    const HandBatch gg = forward_batch(rig, packed.theta, packed.beta, packed.phi, sides);
    if (options.mode == DatasetMode::mano_supervised) {
      terms.l_mano = loss_mano(pred, constant({h, kManoRow}, gt_rows));
      terms.l_v = loss_vertices(pg.vertices, gg.vertices);
    } else {
      terms.l_j = loss_joints(pg.joints, gg.joints);
    }
    terms.l_3d = options.perceptual_on_joints ? loss_3d(pg.joints, gg.joints, phi)
                                              : loss_3d(pg.vertices, gg.vertices, phi);
  }
  LossBreakdown loss = total_loss(terms, options.mode, options.weights);
  loss.supervised_hands = rows.size();
  return loss;
}

nlohmann::json AttentionExport::to_json() const {
  nlohmann::json roles_json = nlohmann::json::array();
  for (auto r : roles) roles_json.push_back(role_name(r));
  nlohmann::json m = nlohmann::json::array();
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < tokens; ++r) {
      rows.push_back(std::vector<double>(matrices[i].begin() + r * tokens, matrices[i].begin() + (r + 1) * tokens));
    }
    m.push_back({{"layer", i / heads}, {"head", i % heads}, {"weights", rows}});
  }
  return {{"layers", layers}, {"heads", heads}, {"tokens", tokens}, {"labels", labels}, {"roles", roles_json},
          {"matrices", m}};
}

AttentionExport export_attention(const RefineOutput& out, std::size_t index) {
  if (!out.attention_retained) throw Error("export_attention: forward pass ran without attention retention");
  if (index >= out.batch) throw Error("export_attention: bundle index out of range");
  AttentionExport e;
  e.layers = out.attention.size();
  e.tokens = 4 * kSlots;
  const std::size_t per_bundle = out.attention.empty() ? 0 : out.attention[0].size() / out.batch;
  e.heads = per_bundle / (e.tokens * e.tokens);
  for (auto r : kRoles) {
    for (std::size_t s = 0; s < kSlots; ++s) {
      e.labels.push_back(std::string(role_name(r)) + "/" + side_name(slot_side(s)));
      e.roles.push_back(r);
    }
  }
  for (const auto& layer : out.attention) {
    for (std::size_t h = 0; h < e.heads; ++h) {
      const auto begin = layer.begin() + index * per_bundle + h * e.tokens * e.tokens;
      e.matrices.emplace_back(begin, begin + e.tokens * e.tokens);
    }
  }
  return e;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto params = ckpt.weights.parameters();
  std::vector<BlobArray> arrays;
  std::size_t count = 0;
  for (const auto& p : params) {
    arrays.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
    count += p.tensor.numel();
  }
  nlohmann::json manifest{
      {"format", "ehicl-checkpoint"},
      {"model", ckpt.weights.config.to_json()},
      {"rig_seed", ckpt.rig_seed},
      {"lambda", {{"mano", ckpt.lambdas.mano}, {"vertices", ckpt.lambdas.vertices}, {"joints", ckpt.lambdas.joints},
                  {"perceptual", ckpt.lambdas.perceptual}}},
      {"step", ckpt.step},
      {"parameter_count", count},
      {"run_config", ckpt.run_config}};
  write_blob_file(path, kCheckpointMagic, manifest, arrays);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const BlobFile blob = read_blob_file(path, kCheckpointMagic);
  Checkpoint ckpt;
  try {
    const auto& m = blob.manifest;
    ckpt.weights = PipelineWeights::init(IclConfig::from_json(m.at("model")), 0);
    ckpt.rig_seed = m.at("rig_seed");
    ckpt.lambdas = {m.at("lambda").at("mano"), m.at("lambda").at("vertices"), m.at("lambda").at("joints"),
                    m.at("lambda").at("perceptual")};
    ckpt.step = m.at("step");
    ckpt.run_config = m.value("run_config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError(path.string() + ": " + e.what());
  }
  const auto params = ckpt.weights.parameters();
  if (blob.arrays.size() != params.size()) {
    throw ManifestMismatchError(path.string() + ": " + std::to_string(blob.arrays.size()) + " arrays for " +
                                std::to_string(params.size()) + " parameters");
  }
  for (const auto& p : params) {
    const auto& a = blob.get(p.name, p.tensor.shape());
    Tensor target = p.tensor;
    std::copy(a.data.begin(), a.data.end(), target.mutable_data().begin());
  }
  return ckpt;
}

}  // namespace ehicl

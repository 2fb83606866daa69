// SPDX-License-Identifier: Apache-2.0
#include "ehicl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "ehicl/blob_io.hpp"
#include "ehicl/error.hpp"

namespace ehicl {

namespace {

// Stream keys, mixed with the run seed.
constexpr std::uint64_t kCorpusKey = 0x636f72707573ull;
constexpr std::uint64_t kFeatureMapKey = 0x666d6170ull;
constexpr std::uint64_t kVlmKey = 0x766c6dull;
constexpr std::uint64_t kWeightsKey = 0x77656967ull;
constexpr std::uint64_t kShuffleKey = 0x73687566ull;
constexpr std::uint64_t kMaskKey = 0x6d61736bull;
constexpr std::uint64_t kVisualKey = 0x76697375ull;
constexpr std::uint64_t kResampleKey = 0x72736d70ull;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t key, std::uint64_t a = 0, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(seed ^ mix_seed(key)) + a) + b);
}

constexpr std::array<const char*, 12> kObjects = {"cup",    "box",   "bottle", "phone",  "knife", "bowl",
                                                  "laptop", "scissors", "ketchup", "mixer", "notebook", "waffle iron"};
constexpr std::array<const char*, 8> kVerbs = {"grasping", "holding", "lifting", "rotating",
                                               "opening",  "pressing", "pouring", "sliding"};
constexpr std::array<const char*, 6> kPoses = {"curled fingers",  "an open palm",      "a pinch grip",
                                               "extended fingers", "a firm power grip", "a relaxed hand"};

Side slot_side(std::size_t slot) { return slot == kLeftSlot ? Side::left : Side::right; }

std::size_t worker_count(std::size_t threads) {
  if (threads) return threads;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  int base = 10;
  if (v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X')) {
    v.remove_prefix(2);
    base = 16;
  }
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out, base);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a non-negative integer, got '" + std::string(v) +
                      "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + std::string(key) + "' expects true or false, got '" + std::string(v) + "'");
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
Field uint_field(const char* key, T RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member, key](RunConfig& c, std::string_view v) { c.*member = static_cast<T>(parse_uint(key, v)); }};
}

Field double_field(const char* key, double& (*ref)(RunConfig&)) {
  return {key, [ref](const RunConfig& c) { return format_shortest(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, std::string_view v) { ref(c) = parse_double(key, v); }};
}

Field size_field(const char* key, std::size_t& (*ref)(RunConfig&)) {
  return {key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, std::string_view v) { ref(c) = parse_uint(key, v); }};
}

Field bool_field(const char* key, bool RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member, key](RunConfig& c, std::string_view v) { c.*member = parse_bool(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(uint_field("seed", &RunConfig::seed));
    v.push_back(uint_field("train_size", &RunConfig::train_size));
    v.push_back(uint_field("val_size", &RunConfig::val_size));
    v.push_back(uint_field("test_size", &RunConfig::test_size));
    v.push_back({"proportions",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.proportions.size(); ++i) {
                     if (i) s += ",";
                     s += format_shortest(c.proportions[i]);
                   }
                   return s;
                 },
                 [](RunConfig& c, std::string_view v) {
                   std::size_t i = 0;
                   while (true) {
                     const auto comma = v.find(',');
                     if (i >= c.proportions.size()) throw ConfigError("config: 'proportions' expects 4 values");
                     c.proportions[i++] = parse_double("proportions", trim(v.substr(0, comma)));
                     if (comma == std::string_view::npos) break;
                     v.remove_prefix(comma + 1);
                   }
                   if (i != c.proportions.size()) throw ConfigError("config: 'proportions' expects 4 values");
                 }});
    v.push_back(double_field("noise.pose_sigma", [](RunConfig& c) -> double& { return c.noise.pose_sigma; }));
    v.push_back(double_field("noise.shape_sigma", [](RunConfig& c) -> double& { return c.noise.shape_sigma; }));
    v.push_back(
        double_field("noise.two_hand_factor", [](RunConfig& c) -> double& { return c.noise.two_hand_factor; }));
    v.push_back(double_field("noise.feature_sigma", [](RunConfig& c) -> double& { return c.noise.feature_sigma; }));
    v.push_back(double_field("noise.p_swap", [](RunConfig& c) -> double& { return c.noise.p_swap; }));
    v.push_back(double_field("noise.p_miss", [](RunConfig& c) -> double& { return c.noise.p_miss; }));
    v.push_back(double_field("mask_ratio", [](RunConfig& c) -> double& { return c.mask_ratio; }));
    v.push_back({"mask_schedule", [](const RunConfig& c) { return std::string(mask_schedule_name(c.mask_schedule)); },
                 [](RunConfig& c, std::string_view s) { c.mask_schedule = mask_schedule_from_string(s); }});
    v.push_back(bool_field("resample_coarse", &RunConfig::resample_coarse));
    v.push_back(uint_field("epochs", &RunConfig::epochs));
    v.push_back(double_field("learning_rate", [](RunConfig& c) -> double& { return c.learning_rate; }));
    v.push_back(double_field("weight_decay", [](RunConfig& c) -> double& { return c.weight_decay; }));
    v.push_back(uint_field("batch_size", &RunConfig::batch_size));
    v.push_back(double_field("lambda.mano", [](RunConfig& c) -> double& { return c.lambdas.mano; }));
    v.push_back(double_field("lambda.vertices", [](RunConfig& c) -> double& { return c.lambdas.vertices; }));
    v.push_back(double_field("lambda.joints", [](RunConfig& c) -> double& { return c.lambdas.joints; }));
    v.push_back(double_field("lambda.perceptual", [](RunConfig& c) -> double& { return c.lambdas.perceptual; }));
    v.push_back(size_field("model.d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; }));
    v.push_back(size_field("model.layers", [](RunConfig& c) -> std::size_t& { return c.model.layers; }));
    v.push_back(size_field("model.heads", [](RunConfig& c) -> std::size_t& { return c.model.heads; }));
    v.push_back(size_field("model.mlp_ratio", [](RunConfig& c) -> std::size_t& { return c.model.mlp_ratio; }));
    v.push_back(size_field("model.mano_hidden", [](RunConfig& c) -> std::size_t& { return c.model.mano_hidden; }));
    v.push_back(size_field("model.image_feature_dim",
                           [](RunConfig& c) -> std::size_t& { return c.model.image_feature_dim; }));
    v.push_back(size_field("model.image_tokens", [](RunConfig& c) -> std::size_t& { return c.model.image_tokens; }));
    v.push_back(size_field("model.text_dim", [](RunConfig& c) -> std::size_t& { return c.model.text_dim; }));
    v.push_back(size_field("model.phi_hidden", [](RunConfig& c) -> std::size_t& { return c.model.phi_hidden; }));
    v.push_back(size_field("model.phi_dim", [](RunConfig& c) -> std::size_t& { return c.model.phi_dim; }));
    v.push_back({"model.phi_seed", [](const RunConfig& c) { return std::to_string(c.model.phi_seed); },
                 [](RunConfig& c, std::string_view s) { c.model.phi_seed = parse_uint("model.phi_seed", s); }});
    v.push_back(
        double_field("model.phi_input_scale", [](RunConfig& c) -> double& { return c.model.phi_input_scale; }));
    v.push_back(
        double_field("model.theta_input_scale", [](RunConfig& c) -> double& { return c.model.theta_input_scale; }));
    v.push_back({"model.decoder_reads_coarse",
                 [](const RunConfig& c) { return std::string(c.model.decoder_reads_coarse ? "true" : "false"); },
                 [](RunConfig& c, std::string_view s) {
                   c.model.decoder_reads_coarse = parse_bool("model.decoder_reads_coarse", s);
                 }});
    v.push_back(double_field("model.decoder_gain", [](RunConfig& c) -> double& { return c.model.decoder_gain; }));
    v.push_back({"strategy", [](const RunConfig& c) { return std::string(strategy_name(c.strategy)); },
                 [](RunConfig& c, std::string_view s) { c.strategy = strategy_from_string(s); }});
    v.push_back({"prompt_style", [](const RunConfig& c) { return std::string(prompt_style_name(c.prompt_style)); },
                 [](RunConfig& c, std::string_view s) { c.prompt_style = prompt_style_from_string(s); }});
    v.push_back({"dataset_mode", [](const RunConfig& c) { return std::string(dataset_mode_name(c.dataset_mode)); },
                 [](RunConfig& c, std::string_view s) { c.dataset_mode = dataset_mode_from_string(s); }});
    v.push_back(bool_field("template_targets", &RunConfig::template_targets));
    v.push_back(bool_field("perceptual_on_joints", &RunConfig::perceptual_on_joints));
    v.push_back(double_field("vlm_flip_probability", [](RunConfig& c) -> double& { return c.vlm_flip_probability; }));
    v.push_back({"validation_runs", [](const RunConfig& c) { return std::to_string(c.validation_runs); },
                 [](RunConfig& c, std::string_view s) {
                   c.validation_runs = static_cast<int>(parse_uint("validation_runs", s));
                 }});
    v.push_back(uint_field("rig_seed", &RunConfig::rig_seed));
    v.push_back(uint_field("eval_batch", &RunConfig::eval_batch));
    v.push_back(uint_field("threads", &RunConfig::threads));
    return v;
  }();
  return f;
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("config: ") + name + " must lie in [0, 1]");
}

void check_nonnegative(double x, const char* name) {
  if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError(std::string("config: ") + name + " must be >= 0");
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "' (train, val, test)");
}

const char* mask_schedule_name(MaskSchedule m) { return m == MaskSchedule::per_epoch ? "per_epoch" : "fixed"; }

MaskSchedule mask_schedule_from_string(std::string_view s) {
  if (s == "per_epoch") return MaskSchedule::per_epoch;
  if (s == "fixed") return MaskSchedule::fixed;
  throw ConfigError("unknown mask schedule '" + std::string(s) + "' (per_epoch, fixed)");
}

std::string format_fixed(double value, int precision) {
  if (!std::isfinite(value)) return std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf");
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed, precision);
  return std::string(buf, r.ptr);
}

std::string format_shortest(double value) {
  if (!std::isfinite(value)) return std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf");
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, r.ptr);
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::desk() {
  RunConfig c;
  c.epochs = 30;
  c.batch_size = 16;
  c.noise.pose_sigma = 0.15;
  return c;
}

void RunConfig::validate() const {
  if (train_size + val_size + test_size == 0) throw ConfigError("config: corpus size must be >= 1");
  double total = 0;
  for (double p : proportions) {
    check_nonnegative(p, "proportions");
    total += p;
  }
  if (total <= 0) throw ConfigError("config: proportions must not all be zero");
  check_nonnegative(noise.pose_sigma, "noise.pose_sigma");
  check_nonnegative(noise.shape_sigma, "noise.shape_sigma");
  check_nonnegative(noise.two_hand_factor, "noise.two_hand_factor");
  check_nonnegative(noise.feature_sigma, "noise.feature_sigma");
  check_probability(noise.p_swap, "noise.p_swap");
  check_probability(noise.p_miss, "noise.p_miss");
  check_probability(mask_ratio, "mask_ratio");
  check_probability(vlm_flip_probability, "vlm_flip_probability");
  check_nonnegative(learning_rate, "learning_rate");
  check_nonnegative(weight_decay, "weight_decay");
  check_nonnegative(lambdas.mano, "lambda.mano");
  check_nonnegative(lambdas.vertices, "lambda.vertices");
  check_nonnegative(lambdas.joints, "lambda.joints");
  check_nonnegative(lambdas.perceptual, "lambda.perceptual");
  if (batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
  if (eval_batch == 0) throw ConfigError("config: eval_batch must be >= 1");
  if (validation_runs < 1) throw ConfigError("config: validation_runs must be >= 1");
  if (model.text_dim != kTextEmbeddingDim) {
    throw ConfigError("config: model.text_dim must equal the text embedding width " +
                      std::to_string(kTextEmbeddingDim));
  }
  model.validate();
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

RunConfig RunConfig::from_text(std::string_view text) { return from_text(text, RunConfig{}); }

RunConfig RunConfig::from_text(std::string_view text, RunConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return load(path, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), std::move(base));
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << to_text();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

// ---------------------------------------------------------------------------
// Corpus

std::string SyntheticSample::image_ref() const { return id; }

ImageMetadata SyntheticSample::metadata() const { return {involvement, object, verb, pose}; }

std::vector<std::size_t> Corpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == s) out.push_back(i);
  }
  return out;
}

CoarseEstimate corrupt_to_coarse(const std::array<std::optional<HandParams>, kSlots>& gt, RandomStream& rng,
                                 const NoiseConfig& noise) {
  const bool two = gt[kLeftSlot] && gt[kRightSlot];
  const double f = two ? noise.two_hand_factor : 1.0;
  CoarseEstimate out;
  for (std::size_t s = 0; s < kSlots; ++s) {
    if (!gt[s]) continue;
    HandParams p = *gt[s];
    for (double& x : p.theta) x += noise.pose_sigma * f * rng.normal();
    for (double& x : p.beta) x += noise.shape_sigma * f * rng.normal();
    for (double& x : p.phi) x += noise.pose_sigma * f * rng.normal();
    out.coarse[s] = HandParams::create(p.theta, p.beta, p.phi, p.side);
  }
  if (two && rng.bernoulli(noise.p_swap)) {
    const auto left = out.coarse[kLeftSlot]->to_vector();
    const auto right = out.coarse[kRightSlot]->to_vector();
    out.coarse[kLeftSlot] = HandParams::from_vector(right, Side::left);
    out.coarse[kRightSlot] = HandParams::from_vector(left, Side::right);
    out.swapped = true;
  }
  for (std::size_t s = 0; s < kSlots; ++s) out.detected[s] = gt[s] && !rng.bernoulli(noise.p_miss);
  return out;
}

namespace {

constexpr std::size_t kFeatureInput = kSlots * kReportedJoints * 3;
constexpr double kFeatureJointScale = 0.01;  // mm -> feature units

std::vector<double> feature_map(const RunConfig& config) {
  RandomStream rng(stream_seed(config.seed, kFeatureMapKey));
  std::vector<double> m(kFeatureInput * config.model.image_feature_dim);
  const double sd = 1.0 / std::sqrt(double(kFeatureInput));
  for (double& x : m) x = sd * rng.normal();
  return m;
}

std::vector<double> map_features(const std::array<std::optional<HandParams>, kSlots>& gt, const HandRig& rig,
                                 std::span<const double> map, std::size_t k, double sigma, RandomStream& rng) {
  std::vector<double> x(kFeatureInput, 0.0);
  for (std::size_t s = 0; s < kSlots; ++s) {
    if (!gt[s]) continue;
    const HandGeometry g = forward(rig, *gt[s]);
    for (std::size_t i = 0; i < g.joints.size(); ++i) x[s * kReportedJoints * 3 + i] = kFeatureJointScale * g.joints[i];
  }
  std::vector<double> out(k, 0.0);
  for (std::size_t i = 0; i < kFeatureInput; ++i) {
    if (x[i] == 0.0) continue;
    for (std::size_t j = 0; j < k; ++j) out[j] += x[i] * map[i * k + j];
  }
  for (double& v : out) v += sigma * rng.normal();
  return out;
}

Involvement draw_involvement(const std::array<double, kInvolvementClasses>& p, RandomStream& rng) {
  double total = 0;
  for (double x : p) total += x;
  const double u = rng.uniform() * total;
  double acc = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    acc += p[c];
    if (u < acc) return involvement_from_int(static_cast<int>(c));
  }
  for (std::size_t c = p.size(); c-- > 0;) {
    if (p[c] > 0) return involvement_from_int(static_cast<int>(c));
  }
  return Involvement::none;
}

HandParams draw_hand(Side side, RandomStream& rng) {
  std::array<double, kThetaSize> theta;
  std::array<double, kBetaSize> beta;
  for (double& x : theta) x = 0.3 * rng.normal();
  for (double& x : beta) x = rng.normal();
  // Viewing direction uniform on the upper hemisphere; phi rotates +z onto it.
  const double z = rng.uniform();
  const double az = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double dx = r * std::cos(az), dy = r * std::sin(az);
  std::array<double, kPhiSize> phi{0.0, 0.0, 0.0};
  if (r > 0) {
    const double angle = std::acos(std::clamp(z, -1.0, 1.0));
    phi = {-dy / r * angle, dx / r * angle, 0.0};
  }
  return HandParams::create(theta, beta, phi, side);
}

}  // namespace

std::vector<double> image_features(const std::array<std::optional<HandParams>, kSlots>& gt, const HandRig& rig,
                                   const RunConfig& config, RandomStream& rng) {
  const auto map = feature_map(config);
  return map_features(gt, rig, map, config.model.image_feature_dim, config.noise.feature_sigma, rng);
}

Corpus generate_corpus(const RunConfig& config, const HandRig& rig) {
  config.validate();
  const std::size_t n = config.train_size + config.val_size + config.test_size;
  const auto map = feature_map(config);
  const RandomStream base(stream_seed(config.seed, kCorpusKey));
  Corpus corpus;
  corpus.samples.resize(n);
  parallel_for(n, config.threads, [&](std::size_t i) {
    RandomStream rng = base.fork(i);
    SyntheticSample& s = corpus.samples[i];
    char id[16];
    std::snprintf(id, sizeof id, "s%05zu", i);
    s.id = id;
    s.split = i < config.train_size ? Split::train : i < config.train_size + config.val_size ? Split::val : Split::test;
    s.involvement = draw_involvement(config.proportions, rng);
    if (has_left(s.involvement)) s.gt[kLeftSlot] = draw_hand(Side::left, rng);
    if (has_right(s.involvement)) s.gt[kRightSlot] = draw_hand(Side::right, rng);
    for (std::size_t h = 0; h < kSlots; ++h) {
      const double x = h == kLeftSlot ? -90.0 : 90.0;
      s.translation[h] = {x + 15.0 * rng.normal(), 15.0 * rng.normal(), 450.0 + 30.0 * rng.normal()};
    }
    const CoarseEstimate c = corrupt_to_coarse(s.gt, rng, config.noise);
    s.coarse = c.coarse;
    s.detected = c.detected;
    s.swapped = c.swapped;
    s.image_features = map_features(s.gt, rig, map, config.model.image_feature_dim, config.noise.feature_sigma, rng);
    s.object = kObjects[rng.below(kObjects.size())];
    s.verb = kVerbs[rng.below(kVerbs.size())];
    s.pose = kPoses[rng.below(kPoses.size())];
  });
  return corpus;
}

void Corpus::save(const std::filesystem::path& path) const {
  const std::size_t n = samples.size();
  const std::size_t k = n ? samples[0].image_features.size() : 0;
  nlohmann::json meta = nlohmann::json::array();
  std::vector<double> gt(n * kSlots * kParamVectorSize, 0.0), coarse(gt.size(), 0.0), trans(n * kSlots * 3);
  std::vector<double> feats;
  feats.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    if (s.image_features.size() != k) throw DataError("corpus: image feature widths differ across samples");
    meta.push_back({{"id", s.id},
                    {"split", split_name(s.split)},
                    {"involvement", static_cast<int>(s.involvement)},
                    {"present", {s.gt[0].has_value(), s.gt[1].has_value()}},
                    {"detected", {s.detected[0], s.detected[1]}},
                    {"swapped", s.swapped},
                    {"object", s.object},
                    {"verb", s.verb},
                    {"pose", s.pose}});
    for (std::size_t h = 0; h < kSlots; ++h) {
      const std::size_t off = (i * kSlots + h) * kParamVectorSize;
      if (s.gt[h]) std::ranges::copy(s.gt[h]->to_vector(), gt.begin() + off);
      if (s.coarse[h]) std::ranges::copy(s.coarse[h]->to_vector(), coarse.begin() + off);
      std::ranges::copy(s.translation[h], trans.begin() + (i * kSlots + h) * 3);
    }
    feats.insert(feats.end(), s.image_features.begin(), s.image_features.end());
  }
  write_blob_file(path, "EHCRP1", {{"format", "ehicl-corpus"}, {"samples", meta}},
                  {{"gt", {n, kSlots, kParamVectorSize}, gt},
                   {"coarse", {n, kSlots, kParamVectorSize}, coarse},
                   {"translation", {n, kSlots, 3}, trans},
                   {"image_features", {n, k}, feats}});
}

Corpus Corpus::load(const std::filesystem::path& path) {
  const BlobFile f = read_blob_file(path, "EHCRP1");
  Corpus c;
  try {
    const auto& meta = f.manifest.at("samples");
    const std::size_t n = meta.size();
    const BlobArray* feats = f.find("image_features");
    if (!feats || feats->shape.size() != 2) throw ManifestMismatchError("corpus: image_features array missing");
    const std::size_t k = feats->shape[1];
    const auto& gt = f.get("gt", {n, kSlots, kParamVectorSize}).data;
    const auto& coarse = f.get("coarse", {n, kSlots, kParamVectorSize}).data;
    const auto& trans = f.get("translation", {n, kSlots, 3}).data;
    f.get("image_features", {n, k});
    c.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = meta[i];
      auto& s = c.samples[i];
      s.id = m.at("id");
      s.split = split_from_string(m.at("split").get<std::string>());
      s.involvement = involvement_from_int(m.at("involvement"));
      s.swapped = m.at("swapped");
      s.object = m.at("object");
      s.verb = m.at("verb");
      s.pose = m.at("pose");
      for (std::size_t h = 0; h < kSlots; ++h) {
        s.detected[h] = m.at("detected")[h];
        const std::size_t off = (i * kSlots + h) * kParamVectorSize;
        if (m.at("present")[h]) {
          s.gt[h] = HandParams::from_vector(std::span(gt).subspan(off, kManoRow), slot_side(h));
          s.coarse[h] = HandParams::from_vector(std::span(coarse).subspan(off, kManoRow), slot_side(h));
        }
        for (std::size_t a = 0; a < 3; ++a) s.translation[h][a] = trans[(i * kSlots + h) * 3 + a];
      }
      s.image_features.assign(feats->data.begin() + i * k, feats->data.begin() + (i + 1) * k);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError(std::string("corpus manifest: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Templates and queries

std::unique_ptr<MockVlmClient> make_mock_vlm(const Corpus& corpus, const RunConfig& config) {
  auto client = std::make_unique<MockVlmClient>(
      MockVlmOptions{stream_seed(config.seed, kVlmKey), config.vlm_flip_probability, std::nullopt});
  for (const auto& s : corpus.samples) client->register_image(s.image_ref(), s.metadata());
  return client;
}

TemplateDb build_template_db(const Corpus& corpus, VlmClient& client, const RunConfig& config) {
  TemplateDb db;
  for (std::size_t i : corpus.indices(Split::train)) {
    const SyntheticSample& s = corpus.samples[i];
    TemplateRecord r;
    r.id = s.id;
    r.involvement = s.involvement;
    r.description = describe(s.image_ref(), config.prompt_style, client);
    r.text_embedding = embed_text(r.description);
    r.image_features = s.image_features;
    for (std::size_t h = 0; h < kSlots; ++h) {
      if (!s.detected[h]) continue;
      r.coarse[h] = s.coarse[h];
      r.gt[h] = s.gt[h];
    }
    db.records.push_back(std::move(r));
  }
  return db;
}

PreparedQuery prepare_query(const Corpus& corpus, std::size_t index, VlmClient& client, const RunConfig& config,
                            bool with_gt) {
  const SyntheticSample& s = corpus.samples.at(index);
  PreparedQuery q;
  q.sample = index;
  const Classification cls = classify_involvement(s.image_ref(), client);
  const std::string description = describe(s.image_ref(), config.prompt_style, client);
  q.input.id = s.id;
  q.input.image_features = s.image_features;
  q.input.text_embedding = embed_text(description);
  for (std::size_t h = 0; h < kSlots; ++h) {
    if (s.detected[h]) q.input.coarse[h] = s.coarse[h];
    if (with_gt) q.input.gt[h] = s.gt[h];
  }
  q.retrieval = {s.id, cls.label, q.input.text_embedding};
  return q;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

HandGeometry camera_geometry(const HandRig& rig, const HandParams& p, const Point3& t) {
  HandGeometry g = forward(rig, p);
  for (std::size_t i = 0; i < g.vertices.size(); ++i) g.vertices[i] += t[i % 3];
  for (std::size_t i = 0; i < g.joints.size(); ++i) g.joints[i] += t[i % 3];
  return g;
}

Point3 root_of(const HandGeometry& g) { return {g.joints[0], g.joints[1], g.joints[2]}; }

struct Inference {
  std::vector<SamplePrediction> predictions;
  std::vector<SampleEvaluation> refined, coarse;
};

Inference run_inference(const PipelineWeights& w, const Corpus& corpus, std::span<const std::size_t> indices,
                        const TemplateDb& db, VlmClient& client, const HandRig& rig, const RunConfig& config) {
  Inference inf;
  const std::size_t n = indices.size();
  inf.predictions.resize(n);
  std::vector<QueryInput> queries(n);
  std::vector<const TemplateRecord*> templates(n);
  for (std::size_t i = 0; i < n; ++i) {
    PreparedQuery q = prepare_query(corpus, indices[i], client, config, false);
    RandomStream rng(stream_seed(config.seed, kVisualKey, indices[i]));
    const RetrievalResult r = retrieve_template(q.retrieval, db, config.strategy, rng);
    templates[i] = &db.records[r.index];
    auto& p = inf.predictions[i];
    p.id = q.input.id;
    p.involvement = corpus.samples[indices[i]].involvement;
    p.template_id = templates[i]->id;
    p.similarity = r.similarity;
    p.fallback = r.fallback;
    queries[i] = std::move(q.input);
  }
  for (std::size_t begin = 0; begin < n; begin += config.eval_batch) {
    const std::size_t end = std::min(n, begin + config.eval_batch);
    const auto bundles = build_bundles(std::span(templates).subspan(begin, end - begin),
                                       std::span(queries).subspan(begin, end - begin), w, BundleMode::inference);
    const RefineOutput out = refine(bundles, w);
    for (std::size_t b = 0; b < out.batch; ++b) inf.predictions[begin + b].refined = out.query[b];
  }
  inf.refined.resize(n);
  inf.coarse.resize(n);
  parallel_for(n, config.threads, [&](std::size_t i) {
    const SyntheticSample& s = corpus.samples[indices[i]];
    auto& pred = inf.predictions[i];
    SampleEvaluation re{s.id, static_cast<int>(s.involvement), {}};
    SampleEvaluation ce = re;
    double gain = 0;
    std::size_t evaluated = 0;
    for (std::size_t h = 0; h < kSlots; ++h) {
      if (!s.gt[h]) continue;
      const HandGeometry g = camera_geometry(rig, *s.gt[h], s.translation[h]);
      HandEvaluation rh{slot_side(h), false, {}, {}, root_of(g)};
      HandEvaluation ch = rh;
      if (s.detected[h] && pred.refined[h] && s.coarse[h]) {
        const HandGeometry rp = camera_geometry(rig, *pred.refined[h], s.translation[h]);
        const HandGeometry cp = camera_geometry(rig, *s.coarse[h], s.translation[h]);
        rh.detected = ch.detected = true;
        rh.errors = hand_errors(rp, g);
        ch.errors = hand_errors(cp, g);
        rh.pred_root = root_of(rp);
        ch.pred_root = root_of(cp);
        gain += ch.errors.p_mpvpe - rh.errors.p_mpvpe;
        ++evaluated;
      }
      re.hands.push_back(rh);
      ce.hands.push_back(ch);
    }
    if (evaluated) pred.gain = gain / double(evaluated);
    inf.refined[i] = std::move(re);
    inf.coarse[i] = std::move(ce);
  });
  return inf;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

double general_p_mpvpe(const std::vector<SampleEvaluation>& evals) {
  const MetricReport r = aggregate(evals, Setting::general);
  return r.means ? r.means->p_mpvpe : std::numeric_limits<double>::infinity();
}

}  // namespace

RunReport evaluate(const PipelineWeights& weights, const Corpus& corpus, Split split, const TemplateDb& db,
                   VlmClient& client, const HandRig& rig, const RunConfig& config) {
  const auto indices = corpus.indices(split);
  RunReport report;
  report.split = split_name(split);
  report.samples = indices.size();
  Inference inf = run_inference(weights, corpus, indices, db, client, rig, config);
  report.refined_general = aggregate(inf.refined, Setting::general);
  report.refined_bimanual = aggregate(inf.refined, Setting::bimanual);
  report.coarse_general = aggregate(inf.coarse, Setting::general);
  report.coarse_bimanual = aggregate(inf.coarse, Setting::bimanual);
  for (std::size_t c = 0; c < kInvolvementClasses; ++c) {
    std::vector<SampleEvaluation> r, k;
    for (std::size_t i = 0; i < inf.refined.size(); ++i) {
      if (inf.refined[i].involvement != static_cast<int>(c)) continue;
      r.push_back(inf.refined[i]);
      k.push_back(inf.coarse[i]);
    }
    auto& t = report.by_type[c];
    t.involvement = involvement_from_int(static_cast<int>(c));
    t.samples = r.size();
    t.refined = aggregate(r, Setting::general);
    t.coarse = aggregate(k, Setting::general);
  }
  std::vector<double> sims, gains;
  for (const auto& p : inf.predictions) {
    if (!p.gain) continue;
    sims.push_back(p.similarity);
    gains.push_back(*p.gain);
  }
  report.histogram = similarity_histogram(sims, gains);
  report.similarity_gain_correlation = pearson(sims, gains);
  report.predictions = std::move(inf.predictions);
  return report;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const RunConfig& config, const Corpus& corpus, const TemplateDb& db, VlmClient& client,
                  const HandRig& rig, const EpochCallback& on_epoch) {
  config.validate();
  const auto train_idx = corpus.indices(Split::train);
  const auto val_idx = corpus.indices(Split::val);
  if (train_idx.empty()) throw DataError("train: the corpus has no training samples");
  if (db.usable_count() == 0) throw DataError("train: the template database holds no usable record");

  PipelineWeights weights = PipelineWeights::init(config.model, stream_seed(config.seed, kWeightsKey));
  const PhiEncoder phi = PhiEncoder::create(config.model);
  AdamW opt(weights.parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  LossOptions loss_opts{config.dataset_mode, config.lambdas, config.template_targets, config.perceptual_on_joints};

  std::vector<PreparedQuery> queries;
  queries.reserve(train_idx.size());
  for (std::size_t i : train_idx) queries.push_back(prepare_query(corpus, i, client, config, true));
  // Deterministic strategies are resolved once.
  std::vector<std::size_t> cached(queries.size());
  const bool draw_each_epoch = config.strategy == RetrievalStrategy::visual;
  if (!draw_each_epoch) {
    RandomStream unused(0);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      cached[q] = retrieve_template(queries[q].retrieval, db, config.strategy, unused).index;
    }
  }

  std::unordered_map<std::string, std::size_t> sample_of;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) sample_of.emplace(corpus.samples[i].id, i);

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  const std::size_t n = queries.size();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = RandomStream(stream_seed(config.seed, kShuffleKey, epoch)).permutation(n);
    double sum_total = 0, sum_mano = 0, sum_v = 0, sum_j = 0, sum_3d = 0;
    std::size_t hands = 0;
    for (std::size_t begin = 0, batch = 0; begin < n; begin += config.batch_size, ++batch) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::vector<const TemplateRecord*> tpl;
      std::vector<QueryInput> qin;
      std::deque<TemplateRecord> fresh_templates;
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t q = order[k];
        std::size_t t = cached[q];
        if (draw_each_epoch) {
          RandomStream rng(stream_seed(config.seed, kVisualKey, queries[q].sample, epoch));
          t = retrieve_template(queries[q].retrieval, db, config.strategy, rng).index;
        }
        tpl.push_back(&db.records[t]);
        qin.push_back(queries[q].input);
        if (config.resample_coarse) {
          const SyntheticSample& s = corpus.samples[queries[q].sample];
          RandomStream rng(stream_seed(config.seed, kResampleKey, queries[q].sample, epoch));
          const CoarseEstimate fresh = corrupt_to_coarse(s.gt, rng, config.noise);
          for (std::size_t h = 0; h < kSlots; ++h) {
            qin.back().coarse[h] = fresh.detected[h] ? fresh.coarse[h] : std::nullopt;
          }
          // The exemplar keeps its hands but gets a fresh estimate as well.
          if (const auto it = sample_of.find(db.records[t].id); it != sample_of.end()) {
            TemplateRecord& r = fresh_templates.emplace_back(db.records[t]);
            const CoarseEstimate ft = corrupt_to_coarse(corpus.samples[it->second].gt, rng, config.noise);
            for (std::size_t h = 0; h < kSlots; ++h) r.coarse[h] = r.coarse[h] ? ft.coarse[h] : std::nullopt;
            tpl.back() = &r;
          }
        }
      }
      Tape tape;
      TapeScope scope(tape);
      auto bundles = build_bundles(tpl, qin, weights, BundleMode::training);
      for (std::size_t b = 0; b < bundles.size(); ++b) {
        const std::uint64_t round = config.mask_schedule == MaskSchedule::per_epoch ? epoch : 0;
        RandomStream rng(stream_seed(config.seed, kMaskKey, queries[order[begin + b]].sample, round));
        apply_mask(bundles[b], config.mask_ratio, rng);
      }
      const RefineOutput out = refine(bundles, weights);
      const LossBreakdown loss = pipeline_loss(out, bundles, rig, phi, loss_opts);
      if (loss.supervised_hands == 0) continue;
      if (!std::isfinite(loss.total)) {
        throw NumericalError("train: non-finite loss " + format_shortest(loss.total) + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch));
      }
      tape.backward(loss.total_tensor);
      for (const auto& p : weights.parameters()) {
        if (!p.tensor.has_grad()) p.tensor.grad_buffer();
      }
      opt.step();
      const double h = double(loss.supervised_hands);
      sum_total += loss.total * h;
      sum_mano += loss.l_mano * h;
      sum_v += loss.l_v * h;
      sum_j += loss.l_j * h;
      sum_3d += loss.l_3d * h;
      hands += loss.supervised_hands;
    }
    EpochLog log;
    log.epoch = epoch;
    log.supervised_hands = hands;
    if (hands) {
      const double h = double(hands);
      log.loss = sum_total / h;
      log.l_mano = sum_mano / h;
      log.l_v = sum_v / h;
      log.l_j = sum_j / h;
      log.l_3d = sum_3d / h;
    }
    log.val_p_mpvpe = val_idx.empty()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : general_p_mpvpe(run_inference(weights, corpus, val_idx, db, client, rig, config).refined);
    // Without a usable validation score the latest weights win.
    const bool better = std::isnan(log.val_p_mpvpe) ? true : log.val_p_mpvpe < result.best_val;
    if (better || result.best_epoch == 0) {
      if (!std::isnan(log.val_p_mpvpe)) result.best_val = log.val_p_mpvpe;
      result.best_epoch = epoch;
      result.best.weights = weights.clone();
      result.best.step = opt.step_count();
    }
    result.curve.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (result.best_epoch == 0) {
    result.best.weights = weights.clone();
    result.best.step = opt.step_count();
  }
  result.best.rig_seed = rig.seed;
  result.best.lambdas = config.lambdas;
  result.best.run_config = config.to_json();
  return result;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json epoch_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"loss", e.loss},         {"l_mano", e.l_mano},
          {"l_v", e.l_v},     {"l_j", e.l_j},           {"l_3d", e.l_3d},
          {"hands", e.supervised_hands},                {"val_p_mpvpe", std::isnan(e.val_p_mpvpe) ? nlohmann::json() : nlohmann::json(e.val_p_mpvpe)}};
}

EpochLog epoch_from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch");
  e.loss = j.at("loss");
  e.l_mano = j.at("l_mano");
  e.l_v = j.at("l_v");
  e.l_j = j.at("l_j");
  e.l_3d = j.at("l_3d");
  e.supervised_hands = j.at("hands");
  e.val_p_mpvpe = j.at("val_p_mpvpe").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                 : j.at("val_p_mpvpe").get<double>();
  return e;
}

struct CsvRow {
  std::string model, setting, type;
  std::size_t samples;
  const MetricReport* report;
};

std::vector<CsvRow> report_rows(const RunReport& r) {
  std::vector<CsvRow> rows;
  for (const auto& [model, general, bimanual] :
       {std::tuple{"refined", &r.refined_general, &r.refined_bimanual},
        std::tuple{"coarse", &r.coarse_general, &r.coarse_bimanual}}) {
    rows.push_back({model, "general", "all", r.samples, general});
    rows.push_back({model, "bimanual", "all", r.samples, bimanual});
    for (const auto& t : r.by_type) {
      rows.push_back({model, "general", involvement_name(t.involvement), t.samples,
                      std::string(model) == "refined" ? &t.refined : &t.coarse});
    }
  }
  return rows;
}

std::vector<std::string> row_cells(const CsvRow& row, bool fixed) {
  const auto num = [&](std::optional<double> v) {
    if (!v) return std::string();
    return fixed ? format_fixed(*v, 2) : format_shortest(*v);
  };
  const MetricReport& m = *row.report;
  const auto mean = [&](auto get) -> std::optional<double> {
    if (!m.means) return std::nullopt;
    return get(*m.means);
  };
  const auto f_at = [&](double t) -> std::optional<double> {
    if (!m.means) return std::nullopt;
    const auto it = m.means->f_at.find(t);
    if (it == m.means->f_at.end()) return std::nullopt;
    return it->second;
  };
  return {row.model,
          row.setting,
          row.type,
          std::to_string(row.samples),
          std::to_string(m.hand_count),
          num(mean([](const MetricMeans& x) { return x.mpjpe; })),
          num(mean([](const MetricMeans& x) { return x.p_mpjpe; })),
          num(mean([](const MetricMeans& x) { return x.mpvpe; })),
          num(mean([](const MetricMeans& x) { return x.p_mpvpe; })),
          fixed ? (f_at(5.0) ? format_fixed(*f_at(5.0), 3) : "") : num(f_at(5.0)),
          fixed ? (f_at(15.0) ? format_fixed(*f_at(15.0), 3) : "") : num(f_at(15.0)),
          m.means ? num(m.means->mrrpe) : std::string(),
          std::to_string(m.excluded_hands)};
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

nlohmann::json RunReport::to_json() const {
  nlohmann::json types = nlohmann::json::array();
  for (const auto& t : by_type) {
    types.push_back({{"type", involvement_name(t.involvement)},
                     {"samples", t.samples},
                     {"refined", ehicl::to_json(t.refined)},
                     {"coarse", ehicl::to_json(t.coarse)}});
  }
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : loss_curve) curve.push_back(epoch_json(e));
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& b : histogram) hist.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"mean_gain", b.mean_gain}});
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : predictions) {
    preds.push_back({{"id", p.id},
                     {"involvement", involvement_name(p.involvement)},
                     {"template", p.template_id},
                     {"similarity", p.similarity},
                     {"fallback", p.fallback},
                     {"gain", optional_json(p.gain)}});
  }
  return {{"split", split},
          {"samples", samples},
          {"refined", {{"general", ehicl::to_json(refined_general)}, {"bimanual", ehicl::to_json(refined_bimanual)}}},
          {"coarse", {{"general", ehicl::to_json(coarse_general)}, {"bimanual", ehicl::to_json(coarse_bimanual)}}},
          {"by_type", types},
          {"loss_curve", curve},
          {"similarity_histogram", hist},
          {"similarity_gain_correlation", optional_json(similarity_gain_correlation)},
          {"predictions", preds}};
}

RunReport RunReport::from_json(const nlohmann::json& j) {
  RunReport r;
  try {
    r.split = j.at("split");
    r.samples = j.at("samples");
    r.refined_general = metric_report_from_json(j.at("refined").at("general"));
    r.refined_bimanual = metric_report_from_json(j.at("refined").at("bimanual"));
    r.coarse_general = metric_report_from_json(j.at("coarse").at("general"));
    r.coarse_bimanual = metric_report_from_json(j.at("coarse").at("bimanual"));
    const auto& types = j.at("by_type");
    if (types.size() != kInvolvementClasses) throw DataError("report: by_type must hold 4 entries");
    for (std::size_t c = 0; c < kInvolvementClasses; ++c) {
      auto& t = r.by_type[c];
      t.involvement = involvement_from_int(static_cast<int>(c));
      t.samples = types[c].at("samples");
      t.refined = metric_report_from_json(types[c].at("refined"));
      t.coarse = metric_report_from_json(types[c].at("coarse"));
    }
    for (const auto& e : j.at("loss_curve")) r.loss_curve.push_back(epoch_from_json(e));
    for (const auto& b : j.at("similarity_histogram")) {
      r.histogram.push_back({b.at("lo"), b.at("hi"), b.at("count"), b.at("mean_gain")});
    }
    if (!j.at("similarity_gain_correlation").is_null()) {
      r.similarity_gain_correlation = j.at("similarity_gain_correlation").get<double>();
    }
    for (const auto& p : j.at("predictions")) {
      SamplePrediction s;
      s.id = p.at("id");
      s.involvement = [&] {
        const std::string name = p.at("involvement");
        for (int c = 0; c < 4; ++c) {
          if (name == involvement_name(involvement_from_int(c))) return involvement_from_int(c);
        }
        throw DataError("report: unknown involvement '" + name + "'");
      }();
      s.template_id = p.at("template");
      s.similarity = p.at("similarity");
      s.fallback = p.at("fallback");
      if (!p.at("gain").is_null()) s.gain = p.at("gain").get<double>();
      r.predictions.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

std::string report_csv(const RunReport& report) {
  std::string out;
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) out += (i ? "," : "") + std::string(kReportColumns[i]);
  out += "\n";
  for (const auto& row : report_rows(report)) {
    const auto cells = row_cells(row, false);
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += "\n";
  }
  return out;
}

std::string report_table(const RunReport& report) {
  std::vector<std::vector<std::string>> cells;
  cells.emplace_back(kReportColumns.begin(), kReportColumns.end());
  for (const auto& row : report_rows(report)) {
    auto c = row_cells(row, true);
    for (auto& x : c) {
      if (x.empty()) x = "-";
    }
    cells.push_back(std::move(c));
  }
  std::vector<std::size_t> width(kReportColumns.size(), 0);
  for (const auto& r : cells) {
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::string out = "split " + report.split + ", " + std::to_string(report.samples) + " samples\n";
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto& c = cells[r][i];
      const std::string pad(width[i] - c.size(), ' ');
      out += i < 3 ? c + pad : pad + c;  // text left, numbers right
      out += i + 1 < cells[r].size() ? "  " : "\n";
    }
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
  }
  return out;
}

std::string loss_curve_csv(std::span<const EpochLog> curve) {
  std::string out = "epoch,loss,l_mano,l_v,l_j,l_3d,hands,val_p_mpvpe\n";
  for (const auto& e : curve) {
    out += std::to_string(e.epoch) + "," + format_shortest(e.loss) + "," + format_shortest(e.l_mano) + "," +
           format_shortest(e.l_v) + "," + format_shortest(e.l_j) + "," + format_shortest(e.l_3d) + "," +
           std::to_string(e.supervised_hands) + "," + (std::isnan(e.val_p_mpvpe) ? "" : format_shortest(e.val_p_mpvpe)) +
           "\n";
  }
  return out;
}

std::vector<EpochLog> parse_loss_curve_csv(std::string_view csv) {
  std::vector<EpochLog> out;
  std::size_t line_no = 0;
  while (!csv.empty()) {
    const auto nl = csv.find('\n');
    const std::string_view line = csv.substr(0, nl);
    csv = nl == std::string_view::npos ? std::string_view{} : csv.substr(nl + 1);
    if (line_no++ == 0 || line.empty()) continue;
    std::vector<std::string_view> cells;
    for (std::size_t start = 0;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    const auto bad = [&] { return DataError("loss curve line " + std::to_string(line_no) + ": malformed row"); };
    if (cells.size() != 8) throw bad();
    const auto num = [&](std::string_view c) {
      double v = 0;
      const auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc{} || p != c.data() + c.size()) throw bad();
      return v;
    };
    const auto count = [&](std::string_view c) {
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc{} || p != c.data() + c.size()) throw bad();
      return v;
    };
    EpochLog e;
    e.epoch = count(cells[0]);
    e.loss = num(cells[1]);
    e.l_mano = num(cells[2]);
    e.l_v = num(cells[3]);
    e.l_j = num(cells[4]);
    e.l_3d = num(cells[5]);
    e.supervised_hands = count(cells[6]);
    e.val_p_mpvpe = cells[7].empty() ? std::numeric_limits<double>::quiet_NaN() : num(cells[7]);
    out.push_back(e);
  }
  return out;
}

std::string histogram_csv(std::span<const HistogramBin> bins) {
  std::string out = "lo,hi,count,mean_gain\n";
  for (const auto& b : bins) {
    out += format_shortest(b.lo) + "," + format_shortest(b.hi) + "," + std::to_string(b.count) + "," +
           format_shortest(b.mean_gain) + "\n";
  }
  return out;
}

void emit_report(const RunReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create report directory " + dir.string() + ": " + ec.message());
  write_file(dir / "report.json", report.to_json().dump(2) + "\n");
  write_file(dir / "report.csv", report_csv(report));
  write_file(dir / "report.txt", report_table(report));
  write_file(dir / "loss_curve.csv", loss_curve_csv(report.loss_curve));
  write_file(dir / "similarity_histogram.csv", histogram_csv(report.histogram));
}

// ---------------------------------------------------------------------------
// Keypoint ingestion

std::vector<KeypointSample> parse_keypoints(std::string_view jsonl) {
  std::vector<KeypointSample> out;
  std::size_t line_no = 0;
  while (!jsonl.empty()) {
    const auto nl = jsonl.find('\n');
    const std::string_view line = trim(jsonl.substr(0, nl));
    jsonl = nl == std::string_view::npos ? std::string_view{} : jsonl.substr(nl + 1);
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "keypoints line " + std::to_string(line_no) + ": ";
    KeypointSample s;
    try {
      const auto j = nlohmann::json::parse(line);
      s.id = j.at("id");
      const auto& hands = j.at("hands");
      for (std::size_t h = 0; h < kSlots; ++h) {
        const char* name = side_name(slot_side(h));
        if (!hands.contains(name)) continue;
        const auto& hand = hands.at(name);
        const auto read = [&](const char* key) -> std::optional<std::vector<double>> {
          if (!hand.contains(key) || hand.at(key).is_null()) return std::nullopt;
          auto v = hand.at(key).get<std::vector<double>>();
          if (v.size() != kReportedJoints * 3) {
            throw DataError(where + std::string(name) + "." + key + " must hold " +
                            std::to_string(kReportedJoints * 3) + " values, got " + std::to_string(v.size()));
          }
          for (double x : v) {
            if (!std::isfinite(x)) throw DataError(where + "non-finite coordinate");
          }
          return v;
        };
        s.gt[h] = read("gt");
        s.pred[h] = read("pred");
        s.detected[h] = hand.value("detected", true);
        if (!s.gt[h]) throw DataError(where + std::string(name) + " hand lacks gt");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<KeypointSample> read_keypoints(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read keypoint file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_keypoints(ss.str());
}

nlohmann::json KeypointReport::to_json() const {
  nlohmann::json f = nlohmann::json::object();
  for (const auto& [t, v] : f_at) f[format_shortest(t)] = v;
  nlohmann::json j{{"setting", setting_name(setting)}, {"empty", empty},    {"samples", samples},
                   {"hands", hands},                   {"excluded_hands", excluded_hands}};
  if (empty) {
    j["means"] = nullptr;
  } else {
    j["means"] = {{"mpjpe", mpjpe}, {"p_mpjpe", p_mpjpe}, {"f_at", f}, {"mrrpe", optional_json(mrrpe)}};
  }
  return j;
}

KeypointReport evaluate_keypoints(std::span<const KeypointSample> samples, Setting setting,
                                  const MetricOptions& options) {
  KeypointReport r;
  r.setting = setting;
  double mrrpe_sum = 0;
  for (const auto& s : samples) {
    const auto usable = [&](std::size_t h) { return s.gt[h] && s.pred[h] && s.detected[h]; };
    if (setting == Setting::bimanual && !(usable(kLeftSlot) && usable(kRightSlot))) continue;
    std::size_t counted = 0;
    for (std::size_t h = 0; h < kSlots; ++h) {
      if (!s.gt[h]) continue;
      if (!usable(h)) {
        ++r.excluded_hands;
        continue;
      }
      r.mpjpe += mpjpe(*s.pred[h], *s.gt[h], false);
      r.p_mpjpe += mpjpe(*s.pred[h], *s.gt[h], true);
      for (double t : options.f_thresholds) r.f_at[t] += f_score(*s.pred[h], *s.gt[h], t, options.align_f_scores);
      ++r.hands;
      ++counted;
    }
    if (!counted) continue;
    ++r.samples;
    if (setting == Setting::bimanual) {
      const auto root = [](const std::vector<double>& v) { return Point3{v[0], v[1], v[2]}; };
      mrrpe_sum += ehicl::mrrpe(root(*s.pred[0]), root(*s.pred[1]), root(*s.gt[0]), root(*s.gt[1]));
    }
  }
  r.empty = r.hands == 0;
  if (!r.empty) {
    r.mpjpe /= double(r.hands);
    r.p_mpjpe /= double(r.hands);
    for (auto& [t, v] : r.f_at) v /= double(r.hands);
    if (setting == Setting::bimanual) r.mrrpe = mrrpe_sum / double(r.samples);
  } else {
    r.f_at.clear();
  }
  return r;
}

// ---------------------------------------------------------------------------

RunReport run_full(const RunConfig& config, const RunPaths& paths, const EpochCallback& on_epoch) {
  config.validate();
  std::filesystem::create_directories(paths.root);
  config.save(paths.config());
  const HandRig rig = build_rig(config.rig_seed);
  save_rig(rig, paths.rig());
  const Corpus corpus = generate_corpus(config, rig);
  corpus.save(paths.corpus());

  // Each stage talks to a fresh client, as separate CLI invocations would.
  TemplateDb db = build_template_db(corpus, *make_mock_vlm(corpus, config), config);
  {
    auto client = make_mock_vlm(corpus, config);
    ValidationState state;
    validate_templates(db, *client, state, {config.validation_runs, 2, 1});
  }
  db.save(paths.templates());

  const TrainResult trained = train(config, corpus, db, *make_mock_vlm(corpus, config), rig, on_epoch);
  save_checkpoint(paths.checkpoint(), trained.best);
  write_file(paths.loss_curve(), loss_curve_csv(trained.curve));

  RunReport report = evaluate(trained.best.weights, corpus, Split::test, db, *make_mock_vlm(corpus, config), rig, config);
  report.loss_curve = trained.curve;
  emit_report(report, paths.report_dir());
  return report;
}

// ---------------------------------------------------------------------------
// Gradient check

std::vector<GradCheckEntry> end_to_end_grad_check(const RunConfig& config, const HandRig& rig, std::size_t samples,
                                                  std::size_t per_parameter, double step) {
  RunConfig c = config;
  c.train_size = std::max<std::size_t>(samples, 2);
  c.val_size = c.test_size = 0;
  c.validate();
  const Corpus corpus = generate_corpus(c, rig);
  auto client = make_mock_vlm(corpus, c);
  TemplateDb db = build_template_db(corpus, *client, c);
  ValidationState state;
  validate_templates(db, *client, state, {c.validation_runs, 2, 1});

  std::vector<const TemplateRecord*> tpl;
  std::vector<QueryInput> qin;
  RandomStream unused(0);
  for (std::size_t i = 0; i < samples; ++i) {
    const PreparedQuery q = prepare_query(corpus, i, *client, c, true);
    tpl.push_back(&db.records[retrieve_template(q.retrieval, db, c.strategy, unused).index]);
    qin.push_back(q.input);
  }

  PipelineWeights weights = PipelineWeights::init(c.model, stream_seed(c.seed, kWeightsKey));
  RandomStream wake(stream_seed(c.seed, kWeightsKey, 1));
  for (Tensor t : {weights.mano_decoder.fc2.w, weights.mano_decoder.fc2.b}) {
    for (double& x : t.mutable_data()) x = 0.05 * wake.normal();
  }
  const PhiEncoder phi = PhiEncoder::create(c.model);
  const LossOptions opts{c.dataset_mode, c.lambdas, c.template_targets, c.perceptual_on_joints};
  const auto loss = [&] {
    auto bundles = build_bundles(tpl, qin, weights, BundleMode::training);
    for (std::size_t b = 0; b < bundles.size(); ++b) {
      RandomStream rng(stream_seed(c.seed, kMaskKey, b, 0));
      apply_mask(bundles[b], c.mask_ratio, rng);
    }
    return pipeline_loss(refine(bundles, weights), bundles, rig, phi, opts);
  };

  for (const auto& p : weights.parameters()) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const LossBreakdown l = loss();
    if (l.supervised_hands == 0) throw DataError("grad-check: no supervised hand in the sampled queries");
    tape.backward(l.total_tensor);
  }

  std::vector<GradCheckEntry> out;
  RandomStream pick(stream_seed(c.seed, kWeightsKey, 2));
  for (const auto& p : weights.parameters()) {
    const std::size_t n = p.tensor.numel();
    GradCheckEntry e{p.name, std::min(n, per_parameter), 0};
    double diff = 0, na = 0, nb = 0;
    Tensor t = p.tensor;
    auto data = t.mutable_data();
    for (std::size_t k = 0; k < e.checked; ++k) {
      const std::size_t i = pick.below(n);
      const double saved = data[i];
      data[i] = saved + step;
      const double plus = loss().total;
      data[i] = saved - step;
      const double minus = loss().total;
      data[i] = saved;
      const double numeric = (plus - minus) / (2 * step);
      const double analytic = p.tensor.has_grad() ? p.tensor.grad()[i] : 0.0;
      diff += (analytic - numeric) * (analytic - numeric);
      na += analytic * analytic;
      nb += numeric * numeric;
    }
    e.relative_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace ehicl

// SPDX-License-Identifier: Apache-2.0
#include "ehicl/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <limits>

#include <json.hpp>

#include "ehicl/blob_io.hpp"
#include "ehicl/prompts.hpp"

namespace ehicl {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(begin, end - begin + 1));
}

std::mutex g_warn_mutex;
WarningSink g_warning_sink;

}  // namespace

const char* involvement_name(Involvement c) {
  switch (c) {
    case Involvement::left_only: return "left";
    case Involvement::right_only: return "right";
    case Involvement::both: return "both";
    case Involvement::none: return "none";
  }
  return "?";
}

Involvement involvement_from_int(int v) {
  if (v < 0 || v > 3) throw ConfigError("involvement class must be 0-3, got " + std::to_string(v));
  return static_cast<Involvement>(v);
}

bool has_left(Involvement c) { return c == Involvement::left_only || c == Involvement::both; }
bool has_right(Involvement c) { return c == Involvement::right_only || c == Involvement::both; }

std::optional<Involvement> parse_involvement(std::string_view reply) {
  const std::string t = trim(reply);
  if (t.size() != 1 || t[0] < '0' || t[0] > '3') return std::nullopt;
  return static_cast<Involvement>(t[0] - '0');
}

const char* prompt_style_name(PromptStyle s) { return s == PromptStyle::description ? "description" : "reasoning"; }

PromptStyle prompt_style_from_string(std::string_view s) {
  if (s == "description") return PromptStyle::description;
  if (s == "reasoning") return PromptStyle::reasoning;
  throw ConfigError("prompt style must be 'description' or 'reasoning', got '" + std::string(s) + "'");
}

VlmRequest classification_request(const std::string& image_ref) {
  return {std::string(prompts::kClassifySystem), std::string(prompts::kClassifyUser), image_ref};
}

VlmRequest description_request(const std::string& image_ref, PromptStyle style) {
  if (style == PromptStyle::description) return {"", std::string(prompts::kDescribeDescriptionUser), image_ref};
  return {std::string(prompts::kDescribeReasoningSystem), std::string(prompts::kDescribeReasoningUser), image_ref};
}

Classification classify_involvement(const std::string& image_ref, VlmClient& client, int max_retries) {
  Classification out;
  const VlmRequest request = classification_request(image_ref);
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    const VlmResponse r = client.complete(request);
    out.raw_replies.push_back(r.text);
    if (auto label = parse_involvement(r.text)) {
      out.label = *label;
      return out;
    }
  }
  throw ClassificationError("image '" + image_ref + "': no parsable class after " +
                            std::to_string(max_retries + 1) + " replies, last was '" + out.raw_replies.back() + "'");
}

std::string describe(const std::string& image_ref, PromptStyle style, VlmClient& client) {
  const std::string text = trim(client.complete(description_request(image_ref, style)).text);
  if (text.empty()) throw DescriptionError("image '" + image_ref + "': empty description reply");
  return text;
}

std::string mock_description(const ImageMetadata& m, PromptStyle style) {
  if (m.involvement == Involvement::none) {
    return style == PromptStyle::description ? "No hand involvement."
                                             : "No hand is interacting with any object in this view.";
  }
  const char* hands = m.involvement == Involvement::left_only    ? "Left hand"
                      : m.involvement == Involvement::right_only ? "Right hand"
                                                                 : "Both hands";
  if (style == PromptStyle::description) return std::string(hands) + " " + m.verb + " a " + m.object + ".";
  std::string lower = hands;
  lower[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(lower[0])));
  return "The " + lower + (m.involvement == Involvement::both ? " are " : " is ") + m.verb + " a " + m.object +
         " with " + m.pose + ".";
}

MockVlmClient::MockVlmClient(MockVlmOptions options) : options_(options) {}

void MockVlmClient::register_image(const std::string& image_ref, ImageMetadata metadata) {
  std::lock_guard lock(mutex_);
  images_[image_ref] = std::move(metadata);
}

void MockVlmClient::script_replies(const std::string& image_ref, std::vector<std::string> replies) {
  std::lock_guard lock(mutex_);
  auto& queue = scripted_[image_ref];
  queue.insert(queue.end(), replies.begin(), replies.end());
}

std::size_t MockVlmClient::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

void MockVlmClient::set_fail_after(std::optional<std::size_t> n) {
  std::lock_guard lock(mutex_);
  options_.fail_after = n;
  calls_ = 0;
}

VlmResponse MockVlmClient::complete(const VlmRequest& request) {
  std::lock_guard lock(mutex_);
  if (options_.fail_after && calls_ >= *options_.fail_after) {
    throw TransportError("mock://vlm", "scripted outage after " + std::to_string(*options_.fail_after) + " calls");
  }
  ++calls_;
  const std::uint64_t nth = per_image_calls_[request.image_ref]++;
  if (auto s = scripted_.find(request.image_ref); s != scripted_.end() && !s->second.empty()) {
    std::string reply = s->second.front();
    s->second.erase(s->second.begin());
    return {reply};
  }
  const auto it = images_.find(request.image_ref);
  if (it == images_.end()) throw TransportError("mock://vlm", "unknown image '" + request.image_ref + "'");
  const ImageMetadata& m = it->second;

  if (request.system_prompt == prompts::kClassifySystem) {
    int label = static_cast<int>(m.involvement);
    RandomStream rng(mix_seed(options_.seed ^ mix_seed(fnv1a(request.image_ref) + nth)));
    if (rng.bernoulli(options_.flip_probability)) {
      label = (label + 1 + static_cast<int>(rng.below(kInvolvementClasses - 1))) % kInvolvementClasses;
    }
    return {std::to_string(label)};
  }
  if (request.user_prompt == prompts::kDescribeDescriptionUser) return {mock_description(m, PromptStyle::description)};
  if (request.user_prompt == prompts::kDescribeReasoningUser) return {mock_description(m, PromptStyle::reasoning)};
  return {""};
}

HttpVlmOptions HttpVlmOptions::from_env() { return from_env(HttpVlmOptions{}); }

HttpVlmOptions HttpVlmOptions::from_env(HttpVlmOptions defaults) {
  if (const char* url = std::getenv("EHICL_VLM_URL"); url && *url) defaults.base_url = url;
  if (const char* key = std::getenv("EHICL_VLM_KEY"); key && *key) defaults.api_key = key;
  return defaults;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::size_t token_bucket(std::string_view token) { return fnv1a(token) % kTextEmbeddingDim; }

std::vector<double> embed_text(std::string_view text) {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw Error("embed_text: text has no tokens");
  std::vector<double> v(kTextEmbeddingDim, 0.0);
  for (const auto& t : tokens) v[token_bucket(t)] += 1.0;
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::size_t TemplateDb::usable_count() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.usable(); }));
}

namespace {

const char* kSlotNames[2] = {"left", "right"};

}  // namespace

void TemplateDb::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "records");
  nlohmann::json manifest{{"format", "ehicl-template-db"}, {"version", 1}, {"count", records.size()}};
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string blob = "records/" + std::to_string(i) + ".bin";
    nlohmann::json hands;
    std::vector<BlobArray> arrays{{"text_embedding", {r.text_embedding.size()}, r.text_embedding},
                                  {"image_features", {r.image_features.size()}, r.image_features}};
    for (std::size_t s = 0; s < 2; ++s) {
      hands[kSlotNames[s]] = {{"coarse", r.coarse[s].has_value()}, {"gt", r.gt[s].has_value()}};
      if (r.coarse[s]) arrays.push_back({std::string("coarse_") + kSlotNames[s], {kParamVectorSize}, r.coarse[s]->to_vector()});
      if (r.gt[s]) arrays.push_back({std::string("gt_") + kSlotNames[s], {kParamVectorSize}, r.gt[s]->to_vector()});
    }
    write_blob_file(dir / blob, "EHTPL1", {{"id", r.id}}, arrays);
    list.push_back({{"id", r.id},
                    {"involvement", static_cast<int>(r.involvement)},
                    {"description", r.description},
                    {"validated", r.validated},
                    {"label_conflict", r.label_conflict},
                    {"vlm_label", r.vlm_label ? nlohmann::json(static_cast<int>(*r.vlm_label)) : nlohmann::json(nullptr)},
                    {"hands", hands},
                    {"blob", blob}});
  }
  manifest["records"] = list;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw Error("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(1) << "\n";
}

TemplateDb TemplateDb::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw DataError("template db: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("template db manifest: ") + e.what());
  }
  TemplateDb db;
  try {
    for (const auto& entry : manifest.at("records")) {
      TemplateRecord r;
      r.id = entry.at("id").get<std::string>();
      r.involvement = involvement_from_int(entry.at("involvement").get<int>());
      r.description = entry.at("description").get<std::string>();
      r.validated = entry.at("validated").get<bool>();
      r.label_conflict = entry.at("label_conflict").get<bool>();
      if (!entry.at("vlm_label").is_null()) r.vlm_label = involvement_from_int(entry.at("vlm_label").get<int>());
      const BlobFile blob = read_blob_file(dir / entry.at("blob").get<std::string>(), "EHTPL1");
      r.text_embedding = blob.get("text_embedding", {kTextEmbeddingDim}).data;
      const auto* feats = blob.find("image_features");
      if (!feats) throw ManifestMismatchError("template '" + r.id + "': image_features missing");
      r.image_features = feats->data;
      for (std::size_t s = 0; s < 2; ++s) {
        const Side side = s == kLeftSlot ? Side::left : Side::right;
        const auto& hands = entry.at("hands").at(kSlotNames[s]);
        if (hands.at("coarse").get<bool>()) {
          r.coarse[s] = HandParams::from_vector(blob.get(std::string("coarse_") + kSlotNames[s], {kParamVectorSize}).data, side);
        }
        if (hands.at("gt").get<bool>()) {
          r.gt[s] = HandParams::from_vector(blob.get(std::string("gt_") + kSlotNames[s], {kParamVectorSize}).data, side);
        }
      }
      db.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("template db manifest: ") + e.what());
  }
  return db;
}

const char* strategy_name(RetrievalStrategy s) {
  switch (s) {
    case RetrievalStrategy::visual: return "visual";
    case RetrievalStrategy::textual: return "textual";
    case RetrievalStrategy::combined: return "combined";
  }
  return "?";
}

RetrievalStrategy strategy_from_string(std::string_view s) {
  if (s == "visual") return RetrievalStrategy::visual;
  if (s == "textual") return RetrievalStrategy::textual;
  if (s == "combined") return RetrievalStrategy::combined;
  throw ConfigError("retrieval strategy must be visual, textual or combined, got '" + std::string(s) + "'");
}

void set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_warn_mutex);
  g_warning_sink = std::move(sink);
}

void warn(const std::string& message) {
  std::lock_guard lock(g_warn_mutex);
  if (g_warning_sink) g_warning_sink(message);
  else std::cerr << "warning: " << message << "\n";
}

RetrievalResult retrieve_template(const RetrievalQuery& query, const TemplateDb& db, RetrievalStrategy strategy,
                                  RandomStream& rng) {
  std::vector<std::size_t> pool, bucket;
  for (std::size_t i = 0; i < db.records.size(); ++i) {
    const auto& r = db.records[i];
    if (!r.usable() || r.id == query.id) continue;
    pool.push_back(i);
    if (r.involvement == query.involvement) bucket.push_back(i);
  }
  if (pool.empty()) throw DataError("retrieve_template: no usable template besides the query");

  const auto argmax = [&](const std::vector<std::size_t>& candidates) {
    RetrievalResult best;
    best.similarity = -std::numeric_limits<double>::infinity();
    for (auto i : candidates) {
      const double s = cosine_similarity(query.text_embedding, db.records[i].text_embedding);
      if (s > best.similarity) {
        best.similarity = s;
        best.index = i;
      }
    }
    return best;
  };

  if (strategy == RetrievalStrategy::textual) return argmax(pool);
  if (bucket.empty()) {
    warn("no usable template of class " + std::string(involvement_name(query.involvement)) + " for query '" +
         query.id + "', falling back to global argmax");
    RetrievalResult r = argmax(pool);
    r.fallback = true;
    return r;
  }
  if (strategy == RetrievalStrategy::combined) return argmax(bucket);
  RetrievalResult r;
  r.index = bucket[rng.below(bucket.size())];
  r.similarity = cosine_similarity(query.text_embedding, db.records[r.index].text_embedding);
  return r;
}

std::size_t ValidationState::completed() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.has_value(); }));
}

namespace {

std::vector<int> classify_runs(const TemplateRecord& r, VlmClient& client, const ValidationOptions& o) {
  std::vector<int> out;
  for (int k = 0; k < o.runs; ++k) {
    try {
      out.push_back(static_cast<int>(classify_involvement(r.id, client, o.max_retries).label));
    } catch (const ClassificationError&) {
      out.push_back(-1);
    }
  }
  return out;
}

void apply_labels(TemplateRecord& r, const std::vector<int>& labels) {
  const bool agree = !labels.empty() && labels[0] >= 0 &&
                     std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels[0]; });
  r.validated = agree;
  r.vlm_label = agree ? std::optional(static_cast<Involvement>(labels[0])) : std::nullopt;
  r.label_conflict = agree && *r.vlm_label != r.involvement;
}

}  // namespace

void validate_templates(TemplateDb& db, VlmClient& client, ValidationState& state, const ValidationOptions& options) {
  if (options.runs < 1) throw ConfigError("validation runs must be >= 1");
  state.labels.resize(db.records.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < db.records.size(); ++i) {
    if (!state.labels[i]) todo.push_back(i);
  }
  const std::size_t width = std::max<std::size_t>(1, options.max_in_flight);
  for (std::size_t start = 0; start < todo.size(); start += width) {
    const std::size_t end = std::min(todo.size(), start + width);
    std::vector<std::future<std::vector<int>>> inflight;
    for (std::size_t k = start; k < end; ++k) {
      const auto& record = db.records[todo[k]];
      inflight.push_back(std::async(width == 1 ? std::launch::deferred : std::launch::async,
                                    [&record, &client, &options] { return classify_runs(record, client, options); }));
    }
    std::exception_ptr failure;
    for (std::size_t k = start; k < end; ++k) {
      try {
        state.labels[todo[k]] = inflight[k - start].get();
      } catch (...) {
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
  }
  for (std::size_t i = 0; i < db.records.size(); ++i) apply_labels(db.records[i], *state.labels[i]);
}

double mock_agreement_probability(double p, int runs) {
  const double wrong = p / static_cast<double>(kInvolvementClasses - 1);
  return std::pow(1.0 - p, runs) + static_cast<double>(kInvolvementClasses - 1) * std::pow(wrong, runs);
}

std::vector<HistogramBin> similarity_histogram(std::span<const double> similarity, std::span<const double> gain,
                                               double lo, double hi, double width) {
  if (similarity.size() != gain.size()) throw ShapeError("similarity_histogram: similarity and gain lengths differ");
  if (!(width > 0.0) || !(hi > lo)) throw ConfigError("similarity_histogram: need hi > lo and width > 0");
  const auto n = static_cast<std::size_t>(std::llround(std::ceil((hi - lo) / width - 1e-9)));
  std::vector<HistogramBin> bins(n);
  std::vector<double> sums(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    bins[b].lo = lo + width * static_cast<double>(b);
    bins[b].hi = std::min(hi, lo + width * static_cast<double>(b + 1));
  }
  for (std::size_t i = 0; i < similarity.size(); ++i) {
    // Small tolerance so values like 0.3 land in [0.3, 0.4) despite rounding.
    const double pos = (similarity[i] - lo) / width + 1e-9;
    auto b = pos < 0.0 ? std::size_t{0} : static_cast<std::size_t>(std::floor(pos));
    b = std::min(b, n - 1);
    ++bins[b].count;
    sums[b] += gain[i];
  }
  for (std::size_t b = 0; b < n; ++b) {
    if (bins[b].count) bins[b].mean_gain = sums[b] / static_cast<double>(bins[b].count);
  }
  return bins;
}

}  // namespace ehicl

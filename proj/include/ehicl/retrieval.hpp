// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ehicl/error.hpp"
#include "ehicl/hand_model.hpp"
#include "ehicl/random.hpp"

namespace ehicl {

/// Hand-involvement classes. The enumeration is closed.
enum class Involvement : int { left_only = 0, right_only = 1, both = 2, none = 3 };

inline constexpr std::size_t kInvolvementClasses = 4;
const char* involvement_name(Involvement c);
Involvement involvement_from_int(int v);  // ConfigError outside 0..3
bool has_left(Involvement c);
bool has_right(Involvement c);

/// A reply parses iff, after trimming whitespace, it is exactly one of the
/// integers 0-3. Anything else ("-1", "both hands", "2.") is malformed.
std::optional<Involvement> parse_involvement(std::string_view reply);

enum class PromptStyle { description, reasoning };
const char* prompt_style_name(PromptStyle s);
PromptStyle prompt_style_from_string(std::string_view s);

struct VlmRequest {
  std::string system_prompt;  // may be empty
  std::string user_prompt;
  std::string image_ref;
};

struct VlmResponse {
  std::string text;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& endpoint, const std::string& what)
      : Error("VLM transport failure at " + endpoint + ": " + what), endpoint_(endpoint) {}
  const std::string& endpoint() const { return endpoint_; }

 private:
  std::string endpoint_;
};

class ClassificationError : public Error {
 public:
  using Error::Error;
};

class DescriptionError : public Error {
 public:
  using Error::Error;
};

class VlmClient {
 public:
  virtual ~VlmClient() = default;
  /// Must be safe to call from several threads at once.
  virtual VlmResponse complete(const VlmRequest& request) = 0;
};

VlmRequest classification_request(const std::string& image_ref);
VlmRequest description_request(const std::string& image_ref, PromptStyle style);

struct Classification {
  Involvement label = Involvement::none;
  std::vector<std::string> raw_replies;  // every reply, malformed ones included
};

/// Retries malformed replies up to `max_retries` extra times, then throws
/// ClassificationError. TransportError propagates unchanged.
Classification classify_involvement(const std::string& image_ref, VlmClient& client, int max_retries = 2);

/// One-sentence description; DescriptionError on an empty reply.
std::string describe(const std::string& image_ref, PromptStyle style, VlmClient& client);

/// What the mock "sees" in an image.
struct ImageMetadata {
  Involvement involvement = Involvement::none;
  std::string object;  // "cup"
  std::string verb;    // gerund, "grasping"
  std::string pose;    // "curled fingers"
};

struct MockVlmOptions {
  std::uint64_t seed = 0;
  /// Probability that a classification reply is replaced by a uniformly
  /// drawn different class.
  double flip_probability = 0.0;
  /// Throw TransportError on every call after this many successful ones.
  std::optional<std::size_t> fail_after;
};

/// Deterministic stand-in for a hosted VLM. The flip decision for a call is
/// a function of (seed, image_ref, how many times that image was asked
/// before), so results do not depend on call interleaving across images.
class MockVlmClient : public VlmClient {
 public:
  explicit MockVlmClient(MockVlmOptions options = {});

  void register_image(const std::string& image_ref, ImageMetadata metadata);
  /// Replies returned verbatim, in order, before normal behaviour resumes.
  void script_replies(const std::string& image_ref, std::vector<std::string> replies);

  VlmResponse complete(const VlmRequest& request) override;

  std::size_t calls() const;
  void set_fail_after(std::optional<std::size_t> n);

 private:
  MockVlmOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, ImageMetadata> images_;
  std::map<std::string, std::vector<std::string>> scripted_;
  std::map<std::string, std::uint64_t> per_image_calls_;
  std::size_t calls_ = 0;
};

std::string mock_description(const ImageMetadata& m, PromptStyle style);

struct HttpVlmOptions {
  std::string base_url = "http://127.0.0.1:8000/v1";
  std::string api_key;
  std::string model = "qwen-vl";
  std::chrono::milliseconds timeout{30000};
  int retries = 2;

  /// Base URL and key from EHICL_VLM_URL / EHICL_VLM_KEY when set.
  static HttpVlmOptions from_env();
  static HttpVlmOptions from_env(HttpVlmOptions defaults);
};

/// Chat-completions client: POST {base_url}/chat/completions with the system
/// prompt as a system message and a user message of text plus image_url
/// parts. The reply is the first text segment of the first choice.
class HttpVlmClient : public VlmClient {
 public:
  explicit HttpVlmClient(HttpVlmOptions options);
  VlmResponse complete(const VlmRequest& request) override;
  static std::string request_body(const HttpVlmOptions& options, const VlmRequest& request);
  static std::string parse_reply(const std::string& body);

 private:
  HttpVlmOptions options_;
};

inline constexpr std::size_t kTextEmbeddingDim = 256;

/// Hashed bag of tokens: lowercase, split on anything not alphanumeric,
/// FNV-1a 64 of each token mod 256, counts, L2-normalized. Error when the
/// text holds no token.
std::vector<double> embed_text(std::string_view text);
std::size_t token_bucket(std::string_view token);
std::vector<std::string> tokenize(std::string_view text);

/// Error on a zero vector or mismatched lengths.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Hand slots in fixed order.
enum HandSlot : std::size_t { kLeftSlot = 0, kRightSlot = 1 };

struct TemplateRecord {
  std::string id;
  Involvement involvement = Involvement::none;
  std::string description;
  std::vector<double> text_embedding;
  std::array<std::optional<HandParams>, 2> coarse;  // absent where undetected
  std::array<std::optional<HandParams>, 2> gt;
  std::vector<double> image_features;
  bool validated = false;
  /// Agreed VLM label differs from the stored class; kept for audit, not used
  /// as an exemplar.
  bool label_conflict = false;
  std::optional<Involvement> vlm_label;

  bool usable() const { return validated && !label_conflict; }
};

struct TemplateDb {
  std::vector<TemplateRecord> records;

  std::size_t usable_count() const;
  /// Directory layout: manifest.json plus records/<index>.bin blobs.
  void save(const std::filesystem::path& dir) const;
  static TemplateDb load(const std::filesystem::path& dir);
};

enum class RetrievalStrategy { visual, textual, combined };
const char* strategy_name(RetrievalStrategy s);
RetrievalStrategy strategy_from_string(std::string_view s);

struct RetrievalQuery {
  std::string id;
  Involvement involvement = Involvement::none;
  std::vector<double> text_embedding;
};

struct RetrievalResult {
  std::size_t index = 0;
  double similarity = 0.0;  // description cosine to the query
  bool fallback = false;    // empty class bucket, global argmax used
};

using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

/// Exactly one usable record, never the query itself (matched by id).
/// visual: uniform draw from the query's class, using `rng`.
/// textual: argmax description cosine over the whole pool.
/// combined: argmax cosine within the query's class.
/// An empty class bucket falls back to textual with a warning. Ties go to
/// the lowest index. DataError when no usable record exists.
RetrievalResult retrieve_template(const RetrievalQuery& query, const TemplateDb& db,
                                  RetrievalStrategy strategy, RandomStream& rng);

struct ValidationOptions {
  int runs = 3;
  int max_retries = 2;
  std::size_t max_in_flight = 1;
};

/// Progress of a validation pass. Completed records keep their labels when
/// a later call resumes after a client failure.
struct ValidationState {
  std::vector<std::optional<std::vector<int>>> labels;  // per record; -1 = classification failure
  std::size_t completed() const;
};

/// Classifies every record `runs` times. validated iff all runs agree.
/// Records with validation already recorded in `state` are skipped. Client
/// failures propagate after every finished record has been stored.
void validate_templates(TemplateDb& db, VlmClient& client, ValidationState& state,
                        const ValidationOptions& options = {});

/// Three-run agreement probability of MockVlmClient at flip rate p:
/// all correct, or all flipped onto the same wrong class.
double mock_agreement_probability(double p, int runs = 3);

struct HistogramBin {
  double lo = 0, hi = 0;
  std::size_t count = 0;
  double mean_gain = 0.0;  // 0 when empty
};

/// Fixed-width bins over [lo, hi]; the right edge is closed on the last bin.
/// Values outside the range are clamped into the edge bins.
std::vector<HistogramBin> similarity_histogram(std::span<const double> similarity, std::span<const double> gain,
                                               double lo = -1.0, double hi = 1.0, double width = 0.1);

}  // namespace ehicl

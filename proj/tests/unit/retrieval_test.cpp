// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <thread>

#include "ehicl/prompts.hpp"
#include "ehicl/retrieval.hpp"
#include "support/naive_lbs.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>
#include <json.hpp>

namespace ehicl {
namespace {

using testing::random_params;

MockVlmOptions flipping(std::uint64_t seed, double p) {
  MockVlmOptions o;
  o.seed = seed;
  o.flip_probability = p;
  return o;
}

const std::vector<std::string> kNouns = {"cup", "phone", "book", "knife", "box", "bottle", "pen", "laptop", "ball"};
const std::vector<std::string> kVerbs = {"grasping", "holding", "touching", "pointing at", "resting on", "lifting"};

ImageMetadata random_meta(RandomStream& rng, Involvement c) {
  return {c, kNouns[rng.below(kNouns.size())], kVerbs[rng.below(kVerbs.size())], "curled fingers"};
}

TemplateRecord make_record(RandomStream& rng, std::size_t i, Involvement c, bool validated = true) {
  TemplateRecord r;
  r.id = "tpl-" + std::to_string(i);
  r.involvement = c;
  r.description = mock_description(random_meta(rng, c), PromptStyle::description);
  r.text_embedding = embed_text(r.description);
  r.validated = validated;
  r.vlm_label = c;
  r.image_features = {rng.normal(), rng.normal(), rng.normal()};
  return r;
}

TemplateDb random_db(RandomStream& rng, std::size_t n) {
  TemplateDb db;
  for (std::size_t i = 0; i < n; ++i) db.records.push_back(make_record(rng, i, involvement_from_int(int(rng.below(4)))));
  return db;
}

class SilenceWarnings : public ::testing::Test {
 protected:
  void SetUp() override {
    set_warning_sink([this](const std::string& m) { warnings.push_back(m); });
  }
  void TearDown() override { set_warning_sink(nullptr); }
  std::vector<std::string> warnings;
};

TEST(Involvement, ParserAcceptsExactlyTheFourLabels) {
  EXPECT_EQ(parse_involvement("2"), Involvement::both);
  EXPECT_EQ(parse_involvement(" 0\n"), Involvement::left_only);
  EXPECT_EQ(parse_involvement("3"), Involvement::none);
  for (const char* bad : {"both hands", "-1", "4", "2.", "12", "", "  ", "1 2"}) {
    EXPECT_FALSE(parse_involvement(bad).has_value()) << bad;
  }
  EXPECT_THROW(involvement_from_int(-1), ConfigError);
  EXPECT_TRUE(has_left(Involvement::both) && has_right(Involvement::both));
  EXPECT_FALSE(has_left(Involvement::right_only) || has_right(Involvement::none));
}

TEST(Prompts, RequestsCarryStoredPromptTexts) {
  const auto c = classification_request("img");
  EXPECT_EQ(c.system_prompt, prompts::kClassifySystem);
  EXPECT_EQ(c.user_prompt, prompts::kClassifyUser);
  EXPECT_EQ(c.image_ref, "img");
  EXPECT_NE(prompts::kClassifySystem.find("You are an image understanding agent."), std::string_view::npos);
  EXPECT_NE(prompts::kClassifySystem.find("one of [0, 1, 2, -1]"), std::string_view::npos);
  const auto d = description_request("img", PromptStyle::description);
  const auto r = description_request("img", PromptStyle::reasoning);
  EXPECT_NE(d.user_prompt, r.user_prompt);
  EXPECT_NE(prompts::kDescribeDescriptionUser.find("\"No hand involvement.\""), std::string_view::npos);
}

TEST(Classify, MockPassesGroundTruthThrough) {
  MockVlmClient mock;
  mock.register_image("a", {Involvement::left_only, "cup", "grasping", "open palm"});
  const auto c = classify_involvement("a", mock);
  EXPECT_EQ(c.label, Involvement::left_only);
  ASSERT_EQ(c.raw_replies.size(), 1u);
  EXPECT_EQ(c.raw_replies[0], "0");
}

TEST(Classify, FullFlipRateNeverReturnsTruthAndFailsValidation) {
  MockVlmClient mock(flipping(5, 1.0));
  TemplateDb db;
  RandomStream rng(5);
  for (std::size_t i = 0; i < 200; ++i) {
    db.records.push_back(make_record(rng, i, involvement_from_int(int(i % 4)), false));
    mock.register_image(db.records.back().id, random_meta(rng, db.records.back().involvement));
  }
  for (const auto& r : db.records) EXPECT_NE(classify_involvement(r.id, mock).label, r.involvement);
  ValidationState state;
  validate_templates(db, mock, state);
  for (const auto& r : db.records) {
    EXPECT_FALSE(r.usable()) << r.id;
    // A consistent wrong label is kept for audit as a conflict.
    if (r.validated) {
      EXPECT_TRUE(r.label_conflict);
    }
  }
}

TEST(Classify, MalformedRepliesAreRetriedThenFail) {
  MockVlmClient mock;
  mock.register_image("a", {Involvement::both, "box", "lifting", ""});
  mock.script_replies("a", {"both hands", "-1"});
  const auto c = classify_involvement("a", mock, 2);
  EXPECT_EQ(c.label, Involvement::both);
  EXPECT_EQ(c.raw_replies, (std::vector<std::string>{"both hands", "-1", "2"}));

  mock.script_replies("a", {"x", "y", "z"});
  EXPECT_THROW(classify_involvement("a", mock, 2), ClassificationError);
}

TEST(Classify, TransportErrorsNameTheEndpoint) {
  MockVlmOptions down;
  down.fail_after = 0;
  MockVlmClient mock(down);
  mock.register_image("a", {});
  try {
    classify_involvement("a", mock);
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.endpoint(), "mock://vlm");
  }
}

TEST(Describe, MockFillsTemplates) {
  MockVlmClient mock;
  mock.register_image("r", {Involvement::right_only, "cup", "grasping", "curled fingers"});
  mock.register_image("n", {Involvement::none, "", "", ""});
  EXPECT_EQ(describe("r", PromptStyle::description, mock), "Right hand grasping a cup.");
  EXPECT_EQ(describe("n", PromptStyle::description, mock), "No hand involvement.");
  EXPECT_NE(describe("r", PromptStyle::reasoning, mock), describe("r", PromptStyle::description, mock));
  mock.script_replies("r", {"  "});
  EXPECT_THROW(describe("r", PromptStyle::description, mock), DescriptionError);
}

TEST(Embedding, DeterministicUnitNorm) {
  const auto a = embed_text("Left hand grasping a cup.");
  EXPECT_EQ(a, embed_text("Left hand grasping a cup."));
  EXPECT_EQ(a, embed_text("left HAND, grasping a cup"));
  double n = 0.0;
  for (double x : a) n += x * x;
  EXPECT_NEAR(n, 1.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-12);
  EXPECT_THROW(embed_text(" .,! "), Error);
  EXPECT_EQ(tokenize("Both hands, holding-a book."),
            (std::vector<std::string>{"both", "hands", "holding", "a", "book"}));
}

TEST(Embedding, DisjointTokensWithoutCollisionsAreOrthogonal) {
  // Oracle: compute the buckets and pick tokens whose buckets are disjoint.
  const std::vector<std::string> left = {"left", "hand", "grasping", "cup"};
  std::set<std::size_t> used;
  for (const auto& t : left) used.insert(token_bucket(t));
  std::vector<std::string> right;
  for (const char* cand : {"right", "palm", "pointing", "phone", "keyboard", "book", "resting"}) {
    if (!used.count(token_bucket(cand)) && right.size() < 4) right.push_back(cand);
  }
  ASSERT_EQ(right.size(), 4u);
  std::string a, b;
  for (const auto& t : left) a += t + " ";
  for (const auto& t : right) b += t + " ";
  EXPECT_EQ(cosine_similarity(embed_text(a), embed_text(b)), 0.0);

  // Explicit bucket layout.
  const auto e = embed_text(a);
  for (std::size_t k = 0; k < kTextEmbeddingDim; ++k) EXPECT_EQ(e[k] != 0.0, used.count(k) == 1) << k;
}

TEST(Cosine, AnalyticValues) {
  const std::vector<double> x{1, 0}, y{0, 1}, d{1 / std::sqrt(2.0), 1 / std::sqrt(2.0)};
  EXPECT_DOUBLE_EQ(cosine_similarity(x, x), 1.0);
  EXPECT_EQ(cosine_similarity(x, y), 0.0);
  EXPECT_NEAR(cosine_similarity(x, d), 0.70711, 1e-5);
  EXPECT_NEAR(cosine_similarity(x, std::vector<double>{1, 1}), 1 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine_similarity(x, std::vector<double>{0, 0}), Error);
  EXPECT_THROW(cosine_similarity(x, std::vector<double>{1, 0, 0}), ShapeError);
}

TEST_F(SilenceWarnings, TextualReturnsExactDuplicate) {
  RandomStream rng(3);
  TemplateDb db = random_db(rng, 50);
  db.records[17].description = "Both hands juggling a pineapple.";
  db.records[17].text_embedding = embed_text(db.records[17].description);
  const RetrievalQuery q{"query", Involvement::left_only, embed_text("Both hands juggling a pineapple.")};
  const auto r = retrieve_template(q, db, RetrievalStrategy::textual, rng);
  EXPECT_EQ(r.index, 17u);
  EXPECT_NEAR(r.similarity, 1.0, 1e-12);
}

TEST_F(SilenceWarnings, QueryIsExcludedAndOnlyUsableRecordsReturned) {
  RandomStream rng(4);
  TemplateDb db = random_db(rng, 40);
  for (std::size_t i = 0; i < db.records.size(); i += 3) db.records[i].validated = false;
  db.records[1].label_conflict = true;
  for (std::size_t i = 0; i < db.records.size(); ++i) {
    const auto& self = db.records[i];
    const RetrievalQuery q{self.id, self.involvement, self.text_embedding};
    for (auto s : {RetrievalStrategy::visual, RetrievalStrategy::textual, RetrievalStrategy::combined}) {
      const auto r = retrieve_template(q, db, s, rng);
      EXPECT_NE(r.index, i);
      EXPECT_TRUE(db.records[r.index].usable());
    }
  }
  TemplateDb none;
  none.records.push_back(make_record(rng, 0, Involvement::both, false));
  EXPECT_THROW(retrieve_template({"q", Involvement::both, embed_text("x")}, none, RetrievalStrategy::visual, rng),
               DataError);
}

TEST_F(SilenceWarnings, ClassFilterHoldsForAllNonemptyBuckets) {
  RandomStream rng(6);
  const TemplateDb db = random_db(rng, 300);
  std::size_t checked = 0;
  for (int k = 0; k < 400; ++k) {
    const auto c = involvement_from_int(int(rng.below(4)));
    const RetrievalQuery q{"q" + std::to_string(k), c, embed_text(mock_description(random_meta(rng, c), PromptStyle::description))};
    for (auto s : {RetrievalStrategy::visual, RetrievalStrategy::combined}) {
      const auto r = retrieve_template(q, db, s, rng);
      EXPECT_FALSE(r.fallback);
      EXPECT_EQ(db.records[r.index].involvement, c);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 800u);
  EXPECT_TRUE(warnings.empty());
}

TEST_F(SilenceWarnings, EmptyBucketFallsBackWithWarning) {
  RandomStream rng(7);
  TemplateDb db;
  for (std::size_t i = 0; i < 10; ++i) db.records.push_back(make_record(rng, i, Involvement::both));
  const RetrievalQuery q{"q", Involvement::none, embed_text("No hand involvement.")};
  const auto r = retrieve_template(q, db, RetrievalStrategy::visual, rng);
  EXPECT_TRUE(r.fallback);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("none"), std::string::npos);
  RandomStream other(99);
  EXPECT_EQ(r.index, retrieve_template(q, db, RetrievalStrategy::textual, other).index);
}

TEST_F(SilenceWarnings, TextualArgmaxMatchesBruteForceScan) {
  RandomStream rng(8);
  TemplateDb db = random_db(rng, 1000);
  for (std::size_t i = 0; i < db.records.size(); i += 7) db.records[i].validated = false;
  for (int k = 0; k < 200; ++k) {
    const auto c = involvement_from_int(int(rng.below(4)));
    const auto text = mock_description(random_meta(rng, c), PromptStyle::reasoning);
    const RetrievalQuery q{k % 5 == 0 ? db.records[k].id : "q", c, embed_text(text)};

    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t i = 0; i < db.records.size(); ++i) {
      const auto& r = db.records[i];
      if (!r.validated || r.label_conflict || r.id == q.id) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < kTextEmbeddingDim; ++j) dot += q.text_embedding[j] * r.text_embedding[j];
      if (dot > best_sim + 1e-12) {
        best_sim = dot;
        best = i;
      }
    }
    const auto got = retrieve_template(q, db, RetrievalStrategy::textual, rng);
    EXPECT_NEAR(got.similarity, best_sim, 1e-12);
    EXPECT_EQ(got.index, best);
  }
}

TEST_F(SilenceWarnings, RetrievalIsDeterministicPerSeed) {
  RandomStream gen(9);
  const TemplateDb db = random_db(gen, 120);
  std::vector<RetrievalQuery> queries;
  for (int k = 0; k < 50; ++k) {
    const auto c = involvement_from_int(int(gen.below(4)));
    queries.push_back({"q", c, embed_text(mock_description(random_meta(gen, c), PromptStyle::description))});
  }
  for (auto s : {RetrievalStrategy::visual, RetrievalStrategy::textual, RetrievalStrategy::combined}) {
    RandomStream a(42), b(42);
    for (const auto& q : queries) EXPECT_EQ(retrieve_template(q, db, s, a).index, retrieve_template(q, db, s, b).index);
  }
}

TEST(Validation, NoFlipsValidatesEverything) {
  RandomStream rng(10);
  TemplateDb db;
  MockVlmClient mock;
  for (std::size_t i = 0; i < 100; ++i) {
    db.records.push_back(make_record(rng, i, involvement_from_int(int(i % 4)), false));
    mock.register_image(db.records.back().id, random_meta(rng, db.records.back().involvement));
  }
  ValidationState state;
  validate_templates(db, mock, state);
  EXPECT_EQ(db.usable_count(), 100u);
  EXPECT_EQ(mock.calls(), 300u);
}

TEST(Validation, InconsistentRunsAreNotValidatedButKept) {
  TemplateDb db;
  RandomStream rng(11);
  db.records.push_back(make_record(rng, 0, Involvement::left_only, false));
  MockVlmClient mock;
  mock.register_image(db.records[0].id, {});
  mock.script_replies(db.records[0].id, {"0", "0", "1"});
  ValidationState state;
  validate_templates(db, mock, state);
  ASSERT_EQ(db.records.size(), 1u);
  EXPECT_FALSE(db.records[0].validated);
  EXPECT_FALSE(db.records[0].vlm_label.has_value());
  EXPECT_EQ(*state.labels[0], (std::vector<int>{0, 0, 1}));
}

double enumerated_agreement(double p) {
  // Per run: truth with 1-p, each of the 3 wrong labels with p/3.
  std::array<double, 4> dist{1 - p, p / 3, p / 3, p / 3};
  double agree = 0.0;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 4; ++c)
        if (a == b && b == c) agree += dist[a] * dist[b] * dist[c];
  return agree;
}

TEST(Validation, HalfFlipRateMatchesEnumeratedAgreement) {
  const double expected = enumerated_agreement(0.5);
  EXPECT_NEAR(mock_agreement_probability(0.5), expected, 1e-15);
  RandomStream rng(12);
  TemplateDb db;
  MockVlmClient mock(flipping(12, 0.5));
  for (std::size_t i = 0; i < 10000; ++i) {
    TemplateRecord r;
    r.id = "img-" + std::to_string(i);
    r.involvement = involvement_from_int(int(rng.below(4)));
    db.records.push_back(r);
    mock.register_image(r.id, {r.involvement, "cup", "holding", ""});
  }
  ValidationState state;
  validate_templates(db, mock, state, {.max_in_flight = 4});
  std::size_t validated = 0;
  for (const auto& r : db.records) validated += r.validated;
  EXPECT_NEAR(double(validated) / 10000.0, expected, 0.03);
}

TEST(Validation, ResumesAfterClientFailure) {
  RandomStream rng(13);
  TemplateDb db, reference;
  MockVlmOptions failing = flipping(3, 0.3);
  failing.fail_after = 40;
  MockVlmClient mock(failing);
  MockVlmClient clean(flipping(3, 0.3));
  for (std::size_t i = 0; i < 30; ++i) {
    db.records.push_back(make_record(rng, i, involvement_from_int(int(i % 4)), false));
    const auto meta = random_meta(rng, db.records.back().involvement);
    mock.register_image(db.records.back().id, meta);
    clean.register_image(db.records.back().id, meta);
  }
  reference = db;
  ValidationState state;
  EXPECT_THROW(validate_templates(db, mock, state), TransportError);
  EXPECT_EQ(state.completed(), 13u);  // 40 calls cover 13 full records
  const ValidationState partial = state;
  mock.set_fail_after(std::nullopt);  // also resets the call counter
  validate_templates(db, mock, state);
  EXPECT_EQ(state.completed(), 30u);
  // Finished records are kept, only the remaining 17 are asked again.
  EXPECT_EQ(mock.calls(), 17u * 3u);
  for (std::size_t i = 0; i < 13; ++i) EXPECT_EQ(*state.labels[i], *partial.labels[i]) << i;

  ValidationState ref_state;
  validate_templates(reference, clean, ref_state);
  for (std::size_t i = 0; i < 13; ++i) {
    EXPECT_EQ(*state.labels[i], *ref_state.labels[i]) << i;
    EXPECT_EQ(db.records[i].validated, reference.records[i].validated);
  }
}

TEST(Validation, ConcurrentCallsGiveTheSameLabels) {
  RandomStream rng(14);
  TemplateDb a;
  for (std::size_t i = 0; i < 64; ++i) a.records.push_back(make_record(rng, i, involvement_from_int(int(i % 4)), false));
  TemplateDb b = a;
  MockVlmClient ma(flipping(1, 0.4)), mb(flipping(1, 0.4));
  for (const auto& r : a.records) {
    ma.register_image(r.id, {r.involvement, "", "", ""});
    mb.register_image(r.id, {r.involvement, "", "", ""});
  }
  ValidationState sa, sb;
  validate_templates(a, ma, sa, {.max_in_flight = 1});
  validate_templates(b, mb, sb, {.max_in_flight = 8});
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(*sa.labels[i], *sb.labels[i]);
}

TEST(TemplateDbFiles, RoundTrip) {
  RandomStream rng(15);
  TemplateDb db = random_db(rng, 6);
  db.records[0].gt[kRightSlot] = random_params(rng, Side::right);
  db.records[0].coarse[kRightSlot] = random_params(rng, Side::right);
  db.records[2].gt[kLeftSlot] = random_params(rng, Side::left);
  db.records[2].coarse[kLeftSlot] = random_params(rng, Side::left);
  db.records[3].label_conflict = true;
  db.records[3].vlm_label = Involvement::none;
  db.records[4].vlm_label.reset();
  const auto dir = std::filesystem::temp_directory_path() / "ehicl_tpl_roundtrip";
  std::filesystem::remove_all(dir);
  db.save(dir);
  const TemplateDb back = TemplateDb::load(dir);
  ASSERT_EQ(back.records.size(), db.records.size());
  for (std::size_t i = 0; i < db.records.size(); ++i) {
    const auto& x = db.records[i];
    const auto& y = back.records[i];
    EXPECT_EQ(x.id, y.id);
    EXPECT_EQ(x.involvement, y.involvement);
    EXPECT_EQ(x.description, y.description);
    EXPECT_EQ(x.text_embedding, y.text_embedding);
    EXPECT_EQ(x.image_features, y.image_features);
    EXPECT_EQ(x.coarse, y.coarse);
    EXPECT_EQ(x.gt, y.gt);
    EXPECT_EQ(x.validated, y.validated);
    EXPECT_EQ(x.label_conflict, y.label_conflict);
    EXPECT_EQ(x.vlm_label, y.vlm_label);
  }
  std::filesystem::remove(dir / "records" / "2.bin");
  EXPECT_THROW(TemplateDb::load(dir), Error);
  std::filesystem::remove_all(dir);
}

TEST(Histogram, MatchesHandBinnedFixture) {
  const std::vector<double> sim{0.95, 0.91, 0.85, 0.72, 0.30, 0.31, -0.05, -1.0, 1.0, 0.86};
  const std::vector<double> gain{1.0, 2.0, 4.0, -1.0, 0.5, 1.5, 3.0, 7.0, 3.0, 2.0};
  const auto bins = similarity_histogram(sim, gain);
  ASSERT_EQ(bins.size(), 20u);
  // Hand binning: bin b covers [-1 + 0.1 b, -1 + 0.1 (b + 1)), last bin closed.
  std::map<std::size_t, std::pair<std::size_t, double>> expected{
      {0, {1, 7.0}}, {9, {1, 3.0}}, {13, {2, 1.0}}, {17, {1, -1.0}}, {18, {2, 3.0}}, {19, {3, 2.0}}};
  std::size_t total = 0;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    EXPECT_NEAR(bins[b].lo, -1.0 + 0.1 * double(b), 1e-12);
    total += bins[b].count;
    const auto it = expected.find(b);
    if (it == expected.end()) {
      EXPECT_EQ(bins[b].count, 0u) << b;
      EXPECT_EQ(bins[b].mean_gain, 0.0);
    } else {
      EXPECT_EQ(bins[b].count, it->second.first) << b;
      EXPECT_NEAR(bins[b].mean_gain, it->second.second, 1e-12) << b;
    }
  }
  EXPECT_EQ(total, 10u);
  EXPECT_THROW(similarity_histogram(sim, std::vector<double>{1.0}), ShapeError);
}

TEST(HttpClient, LoopbackRequestShape) {
  httplib::Server server;
  nlohmann::json seen;
  std::string auth;
  int failures_left = 1;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (failures_left-- > 0) {
      res.status = 503;
      return;
    }
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", " 2 "}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpVlmOptions opts;
  opts.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1/";
  opts.api_key = "secret";
  opts.model = "test-model";
  opts.timeout = std::chrono::milliseconds(5000);
  HttpVlmClient client(opts);
  const auto c = classify_involvement("file:///frames/0001.jpg", client);
  EXPECT_EQ(c.label, Involvement::both);
  EXPECT_EQ(auth, "Bearer secret");
  EXPECT_EQ(seen["model"], "test-model");
  ASSERT_EQ(seen["messages"].size(), 2u);
  EXPECT_EQ(seen["messages"][0]["role"], "system");
  EXPECT_EQ(seen["messages"][0]["content"], std::string(prompts::kClassifySystem));
  EXPECT_EQ(seen["messages"][1]["content"][0]["text"], std::string(prompts::kClassifyUser));
  EXPECT_EQ(seen["messages"][1]["content"][1]["image_url"]["url"], "file:///frames/0001.jpg");

  server.stop();
  worker.join();
  opts.retries = 0;
  HttpVlmClient dead(opts);
  try {
    dead.complete(classification_request("x"));
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_NE(e.endpoint().find("/v1/chat/completions"), std::string::npos);
  }
}

TEST(HttpClient, ReplyParsing) {
  EXPECT_EQ(HttpVlmClient::parse_reply(R"({"choices":[{"message":{"content":"3"}}]})"), "3");
  EXPECT_EQ(HttpVlmClient::parse_reply(
                R"({"choices":[{"message":{"content":[{"type":"image_url"},{"type":"text","text":"1"}]}}]})"),
            "1");
  EXPECT_THROW(HttpVlmClient::parse_reply("{}"), Error);
  EXPECT_THROW(HttpVlmClient::parse_reply("not json"), Error);
}

TEST(HttpClient, EnvironmentOverridesEndpoint) {
  ::setenv("EHICL_VLM_URL", "http://example.invalid:9/v1", 1);
  ::setenv("EHICL_VLM_KEY", "k", 1);
  const auto o = HttpVlmOptions::from_env();
  EXPECT_EQ(o.base_url, "http://example.invalid:9/v1");
  EXPECT_EQ(o.api_key, "k");
  ::unsetenv("EHICL_VLM_URL");
  ::unsetenv("EHICL_VLM_KEY");
  EXPECT_EQ(HttpVlmOptions::from_env().base_url, HttpVlmOptions{}.base_url);
}

}  // namespace
}  // namespace ehicl

// SPDX-License-Identifier: Apache-2.0
// ehicl: corpus generation, template validation, training, evaluation and
// reporting over one output directory.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ehicl/error.hpp"
#include "ehicl/harness.hpp"

namespace fs = std::filesystem;
using namespace ehicl;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string profile = "desk";
  std::vector<std::string> overrides;
  std::string vlm = "mock";
};

RunConfig resolve_config(const Globals& g, bool prefer_saved) {
  const RunPaths paths{g.out};
  RunConfig base = g.profile == "paper" ? RunConfig{} : RunConfig::desk();
  RunConfig c = base;
  if (!g.config_path.empty()) {
    c = RunConfig::load(g.config_path, base);
  } else if (prefer_saved && fs::exists(paths.config())) {
    c = RunConfig::load(paths.config(), base);
  }
  if (g.seed) c.seed = *g.seed;
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

std::unique_ptr<VlmClient> make_client(const Globals& g, const Corpus& corpus, const RunConfig& c) {
  if (g.vlm == "live") return std::make_unique<HttpVlmClient>(HttpVlmOptions::from_env());
  return make_mock_vlm(corpus, c);
}

Corpus load_corpus(const RunPaths& paths) {
  if (!fs::exists(paths.corpus())) throw DataError("no corpus at " + paths.corpus().string() + "; run gen-data first");
  return Corpus::load(paths.corpus());
}

HandRig load_or_build_rig(const RunPaths& paths, const RunConfig& c) {
  if (fs::exists(paths.rig())) return load_rig(paths.rig());
  return build_rig(c.rig_seed);
}

void print_epoch(const EpochLog& e) {
  std::printf("epoch %3zu  loss %s  hands %zu  val_p_mpvpe %s\n", e.epoch, format_fixed(e.loss, 6).c_str(),
              e.supervised_hands, format_fixed(e.val_p_mpvpe, 3).c_str());
  std::fflush(stdout);
}

int cmd_gen_data(const Globals& g) {
  const RunConfig c = resolve_config(g, false);
  const RunPaths paths{g.out};
  fs::create_directories(paths.root);
  c.save(paths.config());
  const HandRig rig = build_rig(c.rig_seed);
  save_rig(rig, paths.rig());
  const Corpus corpus = generate_corpus(c, rig);
  corpus.save(paths.corpus());
  auto client = make_client(g, corpus, c);
  build_template_db(corpus, *client, c).save(paths.templates());
  std::printf("%zu samples (%zu train, %zu val, %zu test) -> %s\n", corpus.samples.size(),
              corpus.indices(Split::train).size(), corpus.indices(Split::val).size(),
              corpus.indices(Split::test).size(), paths.root.string().c_str());
  return 0;
}

int cmd_validate(const Globals& g) {
  const RunConfig c = resolve_config(g, true);
  const RunPaths paths{g.out};
  const Corpus corpus = load_corpus(paths);
  TemplateDb db = TemplateDb::load(paths.templates());
  auto client = make_client(g, corpus, c);
  ValidationState state;
  try {
    validate_templates(db, *client, state, {c.validation_runs, 2, 1});
  } catch (const TransportError&) {
    db.save(paths.templates());  // keep the finished records
    throw;
  }
  db.save(paths.templates());
  std::size_t conflicts = 0;
  for (const auto& r : db.records) conflicts += r.label_conflict;
  std::printf("%zu of %zu templates usable, %zu label conflicts\n", db.usable_count(), db.records.size(), conflicts);
  return 0;
}

int cmd_train(const Globals& g) {
  const RunConfig c = resolve_config(g, true);
  const RunPaths paths{g.out};
  const Corpus corpus = load_corpus(paths);
  const TemplateDb db = TemplateDb::load(paths.templates());
  const HandRig rig = load_or_build_rig(paths, c);
  auto client = make_client(g, corpus, c);
  const TrainResult r = train(c, corpus, db, *client, rig, print_epoch);
  save_checkpoint(paths.checkpoint(), r.best);
  std::ofstream(paths.loss_curve(), std::ios::binary) << loss_curve_csv(r.curve);
  std::printf("best epoch %zu, val P-MPVPE %s mm -> %s\n", r.best_epoch, format_fixed(r.best_val, 3).c_str(),
              paths.checkpoint().string().c_str());
  return 0;
}

int cmd_eval(const Globals& g, const std::string& split_name_arg, const std::string& checkpoint,
             const std::string& keypoints) {
  const RunPaths paths{g.out};
  if (!keypoints.empty()) {
    const auto samples = read_keypoints(keypoints);
    nlohmann::json j{{"general", evaluate_keypoints(samples, Setting::general).to_json()},
                     {"bimanual", evaluate_keypoints(samples, Setting::bimanual).to_json()}};
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  const RunConfig c = resolve_config(g, true);
  const Split split = split_from_string(split_name_arg);
  const Corpus corpus = load_corpus(paths);
  const TemplateDb db = TemplateDb::load(paths.templates());
  const HandRig rig = load_or_build_rig(paths, c);
  const Checkpoint ckpt = load_checkpoint(checkpoint.empty() ? paths.checkpoint() : fs::path(checkpoint));
  if (ckpt.rig_seed != rig.seed) throw DataError("checkpoint was trained on a different rig");
  auto client = make_client(g, corpus, c);
  RunReport report = evaluate(ckpt.weights, corpus, split, db, *client, rig, c);
  if (fs::exists(paths.loss_curve())) {
    std::ifstream in(paths.loss_curve(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    report.loss_curve = parse_loss_curve_csv(ss.str());
  }
  const fs::path dir = split == Split::test ? paths.report_dir() : paths.root / ("report_" + split_name_arg);
  emit_report(report, dir);
  std::cout << report_table(report);
  return 0;
}

int cmd_retrieve(const Globals& g, const std::string& id, const std::string& strategy) {
  RunConfig c = resolve_config(g, true);
  if (!strategy.empty()) c.strategy = strategy_from_string(strategy);
  const RunPaths paths{g.out};
  const Corpus corpus = load_corpus(paths);
  const TemplateDb db = TemplateDb::load(paths.templates());
  std::size_t index = corpus.samples.size();
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    if (corpus.samples[i].id == id) index = i;
  }
  if (index == corpus.samples.size()) throw DataError("no sample with id '" + id + "'");
  auto client = make_client(g, corpus, c);
  const PreparedQuery q = prepare_query(corpus, index, *client, c, false);
  RandomStream rng(c.seed);
  const RetrievalResult r = retrieve_template(q.retrieval, db, c.strategy, rng);
  const TemplateRecord& t = db.records[r.index];
  nlohmann::json j{{"query", id},
                   {"classified", involvement_name(q.retrieval.involvement)},
                   {"strategy", strategy_name(c.strategy)},
                   {"template", t.id},
                   {"template_class", involvement_name(t.involvement)},
                   {"similarity", r.similarity},
                   {"fallback", r.fallback},
                   {"template_description", t.description}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_grad_check(const Globals& g, std::size_t samples, double tolerance) {
  RunConfig c = resolve_config(g, false);
  // dim-16 model unless a config or override says otherwise
  if (g.config_path.empty() && g.overrides.empty()) {
    c.model.d_model = 16;
    c.model.layers = 1;
    c.model.heads = 2;
    c.model.mlp_ratio = 2;
    c.model.mano_hidden = 16;
    c.model.image_feature_dim = 8;
    c.model.image_tokens = 2;
    c.model.phi_hidden = 8;
    c.model.phi_dim = 8;
  }
  const HandRig rig = build_rig(c.rig_seed);
  const auto entries = end_to_end_grad_check(c, rig, samples);
  double worst = 0;
  for (const auto& e : entries) {
    std::printf("%-32s %3zu  %.3e\n", e.parameter.c_str(), e.checked, e.relative_error);
    worst = std::max(worst, e.relative_error);
  }
  std::printf("max relative error %.3e (tolerance %.1e)\n", worst, tolerance);
  if (worst >= tolerance) throw NumericalError("grad-check: relative error above tolerance");
  return 0;
}

int cmd_report(const Globals& g, const std::string& dir_arg, const std::string& format) {
  const fs::path dir = dir_arg.empty() ? RunPaths{g.out}.report_dir() : fs::path(dir_arg);
  std::ifstream in(dir / "report.json");
  if (!in) throw DataError("no report.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report.json: ") + e.what());
  }
  const RunReport report = RunReport::from_json(j);
  if (format == "csv") {
    std::cout << report_csv(report);
  } else if (format == "json") {
    std::cout << report.to_json().dump(2) << "\n";
  } else {
    std::cout << report_table(report);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hand-pose refinement by in-context learning over retrieved templates"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key=value run configuration");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--out", g.out, "run directory")->capture_default_str();
  app.add_option("--profile", g.profile, "defaults when no config is given")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  app.add_option("--set", g.overrides, "key=value override, repeatable");
  app.add_option("--vlm", g.vlm, "mock, or live via EHICL_VLM_URL / EHICL_VLM_KEY")
      ->check(CLI::IsMember({"mock", "live"}))
      ->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "generate the corpus and the unvalidated template database");
  auto* val = app.add_subcommand("validate-templates", "triple-run involvement validation of the templates");
  auto* trn = app.add_subcommand("train", "train and keep the best-validation checkpoint");
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint, or external keypoints");
  std::string split = "test", checkpoint, keypoints;
  evl->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  evl->add_option("--checkpoint", checkpoint, "defaults to <out>/checkpoint.bin");
  evl->add_option("--keypoints", keypoints, "JSON-lines keypoint file");
  auto* ret = app.add_subcommand("retrieve", "show the template retrieved for one sample");
  std::string id, strategy;
  ret->add_option("--id", id)->required();
  ret->add_option("--strategy", strategy)->check(CLI::IsMember({"visual", "textual", "combined"}));
  auto* grad = app.add_subcommand("grad-check", "finite differences through the full training loss");
  std::size_t samples = 3;
  double tolerance = 1e-2;
  grad->add_option("--samples", samples)->capture_default_str();
  grad->add_option("--tolerance", tolerance)->capture_default_str();
  auto* rep = app.add_subcommand("report", "print a saved report");
  std::string report_dir, format = "txt";
  rep->add_option("--dir", report_dir, "defaults to <out>/report");
  rep->add_option("--format", format)->check(CLI::IsMember({"txt", "csv", "json"}))->capture_default_str();
  auto* all = app.add_subcommand("run", "gen-data, validate-templates, train and eval in one go");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  set_warning_sink([](const std::string& m) { std::fprintf(stderr, "warning: %s\n", m.c_str()); });
  try {
    if (*gen) return cmd_gen_data(g);
    if (*val) return cmd_validate(g);
    if (*trn) return cmd_train(g);
    if (*evl) return cmd_eval(g, split, checkpoint, keypoints);
    if (*ret) return cmd_retrieve(g, id, strategy);
    if (*grad) return cmd_grad_check(g, samples, tolerance);
    if (*rep) return cmd_report(g, report_dir, format);
    if (*all) {
      const RunConfig c = resolve_config(g, false);
      const RunReport r = run_full(c, {g.out}, print_epoch);
      std::cout << report_table(r);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

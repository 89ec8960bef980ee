// xqeval command-line interface.

#include <iostream>

#include "CLI11.hpp"
#include "xqeval/runner.hpp"
#include "xqeval/study_server.hpp"

using namespace xqeval;

namespace {

struct Args {
  std::string config;
  std::size_t threads = 0;
  std::string detector;
  std::string method;
  std::string doc_id;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string in_dir;
  std::string out;
  std::string format = "csv";
  std::string pairs;
  std::string log;
  std::string host = "127.0.0.1";
  int port = 8080;
};

ExperimentConfig load(const Args& a) {
  ExperimentConfig c = load_config(a.config);
  if (a.threads) c.threads = a.threads;
  return c;
}

int cmd_run(const Args& a) {
  const ExperimentConfig c = load(a);
  const ExperimentReport r = run(c);
  std::cout << table1_csv(r);
  for (const auto& g : r.gaps) std::cerr << "gap: " << g.detector << "/" << g.explainer << "/" << g.experiment << ": " << g.error << "\n";
  std::cerr << "wrote " << c.output_dir << "\n";
  return 0;
}

int cmd_explain(const Args& a) {
  const ExperimentConfig c = load(a);
  RunInputs in = load_inputs(c);
  const Document* doc = in.corpus.find(a.doc_id);
  if (!doc) throw ArgumentError("no document '" + a.doc_id + "' in the filtered corpus");
  ExperimentConfig only = c;
  only.detectors.clear();
  for (const auto& d : c.detectors) {
    if (d.name == a.detector) only.detectors.push_back(d);
  }
  if (only.detectors.empty()) throw ArgumentError("no detector named '" + a.detector + "' in the config");
  Resources res = build_resources(only, in);
  const Detector& det = *in.detectors.front().detector;
  std::shared_ptr<const ExplanationCache> cache;
  if (c.use_cache) {
    cache = std::make_shared<ExplanationCache>(c.cache_dir.empty() ? std::filesystem::path(c.output_dir) / "cache"
                                                                   : std::filesystem::path(c.cache_dir));
  }
  const Explainer explainer = with_cache(make_explainer(parse_method(a.method), det, c.explainer), det, cache);
  const std::uint64_t seed = a.seed_set ? a.seed : doc_seed(c.seed, "explain", *doc);
  const Prediction p = det.predict_one(doc->text);
  nlohmann::ordered_json out;
  out["doc_id"] = doc->id;
  out["prediction"] = {{"label", to_string(p.label)}, {"score", p.score}};
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < doc->size(); ++i) tokens.emplace_back(doc->token(i));
  out["tokens"] = tokens;
  out["explanation"] = nlohmann::ordered_json::parse(to_json(explainer.explain(*doc, seed)).dump());
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_report(const Args& a) {
  const ExperimentReport r = load_report((std::filesystem::path(a.in_dir) / "report.json").string());
  const std::string out = a.out.empty() ? a.in_dir : a.out;
  for (const auto& f : render_report(r, parse_report_format(a.format), out)) std::cout << f.string() << "\n";
  return 0;
}

int cmd_study_pairs(const Args& a) {
  const ExperimentConfig c = load(a);
  RunInputs in = load_inputs(c);
  Resources res = build_resources(c, in);
  const auto sets = prepare_study_sets(c, in);
  save_study_sets(sets, a.out);
  for (const auto& s : sets) std::cerr << s.detector << ": " << s.pairs.size() << " pairs\n";
  return 0;
}

int cmd_study_serve(const Args& a) {
  SessionStore store(load_study_sets(a.pairs), a.log);
  StudyServer server(store);
  std::cerr << "serving study API on http://" << a.host << ":" << a.port << "\n";
  if (!server.listen(a.host, a.port)) throw IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

int cmd_study_score(const Args& a) {
  const SessionStore store(load_study_sets(a.pairs), a.log);
  ExperimentReport r;
  r.study = score_study(store.sessions(), store.sets());
  if (a.format == "json") {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& s : r.study) j.push_back(to_json(s));
    std::cout << j.dump(2) << "\n";
  } else if (parse_report_format(a.format) == ReportFormat::csv) {
    std::cout << table2_csv(r);
  } else {
    std::cout << report_markdown(r);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation-quality evaluation for machine-generated-text detectors"};
  app.require_subcommand(1);
  Args a;

  auto* run_cmd = app.add_subcommand("run", "Run the configured experiments and write reports");
  run_cmd->add_option("--config", a.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--threads", a.threads, "Override the worker count");

  auto* explain = app.add_subcommand("explain", "Explain one document and print JSON");
  explain->add_option("--config", a.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  explain->add_option("--detector", a.detector, "Detector name from the config")->required();
  explain->add_option("--method", a.method, "lime | shap_partition | anchor | random")->required();
  explain->add_option("--doc-id", a.doc_id, "Document id")->required();
  explain->add_option("--seed", a.seed, "Explicit seed (default: derived from the config seed)")
      ->each([&](const std::string&) { a.seed_set = true; });

  auto* report = app.add_subcommand("report", "Render report.json as tables");
  report->add_option("--in", a.in_dir, "Run output directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--format", a.format, "md | csv")->check(CLI::IsMember({"md", "markdown", "csv"}));
  report->add_option("--out", a.out, "Destination directory (default: --in)");

  auto* study = app.add_subcommand("study", "User-study tooling");
  study->require_subcommand(1);
  auto* pairs = study->add_subcommand("pairs", "Select study document pairs");
  pairs->add_option("--config", a.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  pairs->add_option("--out", a.out, "Pairs file to write")->required();
  pairs->add_option("--threads", a.threads, "Override the worker count");
  auto* serve = study->add_subcommand("serve", "Serve the study REST API");
  serve->add_option("--pairs", a.pairs, "Pairs file")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", a.port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", a.host, "Bind address");
  serve->add_option("--log", a.log, "Session event log (JSONL)")->required();
  auto* score = study->add_subcommand("score", "Score completed sessions");
  score->add_option("--pairs", a.pairs, "Pairs file")->required()->check(CLI::ExistingFile);
  score->add_option("--log", a.log, "Session event log (JSONL)")->required()->check(CLI::ExistingFile);
  score->add_option("--format", a.format, "md | csv | json")->check(CLI::IsMember({"md", "markdown", "csv", "json"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (run_cmd->parsed()) return cmd_run(a);
    if (explain->parsed()) return cmd_explain(a);
    if (report->parsed()) return cmd_report(a);
    if (pairs->parsed()) return cmd_study_pairs(a);
    if (serve->parsed()) return cmd_study_serve(a);
    if (score->parsed()) return cmd_study_score(a);
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

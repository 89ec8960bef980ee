#pragma once

// Experiment orchestration: config, cached explainers, worker pool, reports.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <regex>
#include <thread>

#include "json.hpp"
#include "xqeval/cache.hpp"
#include "xqeval/corpus.hpp"
#include "xqeval/detector.hpp"
#include "xqeval/explainers.hpp"
#include "xqeval/faithfulness.hpp"
#include "xqeval/remote.hpp"
#include "xqeval/stability.hpp"
#include "xqeval/study.hpp"

namespace xqeval {

// ---------------------------------------------------------------------------
// Configuration

struct CorpusSettings {
  std::string path;
  std::size_t min_words = 50;
  std::size_t max_words = 150;
  /// Stratified fraction evaluated; 1 keeps everything.
  double subsample = 1.0;
  /// Optional cap on evaluated documents (first N after subsampling); 0 = none.
  std::size_t max_docs = 0;
};

struct DetectorSpec {
  std::string name;
  enum class Kind { builtin, remote } kind = Kind::builtin;
  ReferenceDetectorConfig train;
  /// Training records; empty trains on the filtered evaluation corpus.
  std::string train_corpus;
  /// Saved model; overrides training when set.
  std::string model;
  RemoteDetectorConfig remote;
};

struct ExperimentToggles {
  bool pointing_game = true;
  bool token_removal = true;
  bool consistency = true;
  bool continuity = true;
  bool contrastivity = true;
};

struct StudySettings {
  std::size_t pairs_per_method = 6;
  std::size_t top_k_candidates = 100;
  /// When both exist, results are scored into the report.
  std::string pairs_file;
  std::string sessions_log;
};

struct ExperimentConfig {
  CorpusSettings corpus;
  std::vector<DetectorSpec> detectors;
  std::vector<Method> explainers = {Method::lime, Method::shap_partition, Method::anchor, Method::random};
  ExplainerSettings explainer;
  ExperimentToggles experiments;
  std::size_t hybrid_docs = 100;
  std::size_t k_max = 10;
  std::size_t random_runs = 5;
  std::size_t consistency_runs = 5;
  std::size_t continuity_perturbations = 5;
  std::size_t continuity_max_attempts = 50;
  ContrastiveOptions contrastive;
  /// Remote infill/continuation service; empty uses the built-in generators.
  std::string generator_url;
  std::string generator_replay_log;
  StudySettings study;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string output_dir = "xqeval-out";
  /// Empty uses <output_dir>/cache.
  std::string cache_dir;
  bool use_cache = true;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  if (!j.is_object()) throw ArgumentError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      throw ArgumentError("unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline const std::regex& name_pattern() {
  static const std::regex re("[A-Za-z0-9_.-]+");
  return re;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  detail::reject_unknown_keys(j,
                              {"corpus", "detectors", "explainers", "lime", "partition", "anchor", "experiments",
                               "pointing_game", "token_removal", "consistency", "continuity", "contrastivity",
                               "generator", "study", "seed", "threads", "output_dir", "cache_dir", "use_cache"},
                              "config");
  ExperimentConfig c;
  try {
    const auto& corpus = j.at("corpus");
    detail::reject_unknown_keys(corpus, {"path", "min_words", "max_words", "subsample", "max_docs"}, "corpus");
    c.corpus.path = corpus.at("path").get<std::string>();
    read_key(corpus, "min_words", c.corpus.min_words);
    read_key(corpus, "max_words", c.corpus.max_words);
    read_key(corpus, "subsample", c.corpus.subsample);
    read_key(corpus, "max_docs", c.corpus.max_docs);

    for (const auto& d : j.at("detectors")) {
      detail::reject_unknown_keys(d,
                                  {"name", "kind", "train", "train_corpus", "model", "url", "batch_size",
                                   "deterministic", "timeout_ms", "retries"},
                                  "detector");
      DetectorSpec s;
      s.name = d.at("name").get<std::string>();
      if (!std::regex_match(s.name, detail::name_pattern())) {
        throw ArgumentError("detector name '" + s.name + "' must match [A-Za-z0-9_.-]+");
      }
      const std::string kind = d.value("kind", "builtin");
      if (kind == "builtin") {
        s.kind = DetectorSpec::Kind::builtin;
        if (d.contains("train")) s.train = reference_config_from_json(d.at("train"));
        read_key(d, "train_corpus", s.train_corpus);
        read_key(d, "model", s.model);
      } else if (kind == "remote") {
        s.kind = DetectorSpec::Kind::remote;
        s.remote.endpoint.base_url = d.at("url").get<std::string>();
        s.remote.id = "remote:" + s.name;
        read_key(d, "batch_size", s.remote.batch_size);
        read_key(d, "deterministic", s.remote.deterministic);
        read_key(d, "timeout_ms", s.remote.endpoint.timeout_ms);
        read_key(d, "retries", s.remote.endpoint.retries);
      } else {
        throw ArgumentError("detector kind must be 'builtin' or 'remote', got '" + kind + "'");
      }
      for (const auto& other : c.detectors) {
        if (other.name == s.name) throw ArgumentError("duplicate detector name '" + s.name + "'");
      }
      c.detectors.push_back(std::move(s));
    }
    if (c.detectors.empty()) throw ArgumentError("config needs at least one detector");

    if (j.contains("explainers")) {
      c.explainers.clear();
      for (const auto& m : j.at("explainers")) {
        const Method method = parse_method(m.get<std::string>());
        if (std::find(c.explainers.begin(), c.explainers.end(), method) != c.explainers.end()) {
          throw ArgumentError("explainer listed twice: " + m.get<std::string>());
        }
        c.explainers.push_back(method);
      }
    }
    // The random baseline is always reported.
    if (std::find(c.explainers.begin(), c.explainers.end(), Method::random) == c.explainers.end()) {
      c.explainers.push_back(Method::random);
    }

    if (j.contains("lime")) {
      const auto& l = j.at("lime");
      detail::reject_unknown_keys(l, {"n_samples", "n_features", "ridge_alpha", "kernel_width", "mask_symbol", "batch_size"}, "lime");
      read_key(l, "n_samples", c.explainer.lime.n_samples);
      read_key(l, "n_features", c.explainer.lime.n_features);
      read_key(l, "ridge_alpha", c.explainer.lime.ridge_alpha);
      read_key(l, "kernel_width", c.explainer.lime.kernel_width);
      read_key(l, "mask_symbol", c.explainer.lime.mask_symbol);
      read_key(l, "batch_size", c.explainer.lime.batch_size);
    }
    if (j.contains("partition")) {
      const auto& p = j.at("partition");
      detail::reject_unknown_keys(p, {"tree", "mask_symbol", "batch_size"}, "partition");
      const std::string tree = p.value("tree", "bisection");
      if (tree == "bisection") {
        c.explainer.partition.tree = PartitionKind::bisection;
      } else if (tree == "flat") {
        c.explainer.partition.tree = PartitionKind::flat;
      } else {
        throw ArgumentError("partition.tree must be 'bisection' or 'flat'");
      }
      read_key(p, "mask_symbol", c.explainer.partition.mask_symbol);
      read_key(p, "batch_size", c.explainer.partition.batch_size);
    }
    if (j.contains("anchor")) {
      const auto& a = j.at("anchor");
      detail::reject_unknown_keys(a,
                                  {"tau", "delta", "epsilon", "max_samples_per_candidate", "init_samples", "batch_size",
                                   "beam_size", "max_anchor_size", "coverage_samples", "max_edit_fraction", "mask_symbol"},
                                  "anchor");
      auto& x = c.explainer.anchor;
      read_key(a, "tau", x.tau);
      read_key(a, "delta", x.delta);
      read_key(a, "epsilon", x.epsilon);
      read_key(a, "max_samples_per_candidate", x.max_samples_per_candidate);
      read_key(a, "init_samples", x.init_samples);
      read_key(a, "batch_size", x.batch_size);
      read_key(a, "beam_size", x.beam_size);
      read_key(a, "max_anchor_size", x.max_anchor_size);
      read_key(a, "coverage_samples", x.coverage_samples);
      read_key(a, "max_edit_fraction", x.max_edit_fraction);
      read_key(a, "mask_symbol", x.mask_symbol);
    }
    if (j.contains("experiments")) {
      const auto& e = j.at("experiments");
      detail::reject_unknown_keys(e, {"pointing_game", "token_removal", "consistency", "continuity", "contrastivity"}, "experiments");
      read_key(e, "pointing_game", c.experiments.pointing_game);
      read_key(e, "token_removal", c.experiments.token_removal);
      read_key(e, "consistency", c.experiments.consistency);
      read_key(e, "continuity", c.experiments.continuity);
      read_key(e, "contrastivity", c.experiments.contrastivity);
    }
    if (j.contains("pointing_game")) {
      detail::reject_unknown_keys(j.at("pointing_game"), {"hybrid_docs"}, "pointing_game");
      read_key(j.at("pointing_game"), "hybrid_docs", c.hybrid_docs);
    }
    if (j.contains("token_removal")) {
      detail::reject_unknown_keys(j.at("token_removal"), {"k_max", "random_runs"}, "token_removal");
      read_key(j.at("token_removal"), "k_max", c.k_max);
      read_key(j.at("token_removal"), "random_runs", c.random_runs);
    }
    if (j.contains("consistency")) {
      detail::reject_unknown_keys(j.at("consistency"), {"runs"}, "consistency");
      read_key(j.at("consistency"), "runs", c.consistency_runs);
    }
    if (j.contains("continuity")) {
      detail::reject_unknown_keys(j.at("continuity"), {"n_perturb", "max_attempts"}, "continuity");
      read_key(j.at("continuity"), "n_perturb", c.continuity_perturbations);
      read_key(j.at("continuity"), "max_attempts", c.continuity_max_attempts);
    }
    if (j.contains("contrastivity")) {
      detail::reject_unknown_keys(j.at("contrastivity"), {"attempts_per_k", "max_edit_fraction"}, "contrastivity");
      read_key(j.at("contrastivity"), "attempts_per_k", c.contrastive.attempts_per_k);
      read_key(j.at("contrastivity"), "max_edit_fraction", c.contrastive.max_edit_fraction);
    }
    if (j.contains("generator")) {
      detail::reject_unknown_keys(j.at("generator"), {"url", "replay_log"}, "generator");
      read_key(j.at("generator"), "url", c.generator_url);
      read_key(j.at("generator"), "replay_log", c.generator_replay_log);
    }
    if (j.contains("study")) {
      const auto& s = j.at("study");
      detail::reject_unknown_keys(s, {"pairs_per_method", "top_k_candidates", "pairs_file", "sessions_log"}, "study");
      read_key(s, "pairs_per_method", c.study.pairs_per_method);
      read_key(s, "top_k_candidates", c.study.top_k_candidates);
      read_key(s, "pairs_file", c.study.pairs_file);
      read_key(s, "sessions_log", c.study.sessions_log);
    }
    read_key(j, "seed", c.seed);
    read_key(j, "threads", c.threads);
    read_key(j, "output_dir", c.output_dir);
    read_key(j, "cache_dir", c.cache_dir);
    read_key(j, "use_cache", c.use_cache);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  if (c.corpus.min_words == 0 || c.corpus.min_words > c.corpus.max_words) {
    throw ArgumentError("corpus: need 0 < min_words <= max_words");
  }
  if (!(c.corpus.subsample > 0.0 && c.corpus.subsample <= 1.0)) throw ArgumentError("corpus.subsample must lie in (0, 1]");
  if (c.threads == 0) throw ArgumentError("threads must be >= 1");
  if (c.k_max == 0 || c.random_runs == 0) throw ArgumentError("token_removal: k_max and random_runs must be >= 1");
  if (c.consistency_runs < 2) throw ArgumentError("consistency.runs must be >= 2");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

/// Canonical form of everything that can change results (no paths to
/// outputs, no parallelism).
inline nlohmann::ordered_json canonical_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["corpus"] = {{"path", c.corpus.path},
                 {"min_words", c.corpus.min_words},
                 {"max_words", c.corpus.max_words},
                 {"subsample", c.corpus.subsample},
                 {"max_docs", c.corpus.max_docs}};
  j["detectors"] = nlohmann::ordered_json::array();
  for (const auto& d : c.detectors) {
    nlohmann::ordered_json x = {{"name", d.name}};
    if (d.kind == DetectorSpec::Kind::builtin) {
      x["kind"] = "builtin";
      x["train"] = nlohmann::ordered_json::parse(to_json(d.train).dump());
      x["train_corpus"] = d.train_corpus;
      x["model"] = d.model;
    } else {
      x["kind"] = "remote";
      x["url"] = d.remote.endpoint.base_url;
      x["batch_size"] = d.remote.batch_size;
      x["deterministic"] = d.remote.deterministic;
    }
    j["detectors"].push_back(x);
  }
  j["explainers"] = nlohmann::ordered_json::array();
  for (Method m : c.explainers) j["explainers"].push_back(to_string(m));
  j["explainer_config"] = {{"lime", c.explainer.lime.hash()},
                           {"partition", c.explainer.partition.hash()},
                           {"anchor", c.explainer.anchor.hash()}};
  j["experiments"] = {{"pointing_game", c.experiments.pointing_game},
                      {"token_removal", c.experiments.token_removal},
                      {"consistency", c.experiments.consistency},
                      {"continuity", c.experiments.continuity},
                      {"contrastivity", c.experiments.contrastivity}};
  j["hybrid_docs"] = c.hybrid_docs;
  j["k_max"] = c.k_max;
  j["random_runs"] = c.random_runs;
  j["consistency_runs"] = c.consistency_runs;
  j["continuity"] = {{"n_perturb", c.continuity_perturbations}, {"max_attempts", c.continuity_max_attempts}};
  j["contrastivity"] = {{"attempts_per_k", c.contrastive.attempts_per_k},
                        {"max_edit_fraction", c.contrastive.max_edit_fraction}};
  j["generator_url"] = c.generator_url;
  j["study"] = {{"pairs_per_method", c.study.pairs_per_method}, {"top_k_candidates", c.study.top_k_candidates}};
  j["seed"] = c.seed;
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) { return sha256_hex(canonical_json(c).dump()).substr(0, 16); }

// ---------------------------------------------------------------------------
// Execution helpers

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The exception of the
/// lowest failing index is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Wraps an explainer with the on-disk cache (keyed by detector, method,
/// config hash, text and seed). The random baseline is never cached.
inline Explainer with_cache(Explainer inner, const Detector& detector, std::shared_ptr<const ExplanationCache> cache) {
  if (!cache || inner.method() == Method::random) return inner;
  const Method method = inner.method();
  std::string hash = inner.config_hash();
  return Explainer(method, hash, [inner, &detector, cache](const Document& doc, std::uint64_t seed) {
    const CacheKey key{detector.handle().id, inner.method(), inner.config_hash(), doc.text, seed};
    if (auto hit = cache->get(key)) {
      std::visit([&](auto& x) { x.doc_id = doc.id; }, *hit);
      return *hit;
    }
    Explanation e = inner.explain(doc, seed);
    cache->put(key, e);
    return e;
  });
}

inline std::uint64_t doc_seed(std::uint64_t master, const std::string& experiment, const Document& doc) {
  return derive_seed(master, experiment + ":" + doc.id);
}

// ---------------------------------------------------------------------------
// Report

struct MetricRow {
  std::string detector;
  Method explainer = Method::random;
  std::optional<double> acc_pg, delta_right_at_10, delta_wrong_at_10, consistency_alpha, continuity_alpha, c_inter,
      c_intra;
};

struct CurveRow {
  std::string detector;
  Method method = Method::random;
  std::string branch;
  std::size_t k = 0;
  std::optional<double> accuracy;
  std::size_t n = 0;
};

struct Gap {
  std::string detector;
  std::string explainer;
  std::string experiment;
  std::string error;
};

struct ExperimentReport {
  std::vector<MetricRow> rows;
  std::vector<CurveRow> curves;
  std::vector<StudyResult> study;
  std::vector<Gap> gaps;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
};

inline constexpr std::array<const char*, 7> kMetricColumns = {"acc_pg",           "delta_right_at_10", "delta_wrong_at_10",
                                                              "consistency_alpha", "continuity_alpha", "c_inter",
                                                              "c_intra"};

namespace detail {

inline std::array<std::optional<double>*, 7> cells(MetricRow& r) {
  return {&r.acc_pg, &r.delta_right_at_10, &r.delta_wrong_at_10, &r.consistency_alpha, &r.continuity_alpha,
          &r.c_inter, &r.c_intra};
}

inline std::optional<double> rounded(double x) {
  if (!std::isfinite(x)) return std::nullopt;
  const double r = round_half_even(x, 3);
  return r == 0.0 ? 0.0 : r;  // no negative zero
}

inline std::string cell(const std::optional<double>& x) { return x ? format_fixed(*x) : "NA"; }

inline nlohmann::ordered_json json_cell(const std::optional<double>& x) {
  return x ? nlohmann::ordered_json(*x) : nlohmann::ordered_json(nullptr);
}

inline std::optional<double> cell_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline std::optional<double> cell_from_text(const std::string& s) {
  if (s == "NA") return std::nullopt;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw ParseError(0, "bad numeric cell '" + s + "'");
  return v;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ExperimentReport& r) {
  nlohmann::ordered_json j;
  j["provenance"] = r.provenance;
  j["table1"] = nlohmann::ordered_json::array();
  for (MetricRow row : r.rows) {
    nlohmann::ordered_json x = {{"detector", row.detector}, {"explainer", to_string(row.explainer)}};
    const auto cs = detail::cells(row);
    for (std::size_t c = 0; c < cs.size(); ++c) x[kMetricColumns[c]] = detail::json_cell(*cs[c]);
    j["table1"].push_back(x);
  }
  j["removal_curves"] = nlohmann::ordered_json::array();
  for (const auto& c : r.curves) {
    j["removal_curves"].push_back({{"detector", c.detector},
                                   {"method", to_string(c.method)},
                                   {"branch", c.branch},
                                   {"k", c.k},
                                   {"accuracy", detail::json_cell(c.accuracy)},
                                   {"n", c.n}});
  }
  j["table2"] = nlohmann::ordered_json::array();
  for (const auto& s : r.study) j["table2"].push_back(to_json(s));
  j["gaps"] = nlohmann::ordered_json::array();
  for (const auto& g : r.gaps) {
    j["gaps"].push_back({{"detector", g.detector}, {"explainer", g.explainer}, {"experiment", g.experiment}, {"error", g.error}});
  }
  return j;
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
  ExperimentReport r;
  try {
    r.provenance = nlohmann::ordered_json::parse(j.at("provenance").dump());
    for (const auto& x : j.at("table1")) {
      MetricRow row;
      row.detector = x.at("detector").get<std::string>();
      row.explainer = parse_method(x.at("explainer").get<std::string>());
      const auto cs = detail::cells(row);
      for (std::size_t c = 0; c < cs.size(); ++c) *cs[c] = detail::cell_from_json(x.at(kMetricColumns[c]));
      r.rows.push_back(row);
    }
    for (const auto& x : j.at("removal_curves")) {
      r.curves.push_back({x.at("detector").get<std::string>(), parse_method(x.at("method").get<std::string>()),
                          x.at("branch").get<std::string>(), x.at("k").get<std::size_t>(),
                          detail::cell_from_json(x.at("accuracy")), x.at("n").get<std::size_t>()});
    }
    for (const auto& x : j.at("table2")) {
      StudyResult s;
      s.method = parse_method(x.at("method").get<std::string>());
      auto num = [](const nlohmann::json& v) {
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
      };
      s.acc_without = num(x.at("acc_without"));
      s.acc_with = num(x.at("acc_with"));
      s.change = num(x.at("change_pct"));
      s.mcnemar_p = x.at("mcnemar_p").get<double>();
      s.b = x.at("b").get<std::size_t>();
      s.c = x.at("c").get<std::size_t>();
      for (int q = 0; q < 3; ++q) s.likert_means[q] = num(x.at("likert_means").at(q));
      s.sessions = x.at("sessions").get<std::size_t>();
      s.items = x.at("items").get<std::size_t>();
      s.excluded = x.at("excluded").get<std::size_t>();
      r.study.push_back(s);
    }
    for (const auto& x : j.at("gaps")) {
      r.gaps.push_back({x.at("detector").get<std::string>(), x.at("explainer").get<std::string>(),
                        x.at("experiment").get<std::string>(), x.at("error").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("report: ") + e.what());
  }
  return r;
}

inline ExperimentReport load_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read report '" + path + "'");
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("report: ") + e.what());
  }
}

inline std::string table1_csv(const ExperimentReport& r) {
  std::string out = "detector,explainer";
  for (const char* c : kMetricColumns) out += std::string(",") + c;
  out += '\n';
  for (MetricRow row : r.rows) {
    out += row.detector + "," + to_string(row.explainer);
    for (auto* c : detail::cells(row)) out += "," + detail::cell(*c);
    out += '\n';
  }
  return out;
}

/// Inverse of table1_csv.
inline std::vector<MetricRow> parse_table1_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<MetricRow> rows;
  for (std::size_t number = 2; std::getline(in, line); ++number) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() != 2 + kMetricColumns.size()) throw ParseError(number, "expected 9 fields");
    MetricRow row;
    row.detector = fields[0];
    row.explainer = parse_method(fields[1]);
    const auto cs = detail::cells(row);
    for (std::size_t c = 0; c < cs.size(); ++c) *cs[c] = detail::cell_from_text(fields[2 + c]);
    rows.push_back(row);
  }
  return rows;
}

inline std::string curves_csv(const ExperimentReport& r) {
  std::string out = "detector,method,branch,k,accuracy,n\n";
  for (const auto& c : r.curves) {
    out += c.detector + "," + to_string(c.method) + "," + c.branch + "," + std::to_string(c.k) + "," +
           detail::cell(c.accuracy) + "," + std::to_string(c.n) + "\n";
  }
  return out;
}

inline std::string table2_csv(const ExperimentReport& r) {
  std::string out = "method,acc_without,acc_with,change_pct,mcnemar_p,q1,q2,q3,sessions,excluded\n";
  for (const auto& s : r.study) {
    out += std::string(to_string(s.method)) + "," + format_fixed(s.acc_without) + "," + format_fixed(s.acc_with) + "," +
           format_fixed(s.change, 1) + "," + format_fixed(s.mcnemar_p) + "," + format_fixed(s.likert_means[0], 2) + "," +
           format_fixed(s.likert_means[1], 2) + "," + format_fixed(s.likert_means[2], 2) + "," +
           std::to_string(s.sessions) + "," + std::to_string(s.excluded) + "\n";
  }
  return out;
}

inline std::string report_markdown(const ExperimentReport& r) {
  std::string out = "# Explanation quality report\n\n## Faithfulness and stability\n\n";
  out += "| Detector | Explainer | Acc_pg | Δ_right@10 | Δ_wrong@10 | Consistency α | Continuity α | c_inter | c_intra |\n";
  out += "|---|---|---|---|---|---|---|---|---|\n";
  for (MetricRow row : r.rows) {
    out += "| " + row.detector + " | " + to_string(row.explainer);
    for (auto* c : detail::cells(row)) out += " | " + detail::cell(*c);
    out += " |\n";
  }
  out += "\n## Forward simulation\n\n";
  out += "| Explainer | Without | With | Change | p | Q1 | Q2 | Q3 |\n|---|---|---|---|---|---|---|---|\n";
  for (const auto& s : r.study) {
    out += std::string("| ") + to_string(s.method) + " | " + format_fixed(s.acc_without) + " | " + format_fixed(s.acc_with) +
           " | " + format_fixed(s.change, 1) + "% | " + format_fixed(s.mcnemar_p) + " | " +
           format_fixed(s.likert_means[0], 2) + " | " + format_fixed(s.likert_means[1], 2) + " | " +
           format_fixed(s.likert_means[2], 2) + " |\n";
  }
  if (!r.gaps.empty()) {
    out += "\n## Gaps\n\n";
    for (const auto& g : r.gaps) out += "- " + g.detector + " / " + g.explainer + " / " + g.experiment + ": " + g.error + "\n";
  }
  return out;
}

enum class ReportFormat { markdown, csv };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "md" || s == "markdown") return ReportFormat::markdown;
  if (s == "csv") return ReportFormat::csv;
  throw ArgumentError("report format must be 'md' or 'csv'");
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace detail

/// Writes the tables and curve data into `dir`; returns the files written.
inline std::vector<std::filesystem::path> render_report(const ExperimentReport& r, ReportFormat format,
                                                        const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  auto emit = [&](const char* name, const std::string& text) {
    files.push_back(dir / name);
    detail::write_text(files.back(), text);
  };
  if (format == ReportFormat::csv) {
    emit("table1.csv", table1_csv(r));
    emit("table2.csv", table2_csv(r));
  } else {
    emit("report.md", report_markdown(r));
  }
  emit("removal_curves.csv", curves_csv(r));
  return files;
}

// ---------------------------------------------------------------------------
// Running

struct NamedDetector {
  std::string name;
  const Detector* detector = nullptr;
};

/// Shared inputs for one run.
struct RunInputs {
  Corpus corpus;              // filtered corpus (hybrid sentences, generators)
  std::vector<Document> docs; // evaluated documents
  std::vector<NamedDetector> detectors;
  const InfillGenerator* infill = nullptr;
  const ContinuationGenerator* continuation = nullptr;
};

struct RunStats {
  nlohmann::ordered_json timings = nlohmann::ordered_json::array();
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
  std::uint64_t detector_calls = 0;
};

namespace detail {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
};

inline std::string csv_number(double x) {
  if (!std::isfinite(x)) return "NA";
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

}  // namespace detail

/// Executes the configured experiments for every detector and explainer and
/// writes raw results under <output_dir>/raw. Failures are recorded as gaps.
inline ExperimentReport run_experiments(const ExperimentConfig& config, const RunInputs& in, RunStats* stats = nullptr) {
  namespace fs = std::filesystem;
  const fs::path out_dir = config.output_dir;
  const fs::path raw_dir = out_dir / "raw";
  std::shared_ptr<const ExplanationCache> cache;
  if (config.use_cache) {
    cache = std::make_shared<ExplanationCache>(config.cache_dir.empty() ? out_dir / "cache" : fs::path(config.cache_dir));
  }
  ExperimentReport report;
  RunStats local;
  RunStats& st = stats ? *stats : local;
  const auto& docs = in.docs;
  const std::size_t threads = config.threads;

  std::vector<Document> hybrids;
  if (config.experiments.pointing_game) hybrids = build_hybrid_dataset(in.corpus, config.hybrid_docs, derive_seed(config.seed, "hybrid"));

  Vocabulary vocabulary = Vocabulary::from_documents(in.corpus.documents());
  ContinuityOptions continuity_options;
  continuity_options.n_perturb = config.continuity_perturbations;
  continuity_options.max_attempts = config.continuity_max_attempts;
  continuity_options.vocabulary = &vocabulary;
  continuity_options.infill = in.infill;

  report.provenance["version"] = kVersion;
  report.provenance["config_hash"] = config_hash(config);
  report.provenance["corpus_digest"] = corpus_digest(in.corpus);
  report.provenance["evaluated_docs"] = docs.size();
  report.provenance["hybrid_docs"] = hybrids.size();
  report.provenance["seed"] = config.seed;
  report.provenance["detectors"] = nlohmann::ordered_json::object();

  for (const auto& named : in.detectors) {
    const Detector& det = *named.detector;
    report.provenance["detectors"][named.name] = det.handle().id;
    const fs::path det_dir = raw_dir / named.name;
    const std::uint64_t calls_before = det.calls();

    auto record_gap = [&](const std::string& explainer, const std::string& experiment, const std::exception& e) {
      Log::warn("experiment " + experiment + " failed for " + named.name + "/" + explainer + ": " + e.what());
      report.gaps.push_back({named.name, explainer, experiment, e.what()});
    };
    auto timed = [&](const std::string& explainer, const std::string& experiment, auto&& body) {
      detail::Timer t;
      const std::uint64_t c0 = det.calls();
      try {
        body();
      } catch (const std::exception& e) {
        record_gap(explainer, experiment, e);
      }
      st.timings.push_back({{"detector", named.name},
                            {"explainer", explainer},
                            {"experiment", experiment},
                            {"ms", t.ms()},
                            {"detector_calls", det.calls() - c0}});
    };

    // Shared per-detector inputs.
    std::vector<Prediction> hybrid_preds;
    std::vector<ContrastivePair> pairs;
    if (config.experiments.pointing_game && !hybrids.empty()) {
      timed("*", "hybrid_predictions", [&] { hybrid_preds = predict_documents(det, hybrids); });
    }
    bool pairs_ok = false;
    if (config.experiments.contrastivity) {
      timed("*", "contrastive_pairs", [&] {
        if (!in.continuation) throw ArgumentError("no continuation generator configured");
        std::vector<std::optional<ContrastivePair>> found(docs.size());
        parallel_for(docs.size(), threads, [&](std::size_t i) {
          if (docs[i].size() < 4) return;
          found[i] = build_contrastive_pair(det, docs[i], *in.continuation, doc_seed(config.seed, "contrastive", docs[i]),
                                            config.contrastive);
        });
        for (auto& p : found) {
          if (p) pairs.push_back(std::move(*p));
        }
        std::filesystem::create_directories(det_dir);
        save_pairs(pairs, (det_dir / "contrastive_pairs.jsonl").string());
        detail::write_text(det_dir / "edit_fractions.csv", edit_fraction_histogram_csv(pairs, 0.05, config.contrastive.max_edit_fraction));
        pairs_ok = true;
      });
    }

    for (Method method : config.explainers) {
      const std::string mname = to_string(method);
      const Explainer explainer = with_cache(make_explainer(method, det, config.explainer), det, cache);
      const fs::path ex_dir = det_dir / mname;
      MetricRow row;
      row.detector = named.name;
      row.explainer = method;

      if (config.experiments.pointing_game && hybrid_preds.size() == hybrids.size() && !hybrids.empty()) {
        timed(mname, "pointing_game", [&] {
          std::vector<Explanation> ex(hybrids.size());
          parallel_for(hybrids.size(), threads, [&](std::size_t i) {
            ex[i] = explainer.explain(hybrids[i], doc_seed(config.seed, "pointing", hybrids[i]));
          });
          PointingGameResult pg;
          if (method == Method::anchor) {
            std::vector<AnchorRule> rules;
            for (auto& e : ex) rules.push_back(std::get<AnchorRule>(e));
            pg = pointing_game_anchor(hybrids, hybrid_preds, rules);
          } else {
            std::vector<FeatureImportance> fis;
            for (auto& e : ex) fis.push_back(std::get<FeatureImportance>(e));
            pg = pointing_game(hybrids, hybrid_preds, fis);
          }
          std::string csv = "doc_id,hit\n";
          for (std::size_t i = 0; i < hybrids.size(); ++i) csv += hybrids[i].id + "," + detail::csv_number(pg.per_doc_hits[i]) + "\n";
          detail::write_text(ex_dir / "pointing_game.csv", csv);
          row.acc_pg = detail::rounded(pg.acc_pg);
        });
      }

      if (config.experiments.token_removal && !docs.empty()) {
        timed(mname, "token_removal", [&] {
          std::vector<Explanation> ex(docs.size());
          parallel_for(docs.size(), threads, [&](std::size_t i) {
            ex[i] = explainer.explain(docs[i], doc_seed(config.seed, "explain", docs[i]));
          });
          RemovalOptions ro;
          ro.k_max = config.k_max;
          ro.random_runs = config.random_runs;
          ro.seed = derive_seed(config.seed, "removal");
          const RemovalCurve curve = token_removal_curve(det, docs, ex, ro);
          for (const auto& rec : removal_records(curve, mname)) {
            report.curves.push_back({named.name, method, rec.branch, rec.k, detail::rounded(rec.accuracy), rec.n});
          }
          row.delta_right_at_10 = detail::rounded(curve.delta_right_at_10);
          row.delta_wrong_at_10 = detail::rounded(curve.delta_wrong_at_10);
        });
      }

      if (config.experiments.consistency && !docs.empty()) {
        timed(mname, "consistency", [&] {
          std::vector<AlphaResult> alphas(docs.size());
          parallel_for(docs.size(), threads, [&](std::size_t i) {
            alphas[i] = consistency(explainer, docs[i], config.consistency_runs, doc_seed(config.seed, "consistency", docs[i]));
          });
          std::string csv = "doc_id,alpha,degenerate\n";
          double sum = 0.0;
          for (std::size_t i = 0; i < docs.size(); ++i) {
            sum += alphas[i].alpha;
            csv += docs[i].id + "," + detail::csv_number(alphas[i].alpha) + "," + (alphas[i].degenerate ? "1" : "0") + "\n";
          }
          detail::write_text(ex_dir / "consistency.csv", csv);
          row.consistency_alpha = detail::rounded(sum / double(docs.size()));
        });
      }

      if (config.experiments.continuity && !docs.empty()) {
        timed(mname, "continuity", [&] {
          std::vector<ContinuityResult> results(docs.size());
          parallel_for(docs.size(), threads, [&](std::size_t i) {
            results[i] = continuity(explainer, det, docs[i], continuity_options, doc_seed(config.seed, "continuity", docs[i]));
          });
          std::string csv = "doc_id,alpha,perturbations,attempts\n";
          double sum = 0.0;
          std::size_t n = 0;
          for (std::size_t i = 0; i < docs.size(); ++i) {
            const auto& r = results[i];
            csv += docs[i].id + "," + (r.alpha ? detail::csv_number(r.alpha->alpha) : "NA") + "," +
                   std::to_string(r.perturbations.size()) + "," + std::to_string(r.attempts) + "\n";
            if (r.alpha) {
              sum += r.alpha->alpha;
              ++n;
            }
          }
          detail::write_text(ex_dir / "continuity.csv", csv);
          if (n) row.continuity_alpha = detail::rounded(sum / double(n));
        });
      }

      if (config.experiments.contrastivity && pairs_ok) {
        timed(mname, "contrastivity", [&] {
          if (pairs.empty()) throw ArgumentError("no contrastive pairs could be generated");
          const ContrastivityResult r = contrastivity_scores(pairs, explainer, det, derive_seed(config.seed, "contrastivity"));
          detail::write_text(ex_dir / "contrastivity.csv",
                             "c_inter,c_intra,n,excluded\n" + detail::csv_number(r.c_inter) + "," +
                                 detail::csv_number(r.c_intra) + "," + std::to_string(r.n) + "," +
                                 std::to_string(r.excluded) + "\n");
          if (r.n) {
            row.c_inter = detail::rounded(r.c_inter);
            row.c_intra = detail::rounded(r.c_intra);
          }
        });
      }
      report.rows.push_back(row);
    }
    st.detector_calls += det.calls() - calls_before;
  }
  if (cache) {
    st.cache_hits = cache->hits();
    st.cache_misses = cache->misses();
  }
  return report;
}

/// Loads the corpus named by the config and selects the evaluated documents.
inline RunInputs load_inputs(const ExperimentConfig& config) {
  RunInputs in;
  in.corpus = load_corpus(config.corpus.path, config.corpus.min_words, config.corpus.max_words);
  Corpus evaluated = config.corpus.subsample < 1.0
                         ? stratified_subsample(in.corpus, config.corpus.subsample, derive_seed(config.seed, "subsample"))
                         : in.corpus;
  in.docs = evaluated.documents();
  if (config.corpus.max_docs && in.docs.size() > config.corpus.max_docs) in.docs.resize(config.corpus.max_docs);
  return in;
}

/// Owns detectors and generators built from a config.
struct Resources {
  std::vector<std::unique_ptr<Detector>> detectors;
  std::shared_ptr<RemoteGeneratorClient> generator_client;
  std::unique_ptr<InfillGenerator> infill;
  std::unique_ptr<ContinuationGenerator> continuation;
};

inline Resources build_resources(const ExperimentConfig& config, RunInputs& in) {
  Resources res;
  for (const auto& spec : config.detectors) {
    if (spec.kind == DetectorSpec::Kind::remote) {
      res.detectors.push_back(std::make_unique<RemoteDetector>(spec.remote));
    } else if (!spec.model.empty()) {
      res.detectors.push_back(std::make_unique<ReferenceDetector>(ReferenceDetector::load(spec.model)));
    } else {
      const Corpus training = spec.train_corpus.empty() ? in.corpus : Corpus(read_records(spec.train_corpus));
      res.detectors.push_back(std::make_unique<ReferenceDetector>(train_reference_detector(training, spec.train)));
    }
    in.detectors.push_back({spec.name, res.detectors.back().get()});
  }
  if (!config.generator_url.empty()) {
    HttpEndpoint endpoint;
    endpoint.base_url = config.generator_url;
    auto replay = config.generator_replay_log.empty() ? std::make_shared<ReplayLog>()
                                                       : std::make_shared<ReplayLog>(config.generator_replay_log);
    res.generator_client = std::make_shared<RemoteGeneratorClient>(endpoint, replay);
    res.infill = std::make_unique<RemoteInfill>(res.generator_client);
    res.continuation = std::make_unique<RemoteContinuation>(res.generator_client);
  } else {
    res.continuation = std::make_unique<MarkovChainGenerator>(MarkovChainGenerator::fit(in.corpus.documents()));
  }
  in.infill = res.infill.get();
  in.continuation = res.continuation.get();
  return res;
}

/// Full pipeline: load, run, score any study data, and write report.json,
/// table1.csv, table2.csv, removal_curves.csv and run_stats.json.
inline ExperimentReport run(const ExperimentConfig& config) {
  detail::Timer total;
  RunInputs in = load_inputs(config);
  Resources res = build_resources(config, in);
  RunStats stats;
  ExperimentReport report = run_experiments(config, in, &stats);
  if (!config.study.pairs_file.empty() && !config.study.sessions_log.empty() &&
      std::filesystem::exists(config.study.sessions_log)) {
    try {
      const SessionStore store(load_study_sets(config.study.pairs_file), config.study.sessions_log);
      report.study = score_study(store.sessions(), store.sets());
    } catch (const std::exception& e) {
      report.gaps.push_back({"*", "*", "study", e.what()});
    }
  }
  const std::filesystem::path out = config.output_dir;
  detail::write_text(out / "report.json", to_json(report).dump(2) + "\n");
  render_report(report, ReportFormat::csv, out);
  nlohmann::ordered_json s;
  s["total_ms"] = total.ms();
  s["threads"] = config.threads;
  s["cache_hits"] = stats.cache_hits;
  s["cache_misses"] = stats.cache_misses;
  s["detector_calls"] = stats.detector_calls;
  s["experiments"] = stats.timings;
  detail::write_text(out / "run_stats.json", s.dump(2) + "\n");
  return report;
}

/// Study sets from the configured corpus: one per detector, explanations
/// seeded exactly as in the token-removal experiment (so the cache is shared).
inline std::vector<StudySet> prepare_study_sets(const ExperimentConfig& config, const RunInputs& in) {
  std::shared_ptr<const ExplanationCache> cache;
  if (config.use_cache) {
    cache = std::make_shared<ExplanationCache>(config.cache_dir.empty()
                                                   ? std::filesystem::path(config.output_dir) / "cache"
                                                   : std::filesystem::path(config.cache_dir));
  }
  std::vector<StudySet> sets;
  for (const auto& named : in.detectors) {
    const Detector& det = *named.detector;
    const auto preds = predict_documents(det, in.docs);
    std::map<Method, std::vector<Explanation>> ex;
    for (Method m : kStudyMethods) {
      const Explainer explainer = with_cache(make_explainer(m, det, config.explainer), det, cache);
      auto& list = ex[m];
      list.resize(in.docs.size());
      parallel_for(in.docs.size(), config.threads, [&](std::size_t i) {
        list[i] = explainer.explain(in.docs[i], doc_seed(config.seed, "explain", in.docs[i]));
      });
    }
    StudySetOptions o;
    o.pairs_per_method = config.study.pairs_per_method;
    o.top_k_candidates = config.study.top_k_candidates;
    o.seed = config.seed;
    sets.push_back(build_study_set(named.name, in.docs, preds, ex, o));
  }
  return sets;
}

}  // namespace xqeval

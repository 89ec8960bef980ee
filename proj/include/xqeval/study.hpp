#pragma once

// Forward-simulation study backend: pair selection, sessions, scoring.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "xqeval/corpus.hpp"
#include "xqeval/detector.hpp"
#include "xqeval/explanation.hpp"

namespace xqeval {

class NotFoundError : public Error {
 public:
  using Error::Error;
};

struct StudyPair {
  /// Shown with decisions in phases 1 and 3.
  std::string shown;
  /// Annotated in phases 2 and 4.
  std::string probe;
  Method selected_by = Method::lime;
  friend bool operator==(const StudyPair&, const StudyPair&) = default;
  friend std::ostream& operator<<(std::ostream& os, const StudyPair& p) {
    return os << p.shown << " -> " << p.probe << " (" << to_string(p.selected_by) << ")";
  }
};

// ---------------------------------------------------------------------------
// Similarity

/// Lower-cased types of the `top` tokens with the largest nonzero |score|
/// (ties by position).
inline std::set<std::string> salient_features(const FeatureImportance& fi, const Document& doc,
                                              std::size_t top = 10) {
  if (fi.scores.size() != doc.size()) throw ArgumentError("salient_features: score length mismatch for '" + doc.id + "'");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < fi.scores.size(); ++i) {
    if (fi.scores[i] != 0.0) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(fi.scores[a]) > std::abs(fi.scores[b]); });
  std::set<std::string> out;
  for (std::size_t i = 0; i < order.size() && i < top; ++i) out.insert(detail::ascii_lower(doc.token(order[i])));
  return out;
}

/// Cosine similarity of two binary bag-of-words vectors.
inline double binary_cosine(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() || b.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& x : a) common += b.count(x);
  return double(common) / std::sqrt(double(a.size()) * double(b.size()));
}

inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& x : a) common += b.count(x);
  return double(common) / double(a.size() + b.size() - common);
}

inline std::set<std::string> token_types(const Document& doc) {
  std::set<std::string> out;
  for (std::size_t i = 0; i < doc.size(); ++i) out.insert(detail::ascii_lower(doc.token(i)));
  return out;
}

// ---------------------------------------------------------------------------
// Pair selection

struct FiSelectionOptions {
  std::size_t top_k_candidates = 100;
  std::size_t n_pairs = 6;
  std::size_t salient = 10;
};

namespace detail {

inline std::size_t index_of(const std::vector<Document>& docs, const std::string& id) {
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].id == id) return i;
  }
  throw ArgumentError("unknown document '" + id + "'");
}

inline std::string split_summary(std::size_t machine, std::size_t human, std::size_t wanted) {
  return "achievable split so far: " + std::to_string(machine) + " machine / " + std::to_string(human) +
         " human probes of " + std::to_string(wanted);
}

}  // namespace detail

/// Ranks unordered pairs sharing a salient feature by cosine of
/// salient-feature bags, keeps the `top_k_candidates` most similar, then greedily adds the pair that covers
/// most not-yet-covered salient features (ties: more similar first) while
/// keeping probe predictions balanced. Documents are used at most once and
/// never when listed in `exclude`.
inline std::vector<StudyPair> select_pairs_fi(const std::vector<Document>& docs,
                                              const std::vector<FeatureImportance>& explanations,
                                              const std::vector<Prediction>& predictions,
                                              const FiSelectionOptions& options = {},
                                              const std::set<std::string>& exclude = {},
                                              Method method = Method::lime) {
  if (docs.size() != explanations.size() || docs.size() != predictions.size()) {
    throw ArgumentError("select_pairs_fi: documents, explanations and predictions differ in length");
  }
  if (options.n_pairs < 1) throw ArgumentError("select_pairs_fi: n_pairs must be >= 1");
  std::vector<std::set<std::string>> salient;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (explanations[i].doc_id != docs[i].id) throw ArgumentError("select_pairs_fi: explanation order mismatch");
    salient.push_back(salient_features(explanations[i], docs[i], options.salient));
  }
  struct Candidate {
    std::size_t a, b;
    double cosine;
  };
  std::vector<Candidate> ranked;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (exclude.count(docs[i].id)) continue;
    for (std::size_t j = i + 1; j < docs.size(); ++j) {
      if (exclude.count(docs[j].id)) continue;
      const double cosine = binary_cosine(salient[i], salient[j]);
      if (cosine > 0.0) ranked.push_back({i, j, cosine});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Candidate& x, const Candidate& y) { return x.cosine > y.cosine; });
  if (ranked.size() > options.top_k_candidates) ranked.resize(options.top_k_candidates);

  const std::size_t per_label = (options.n_pairs + 1) / 2;
  std::map<Label, std::size_t> probes;
  std::set<std::size_t> used;
  std::set<std::string> covered;
  std::vector<StudyPair> out;
  while (out.size() < options.n_pairs) {
    std::optional<std::size_t> best;
    std::size_t best_gain = 0, best_probe = 0;
    for (std::size_t c = 0; c < ranked.size(); ++c) {
      const Candidate& cand = ranked[c];
      if (used.count(cand.a) || used.count(cand.b)) continue;
      std::optional<std::size_t> probe;
      for (std::size_t p : {cand.b, cand.a}) {
        if (probes[predictions[p].label] < per_label) {
          probe = p;
          break;
        }
      }
      if (!probe) continue;
      std::size_t gain = 0;
      std::set<std::string> both = salient[cand.a];
      both.insert(salient[cand.b].begin(), salient[cand.b].end());
      for (const auto& f : both) gain += !covered.count(f);
      if (!best || gain > best_gain) {
        best = c;
        best_gain = gain;
        best_probe = *probe;
      }
    }
    if (!best) {
      throw ArgumentError("select_pairs_fi: cannot complete a balanced set of " + std::to_string(options.n_pairs) +
                          " pairs; " +
                          detail::split_summary(probes[Label::machine], probes[Label::human], options.n_pairs));
    }
    const Candidate& chosen = ranked[*best];
    const std::size_t shown = chosen.a == best_probe ? chosen.b : chosen.a;
    used.insert(chosen.a);
    used.insert(chosen.b);
    covered.insert(salient[chosen.a].begin(), salient[chosen.a].end());
    covered.insert(salient[chosen.b].begin(), salient[chosen.b].end());
    ++probes[predictions[best_probe].label];
    out.push_back({docs[shown].id, docs[best_probe].id, method});
  }
  return out;
}

/// For every document with a nonempty anchor, the other document with the
/// same anchor token-type set and prediction whose word types overlap most
/// (Jaccard); `n_pairs` of these are then drawn at random (seeded) subject to
/// balance and single use.
inline std::vector<StudyPair> select_pairs_anchor(const std::vector<Document>& docs,
                                                  const std::vector<AnchorRule>& rules,
                                                  const std::vector<Prediction>& predictions, std::size_t n_pairs,
                                                  std::uint64_t seed, const std::set<std::string>& exclude = {}) {
  if (docs.size() != rules.size() || docs.size() != predictions.size()) {
    throw ArgumentError("select_pairs_anchor: documents, rules and predictions differ in length");
  }
  if (n_pairs < 1) throw ArgumentError("select_pairs_anchor: n_pairs must be >= 1");
  std::vector<std::set<std::string>> keys, types;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (rules[i].doc_id != docs[i].id) throw ArgumentError("select_pairs_anchor: rule order mismatch");
    std::set<std::string> key;
    for (const auto& t : rules[i].token_types) key.insert(detail::ascii_lower(t));
    keys.push_back(std::move(key));
    types.push_back(token_types(docs[i]));
  }
  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t a = 0; a < docs.size(); ++a) {
    if (keys[a].empty() || exclude.count(docs[a].id)) continue;
    std::optional<std::size_t> best;
    double best_j = -1.0;
    for (std::size_t b = 0; b < docs.size(); ++b) {
      if (b == a || exclude.count(docs[b].id) || keys[b] != keys[a]) continue;
      if (predictions[b].label != predictions[a].label) continue;
      const double j = jaccard(types[a], types[b]);
      if (j > best_j) {
        best = b;
        best_j = j;
      }
    }
    if (best && seen.insert({std::min(a, *best), std::max(a, *best)}).second) candidates.push_back({a, *best});
  }
  Rng rng(seed);
  rng.shuffle(candidates);
  const std::size_t per_label = (n_pairs + 1) / 2;
  std::map<Label, std::size_t> probes;
  std::set<std::size_t> used;
  std::vector<StudyPair> out;
  for (const auto& [a, b] : candidates) {
    if (out.size() == n_pairs) break;
    if (used.count(a) || used.count(b)) continue;
    const Label label = predictions[b].label;
    if (probes[label] >= per_label) continue;
    used.insert(a);
    used.insert(b);
    ++probes[label];
    out.push_back({docs[a].id, docs[b].id, Method::anchor});
  }
  if (out.size() < n_pairs) {
    throw ArgumentError("select_pairs_anchor: only " + std::to_string(candidates.size()) +
                        " candidate pairs yield " + std::to_string(out.size()) + " usable of " +
                        std::to_string(n_pairs) + "; " +
                        detail::split_summary(probes[Label::machine], probes[Label::human], n_pairs));
  }
  return out;
}

/// `n_pairs` pairs of distinct random documents (the similarity baseline).
inline std::vector<std::pair<std::size_t, std::size_t>> random_pairs(std::size_t n_docs, std::size_t n_pairs,
                                                                     std::uint64_t seed) {
  if (2 * n_pairs > n_docs) throw ArgumentError("random_pairs: not enough documents");
  Rng rng(seed);
  const auto picks = rng.sample(n_docs, 2 * n_pairs);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < n_pairs; ++i) out.push_back({picks[2 * i], picks[2 * i + 1]});
  return out;
}

// ---------------------------------------------------------------------------
// Tests

/// Exact two-sided McNemar test: p = min(1, 2 P[X <= min(b, c)]),
/// X ~ Binomial(b + c, 1/2).
inline double mcnemar_exact(std::uint64_t b, std::uint64_t c) {
  const std::uint64_t n = b + c;
  if (n == 0) return 1.0;
  const std::uint64_t lo = std::min(b, c);
  const long double log_half_n = (long double)n * std::log(0.5L);
  long double tail = 0.0L;
  for (std::uint64_t k = 0; k <= lo; ++k) {
    const long double log_binom = std::lgamma((long double)n + 1) - std::lgamma((long double)k + 1) -
                                  std::lgamma((long double)(n - k) + 1);
    tail += std::exp(log_binom + log_half_n);
  }
  return double(std::min(1.0L, 2.0L * tail));
}

/// One-sided permutation test that mean(a) exceeds mean(b):
/// (1 + #{permutations with difference >= observed}) / (1 + iterations).
inline double permutation_p_greater(const std::vector<double>& a, const std::vector<double>& b,
                                    std::size_t iterations, std::uint64_t seed) {
  if (a.empty() || b.empty()) throw ArgumentError("permutation_p_greater: empty sample");
  auto mean_diff = [&](const std::vector<double>& pool) {
    double sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) sa += pool[i];
    for (std::size_t i = a.size(); i < pool.size(); ++i) sb += pool[i];
    return sa / double(a.size()) - sb / double(b.size());
  };
  std::vector<double> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  const double observed = mean_diff(pool);
  Rng rng(seed);
  std::size_t extreme = 0;
  for (std::size_t i = 0; i < iterations; ++i) {
    rng.shuffle(pool);
    if (mean_diff(pool) >= observed - 1e-12) ++extreme;
  }
  return double(1 + extreme) / double(1 + iterations);
}

// ---------------------------------------------------------------------------
// Study sets

/// A document as shown to participants, with its rendered explanations.
struct StudyItem {
  std::string doc_id;
  std::string text;
  Prediction prediction;
  std::vector<std::string> tokens;
  std::map<Method, Explanation> explanations;
};

/// One document set per detector, shared by every method's participants.
struct StudySet {
  std::string detector;
  std::vector<StudyPair> pairs;
  std::map<std::string, StudyItem> items;

  const StudyItem& item(const std::string& id) const {
    auto it = items.find(id);
    if (it == items.end()) throw ArgumentError("study set '" + detector + "' has no document '" + id + "'");
    return it->second;
  }
  std::vector<std::string> shown() const {
    std::vector<std::string> out;
    for (const auto& p : pairs) out.push_back(p.shown);
    return out;
  }
  std::vector<std::string> probes() const {
    std::vector<std::string> out;
    for (const auto& p : pairs) out.push_back(p.probe);
    return out;
  }
};

inline constexpr std::array<Method, 3> kStudyMethods = {Method::shap_partition, Method::lime, Method::anchor};

struct StudySetOptions {
  std::size_t pairs_per_method = 6;
  std::size_t top_k_candidates = 100;
  std::uint64_t seed = 0;
};

/// `pairs_per_method` pairs from each method's selection strategy, no
/// document reused within the set. `explanations[m][i]` explains docs[i].
inline StudySet build_study_set(const std::string& detector_id, const std::vector<Document>& docs,
                                const std::vector<Prediction>& predictions,
                                const std::map<Method, std::vector<Explanation>>& explanations,
                                const StudySetOptions& options = {}) {
  StudySet set;
  set.detector = detector_id;
  std::set<std::string> used;
  for (Method m : kStudyMethods) {
    auto it = explanations.find(m);
    if (it == explanations.end()) throw ArgumentError("build_study_set: missing explanations for " + std::string(to_string(m)));
    if (it->second.size() != docs.size()) throw ArgumentError("build_study_set: explanation count mismatch");
    std::vector<StudyPair> pairs;
    if (m == Method::anchor) {
      std::vector<AnchorRule> rules;
      for (const auto& e : it->second) rules.push_back(std::get<AnchorRule>(e));
      pairs = select_pairs_anchor(docs, rules, predictions, options.pairs_per_method,
                                  derive_seed(options.seed, "study-anchor"), used);
    } else {
      std::vector<FeatureImportance> fis;
      for (const auto& e : it->second) fis.push_back(std::get<FeatureImportance>(e));
      FiSelectionOptions fo;
      fo.n_pairs = options.pairs_per_method;
      fo.top_k_candidates = options.top_k_candidates;
      pairs = select_pairs_fi(docs, fis, predictions, fo, used, m);
    }
    for (const auto& p : pairs) {
      used.insert(p.shown);
      used.insert(p.probe);
      set.pairs.push_back(p);
    }
  }
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!used.count(docs[i].id)) continue;
    StudyItem item;
    item.doc_id = docs[i].id;
    item.text = docs[i].text;
    item.prediction = predictions[i];
    for (std::size_t t = 0; t < docs[i].size(); ++t) item.tokens.emplace_back(docs[i].token(t));
    for (const auto& [m, list] : explanations) item.explanations.emplace(m, list[i]);
    set.items.emplace(item.doc_id, std::move(item));
  }
  return set;
}

/// Participant-facing explanation: tokens with scores or the anchor tokens.
inline nlohmann::ordered_json render_explanation(const Explanation& e, const StudyItem& item) {
  nlohmann::ordered_json j;
  if (const auto* fi = std::get_if<FeatureImportance>(&e)) {
    j["kind"] = "scores";
    j["tokens"] = item.tokens;
    j["scores"] = fi->scores;
  } else {
    const auto& rule = std::get<AnchorRule>(e);
    j["kind"] = "anchor";
    j["tokens"] = item.tokens;
    j["anchor_positions"] = rule.token_positions;
    j["anchor_tokens"] = rule.token_types;
  }
  return j;
}

inline nlohmann::ordered_json to_json(const StudySet& set) {
  nlohmann::ordered_json j;
  j["detector"] = set.detector;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : set.pairs) {
    j["pairs"].push_back({{"shown", p.shown}, {"probe", p.probe}, {"selected_by", to_string(p.selected_by)}});
  }
  j["items"] = nlohmann::ordered_json::array();
  for (const auto& [id, item] : set.items) {
    nlohmann::ordered_json x;
    x["doc_id"] = id;
    x["text"] = item.text;
    x["label"] = to_string(item.prediction.label);
    x["score"] = item.prediction.score;
    nlohmann::ordered_json ex = nlohmann::ordered_json::object();
    for (const auto& [m, e] : item.explanations) ex[to_string(m)] = nlohmann::ordered_json::parse(to_json(e).dump());
    x["explanations"] = ex;
    j["items"].push_back(x);
  }
  return j;
}

inline StudySet study_set_from_json(const nlohmann::json& j) {
  StudySet set;
  set.detector = j.at("detector").get<std::string>();
  for (const auto& p : j.at("pairs")) {
    set.pairs.push_back({p.at("shown").get<std::string>(), p.at("probe").get<std::string>(),
                         parse_method(p.at("selected_by").get<std::string>())});
  }
  for (const auto& x : j.at("items")) {
    StudyItem item;
    item.doc_id = x.at("doc_id").get<std::string>();
    item.text = x.at("text").get<std::string>();
    item.prediction = {parse_label(x.at("label").get<std::string>()), x.at("score").get<double>()};
    const Document doc = make_document(item.doc_id, item.text, item.prediction.label);
    for (std::size_t t = 0; t < doc.size(); ++t) item.tokens.emplace_back(doc.token(t));
    for (const auto& [m, e] : x.at("explanations").items()) item.explanations.emplace(parse_method(m), explanation_from_json(e));
    set.items.emplace(item.doc_id, std::move(item));
  }
  for (const auto& p : set.pairs) {
    set.item(p.shown);
    set.item(p.probe);
  }
  return set;
}

/// Pairs file: {"sets": [StudySet...]}.
inline void save_study_sets(const std::vector<StudySet>& sets, const std::string& path) {
  nlohmann::ordered_json j;
  j["sets"] = nlohmann::ordered_json::array();
  for (const auto& s : sets) j["sets"].push_back(to_json(s));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write study pairs '" + path + "'");
  out << j.dump(2) << '\n';
}

inline std::vector<StudySet> load_study_sets(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read study pairs '" + path + "'");
  try {
    const auto j = nlohmann::json::parse(in);
    std::vector<StudySet> sets;
    for (const auto& s : j.at("sets")) sets.push_back(study_set_from_json(s));
    return sets;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("study pairs: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Sessions

enum class Phase { p1, p2, p3, p4, done };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::p1: return "p1";
    case Phase::p2: return "p2";
    case Phase::p3: return "p3";
    case Phase::p4: return "p4";
    case Phase::done: return "done";
  }
  return "unknown";
}

inline Phase parse_phase(std::string_view s) {
  for (Phase p : {Phase::p1, Phase::p2, Phase::p3, Phase::p4, Phase::done}) {
    if (s == to_string(p)) return p;
  }
  throw ArgumentError("unknown phase '" + std::string(s) + "'");
}

inline constexpr std::array<const char*, 3> kLikertItems = {
    "From the explanation, I understand why the detector decided the way it did for this document.",
    "From the explanation, I now better understand how the detector works.",
    "The information from this explanation will help me predict the detector's behaviour.",
};

struct AuditRecord {
  std::string what;  // "annotation" or "likert"
  std::string phase;
  std::string doc_id;
  std::string previous;
  std::string replacement;
  std::string ts;
};

struct Session {
  std::string id;
  std::string participant;
  std::string detector;
  Method method = Method::lime;
  Phase phase = Phase::p1;
  std::map<std::pair<Phase, std::string>, Label> annotations;
  /// (doc id, question 1..3) -> 1..5.
  std::map<std::pair<std::string, int>, int> likert;
  /// Entry time of each phase reached, in order.
  std::vector<std::pair<Phase, std::string>> timestamps;
  std::vector<AuditRecord> audit;
};

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Sessions backed by an append-only JSONL event log; constructing a store
/// over an existing log replays it. All methods are thread-safe.
class SessionStore {
 public:
  using Clock = std::function<std::string()>;

  explicit SessionStore(std::vector<StudySet> sets, std::string log_path = {}, Clock clock = utc_now)
      : sets_(std::move(sets)), log_path_(std::move(log_path)), clock_(std::move(clock)) {
    for (const auto& s : sets_) {
      if (!by_detector_.emplace(s.detector, &s).second) throw ArgumentError("duplicate study set for '" + s.detector + "'");
    }
    if (!log_path_.empty()) replay();
  }

  SessionStore(const SessionStore&) = delete;
  SessionStore& operator=(const SessionStore&) = delete;

  std::string create_session(const std::string& participant, const std::string& detector, Method method) {
    std::lock_guard lock(mutex_);
    nlohmann::ordered_json e = {{"type", "create"},
                                {"participant", participant},
                                {"detector", detector},
                                {"method", to_string(method)}};
    return commit(std::move(e));
  }

  void post_annotation(const std::string& id, const std::string& doc_id, Label label) {
    std::lock_guard lock(mutex_);
    commit({{"type", "annotation"}, {"session", id}, {"doc_id", doc_id}, {"label", to_string(label)}});
  }

  void post_likert(const std::string& id, const std::string& doc_id, int question, int value) {
    std::lock_guard lock(mutex_);
    commit({{"type", "likert"}, {"session", id}, {"doc_id", doc_id}, {"q", question}, {"value", value}});
  }

  Phase advance(const std::string& id) {
    std::lock_guard lock(mutex_);
    commit({{"type", "advance"}, {"session", id}});
    return sessions_.at(id).phase;
  }

  Session session(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return find(id);
  }

  std::vector<Session> sessions() const {
    std::lock_guard lock(mutex_);
    std::vector<Session> out;
    for (const auto& [_, s] : sessions_) out.push_back(s);
    return out;
  }

  const std::vector<StudySet>& sets() const { return sets_; }
  std::size_t events() const {
    std::lock_guard lock(mutex_);
    return seq_;
  }

  /// Phase payload. Decisions appear in p1 and p3, explanations only in p3.
  nlohmann::ordered_json task(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const Session& s = find(id);
    const StudySet& set = *by_detector_.at(s.detector);
    nlohmann::ordered_json j;
    j["session_id"] = s.id;
    j["phase"] = to_string(s.phase);
    j["method"] = to_string(s.method);
    if (s.phase == Phase::done) {
      j["instruction"] = "The study is complete. Thank you.";
      j["items"] = nlohmann::ordered_json::array();
      return j;
    }
    const bool teaching = s.phase == Phase::p1 || s.phase == Phase::p3;
    switch (s.phase) {
      case Phase::p1: j["instruction"] = "Inspect the detector's decisions on these documents."; break;
      case Phase::p2:
      case Phase::p4:
        j["instruction"] =
            "Predict what the detector will decide for each document. Do not guess the true origin of the text.";
        break;
      case Phase::p3:
        j["instruction"] = "Inspect the detector's decisions with explanations and rate each explanation.";
        j["likert_items"] = kLikertItems;
        break;
      case Phase::done: break;
    }
    j["items"] = nlohmann::ordered_json::array();
    for (const auto& doc_id : teaching ? set.shown() : set.probes()) {
      const StudyItem& item = set.item(doc_id);
      nlohmann::ordered_json x = {{"doc_id", doc_id}, {"text", item.text}};
      if (teaching) x["decision"] = to_string(item.prediction.label);
      if (s.phase == Phase::p3) {
        auto e = item.explanations.find(s.method);
        if (e != item.explanations.end()) x["explanation"] = render_explanation(e->second, item);
      }
      if (s.phase == Phase::p2 || s.phase == Phase::p4) {
        auto a = s.annotations.find({s.phase, doc_id});
        if (a != s.annotations.end()) x["annotation"] = to_string(a->second);
      }
      j["items"].push_back(x);
    }
    return j;
  }

 private:
  const Session& find(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
  }
  Session& find(const std::string& id) { return const_cast<Session&>(std::as_const(*this).find(id)); }

  /// Validates and applies `event`, then appends it to the log.
  std::string commit(nlohmann::ordered_json event) {
    event["seq"] = seq_ + 1;
    event["ts"] = clock_();
    const std::string result = apply(event);
    if (!log_path_.empty()) {
      std::ofstream out(log_path_, std::ios::binary | std::ios::app);
      if (!out) throw IoError("cannot append to session log '" + log_path_ + "'");
      out << event.dump() << '\n';
      out.flush();
      if (!out) throw IoError("failed writing session log '" + log_path_ + "'");
    }
    ++seq_;
    return result;
  }

  void replay() {
    std::ifstream in(log_path_, std::ios::binary);
    if (!in) return;
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
      if (line.empty()) continue;
      nlohmann::ordered_json event;
      try {
        event = nlohmann::ordered_json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(number, std::string("session log: ") + e.what());
      }
      apply(event);
      seq_ = event.at("seq").get<std::size_t>();
    }
  }

  std::string apply(const nlohmann::ordered_json& e) {
    const std::string type = e.at("type").get<std::string>();
    const std::string ts = e.at("ts").get<std::string>();
    if (type == "create") {
      const std::string detector = e.at("detector").get<std::string>();
      if (!by_detector_.count(detector)) throw ArgumentError("no study set for detector '" + detector + "'");
      const Method method = parse_method(e.at("method").get<std::string>());
      if (method == Method::random) throw ArgumentError("the random baseline has no study condition");
      const std::string participant = e.at("participant").get<std::string>();
      if (participant.empty()) throw ArgumentError("participant must be non-empty");
      Session s;
      s.participant = participant;
      s.detector = detector;
      s.method = method;
      s.id = "s" + sha256_hex(participant + "\n" + detector + "\n" + to_string(method) + "\n" +
                              std::to_string(e.at("seq").get<std::size_t>()))
                       .substr(0, 15);
      s.timestamps.push_back({Phase::p1, ts});
      const std::string id = s.id;
      sessions_.emplace(id, std::move(s));
      return id;
    }
    Session& s = find(e.at("session").get<std::string>());
    const StudySet& set = *by_detector_.at(s.detector);
    if (type == "annotation") {
      if (s.phase != Phase::p2 && s.phase != Phase::p4) {
        throw StateError(std::string("annotations are accepted in p2 and p4, session is in ") + to_string(s.phase));
      }
      const std::string doc = e.at("doc_id").get<std::string>();
      const auto probes = set.probes();
      if (std::find(probes.begin(), probes.end(), doc) == probes.end()) {
        throw ArgumentError("document '" + doc + "' is not annotated in this phase");
      }
      const Label label = parse_label(e.at("label").get<std::string>());
      auto [it, fresh] = s.annotations.try_emplace({s.phase, doc}, label);
      if (!fresh) {
        s.audit.push_back({"annotation", to_string(s.phase), doc, to_string(it->second), to_string(label), ts});
        it->second = label;
      }
    } else if (type == "likert") {
      if (s.phase != Phase::p3) throw StateError(std::string("ratings are accepted in p3, session is in ") + to_string(s.phase));
      const std::string doc = e.at("doc_id").get<std::string>();
      const auto shown = set.shown();
      if (std::find(shown.begin(), shown.end(), doc) == shown.end()) {
        throw ArgumentError("document '" + doc + "' is not rated in this phase");
      }
      const int q = e.at("q").get<int>();
      const int value = e.at("value").get<int>();
      if (q < 1 || q > 3) throw ArgumentError("question must be 1, 2 or 3");
      if (value < 1 || value > 5) throw ArgumentError("rating must lie on the 1..5 scale");
      auto [it, fresh] = s.likert.try_emplace({doc, q}, value);
      if (!fresh) {
        s.audit.push_back({"likert", "Q" + std::to_string(q), doc, std::to_string(it->second), std::to_string(value), ts});
        it->second = value;
      }
    } else if (type == "advance") {
      const std::size_t n = set.pairs.size();
      auto annotated = [&](Phase p) {
        std::size_t count = 0;
        for (const auto& doc : set.probes()) count += s.annotations.count({p, doc});
        return count;
      };
      switch (s.phase) {
        case Phase::p1: s.phase = Phase::p2; break;
        case Phase::p2:
          if (annotated(Phase::p2) < n) throw StateError("p2 incomplete: " + std::to_string(annotated(Phase::p2)) + " of " + std::to_string(n) + " annotated");
          s.phase = Phase::p3;
          break;
        case Phase::p3:
          if (s.likert.size() < 3 * n) throw StateError("p3 incomplete: " + std::to_string(s.likert.size()) + " of " + std::to_string(3 * n) + " ratings");
          s.phase = Phase::p4;
          break;
        case Phase::p4:
          if (annotated(Phase::p4) < n) throw StateError("p4 incomplete: " + std::to_string(annotated(Phase::p4)) + " of " + std::to_string(n) + " annotated");
          s.phase = Phase::done;
          break;
        case Phase::done: throw StateError("session already complete");
      }
      s.timestamps.push_back({s.phase, ts});
    } else {
      throw ParseError(0, "unknown session event '" + type + "'");
    }
    return s.id;
  }

  std::vector<StudySet> sets_;
  std::map<std::string, const StudySet*> by_detector_;
  std::string log_path_;
  Clock clock_;
  std::map<std::string, Session> sessions_;
  std::size_t seq_ = 0;
  mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Scoring

struct StudyResult {
  Method method = Method::lime;
  /// Accuracy at predicting the detector's decision before / after explanations.
  double acc_without = 0.0;
  double acc_with = 0.0;
  /// (acc_with / acc_without - 1) * 100.
  double change = 0.0;
  double mcnemar_p = 1.0;
  /// Discordant items: right then wrong, wrong then right.
  std::size_t b = 0, c = 0;
  std::array<double, 3> likert_means = {0, 0, 0};
  std::size_t sessions = 0;
  std::size_t items = 0;
  /// Sessions not yet done, left out.
  std::size_t excluded = 0;
};

/// Per-method results over completed sessions, optionally restricted to one
/// method or detector. Annotations are paired per (session, probe).
inline std::vector<StudyResult> score_study(const std::vector<Session>& sessions, const std::vector<StudySet>& sets,
                                            std::optional<Method> method = std::nullopt,
                                            const std::optional<std::string>& detector = std::nullopt) {
  std::map<std::string, const StudySet*> by_detector;
  for (const auto& s : sets) by_detector[s.detector] = &s;
  struct Acc {
    std::size_t right2 = 0, right4 = 0, items = 0, b = 0, c = 0, sessions = 0, excluded = 0;
    std::array<double, 3> likert_sum = {0, 0, 0};
    std::array<std::size_t, 3> likert_n = {0, 0, 0};
  };
  std::map<Method, Acc> acc;
  for (const Session& s : sessions) {
    if (method && s.method != *method) continue;
    if (detector && s.detector != *detector) continue;
    Acc& a = acc[s.method];
    if (s.phase != Phase::done) {
      ++a.excluded;
      continue;
    }
    const StudySet& set = *by_detector.at(s.detector);
    ++a.sessions;
    for (const auto& doc : set.probes()) {
      const Label truth = set.item(doc).prediction.label;
      const bool r2 = s.annotations.at({Phase::p2, doc}) == truth;
      const bool r4 = s.annotations.at({Phase::p4, doc}) == truth;
      a.right2 += r2;
      a.right4 += r4;
      a.b += r2 && !r4;
      a.c += !r2 && r4;
      ++a.items;
    }
    for (const auto& [key, value] : s.likert) {
      a.likert_sum[key.second - 1] += value;
      ++a.likert_n[key.second - 1];
    }
  }
  std::vector<StudyResult> out;
  for (const auto& [m, a] : acc) {
    StudyResult r;
    r.method = m;
    r.sessions = a.sessions;
    r.excluded = a.excluded;
    r.items = a.items;
    r.b = a.b;
    r.c = a.c;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.acc_without = a.items ? double(a.right2) / double(a.items) : nan;
    r.acc_with = a.items ? double(a.right4) / double(a.items) : nan;
    r.change = a.right2 ? (r.acc_with / r.acc_without - 1.0) * 100.0 : nan;
    r.mcnemar_p = mcnemar_exact(a.b, a.c);
    for (int q = 0; q < 3; ++q) r.likert_means[q] = a.likert_n[q] ? a.likert_sum[q] / double(a.likert_n[q]) : nan;
    out.push_back(r);
  }
  return out;
}

inline nlohmann::ordered_json to_json(const StudyResult& r) {
  auto num = [](double x) { return std::isnan(x) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(x); };
  return {{"method", to_string(r.method)},
          {"acc_without", num(r.acc_without)},
          {"acc_with", num(r.acc_with)},
          {"change_pct", num(r.change)},
          {"mcnemar_p", r.mcnemar_p},
          {"b", r.b},
          {"c", r.c},
          {"likert_means", {num(r.likert_means[0]), num(r.likert_means[1]), num(r.likert_means[2])}},
          {"sessions", r.sessions},
          {"items", r.items},
          {"excluded", r.excluded}};
}

}  // namespace xqeval

#pragma once

// Pointing game on hybrid documents and the token-removal curve.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "xqeval/corpus.hpp"
#include "xqeval/detector.hpp"
#include "xqeval/explanation.hpp"
#include "xqeval/perturb.hpp"

namespace xqeval {

// ---------------------------------------------------------------------------
// Hybrid documents

/// Documents built from sentences sampled across the corpus; every sentence
/// keeps the id and gold label of the document it came from. Each hybrid has
/// round(mean sentences per corpus document) sentences, distinct within a
/// hybrid and drawn independently across hybrids.
inline std::vector<Document> build_hybrid_dataset(const Corpus& corpus, std::size_t n_docs,
                                                  std::uint64_t seed) {
  struct Source {
    const Document* doc;
    Span span;
  };
  std::vector<Source> pool;
  for (const Document& d : corpus) {
    for (const Sentence& s : d.sentences) {
      if (s.span.size() > 0) pool.push_back({&d, s.span});
    }
  }
  if (corpus.empty() || pool.empty()) throw ArgumentError("build_hybrid_dataset: corpus has no sentences");
  const double mean = double(pool.size()) / double(corpus.size());
  const auto per_doc = static_cast<std::size_t>(std::max(1.0, std::round(mean)));
  if (pool.size() < per_doc) {
    throw ArgumentError("build_hybrid_dataset: " + std::to_string(pool.size()) +
                        " sentences cannot fill hybrids of " + std::to_string(per_doc));
  }

  Rng rng(seed);
  std::vector<Document> out;
  out.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    std::string text;
    std::vector<Sentence> sentences;
    std::size_t machine = 0;
    for (std::size_t pick : rng.sample(pool.size(), per_doc)) {
      const Source& src = pool[pick];
      if (!text.empty()) text += ' ';
      const std::size_t begin = text.size();
      text.append(src.doc->text, src.span.begin, src.span.size());
      sentences.push_back({{begin, text.size()}, Provenance{src.doc->id, src.doc->gold}});
      machine += src.doc->gold == Label::machine;
    }
    const Label majority = 2 * machine >= per_doc ? Label::machine : Label::human;
    out.push_back(make_document_with_sentences("hybrid-" + std::to_string(i), std::move(text), majority,
                                               std::move(sentences)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointing game

struct PointingGameResult {
  double acc_pg = 0.0;
  std::vector<double> per_doc_hits;
  std::size_t n = 0;
  /// Documents scored as a miss because the explanation had nothing to point at.
  std::size_t flagged = 0;
};

namespace detail {

inline PointingGameResult summarize_hits(std::vector<double> hits, std::size_t flagged) {
  PointingGameResult r;
  r.n = hits.size();
  r.flagged = flagged;
  double total = 0.0;
  for (double h : hits) total += h;
  r.acc_pg = hits.empty() ? 0.0 : total / double(hits.size());
  r.per_doc_hits = std::move(hits);
  return r;
}

inline void check_aligned(const std::vector<Document>& hybrids, std::size_t predictions,
                          std::size_t explanations) {
  if (predictions != hybrids.size() || explanations != hybrids.size()) {
    throw ArgumentError("pointing game: documents, predictions and explanations differ in length");
  }
}

}  // namespace detail

/// Hit when the top-scoring token (lowest index on ties) sits in a sentence
/// whose source label equals the prediction. All-zero vectors are misses.
inline PointingGameResult pointing_game(const std::vector<Document>& hybrids,
                                        const std::vector<Prediction>& predictions,
                                        const std::vector<FeatureImportance>& explanations) {
  detail::check_aligned(hybrids, predictions.size(), explanations.size());
  std::vector<double> hits;
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < hybrids.size(); ++i) {
    const Document& doc = hybrids[i];
    const auto& scores = explanations[i].scores;
    if (!doc.hybrid()) throw ArgumentError("pointing game: '" + doc.id + "' has no provenance");
    if (scores.size() != doc.size()) throw ArgumentError("pointing game: score length mismatch for '" + doc.id + "'");
    if (std::all_of(scores.begin(), scores.end(), [](double s) { return s == 0.0; })) {
      hits.push_back(0.0);
      ++flagged;
      continue;
    }
    std::size_t top = 0;
    for (std::size_t t = 1; t < scores.size(); ++t) {
      if (scores[t] > scores[top]) top = t;
    }
    hits.push_back(doc.token_provenance(top) == predictions[i].label ? 1.0 : 0.0);
  }
  return detail::summarize_hits(std::move(hits), flagged);
}

/// Fraction of anchor tokens whose sentence provenance matches the
/// prediction. An empty anchor scores 0 and is flagged.
inline PointingGameResult pointing_game_anchor(const std::vector<Document>& hybrids,
                                               const std::vector<Prediction>& predictions,
                                               const std::vector<AnchorRule>& rules) {
  detail::check_aligned(hybrids, predictions.size(), rules.size());
  std::vector<double> hits;
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < hybrids.size(); ++i) {
    const Document& doc = hybrids[i];
    if (!doc.hybrid()) throw ArgumentError("pointing game: '" + doc.id + "' has no provenance");
    const auto& positions = rules[i].token_positions;
    if (positions.empty()) {
      hits.push_back(0.0);
      ++flagged;
      continue;
    }
    std::size_t matched = 0;
    for (std::size_t p : positions) {
      if (p >= doc.size()) throw ArgumentError("pointing game: anchor position out of range for '" + doc.id + "'");
      matched += doc.token_provenance(p) == predictions[i].label;
    }
    hits.push_back(double(matched) / double(positions.size()));
  }
  return detail::summarize_hits(std::move(hits), flagged);
}

// ---------------------------------------------------------------------------
// Token removal

struct RemovalCurve {
  std::vector<std::size_t> k_values;
  /// Accuracy against gold over documents the detector initially got right.
  std::vector<double> acc_correct;
  std::vector<double> acc_wrong;
  std::size_t n_correct = 0;
  std::size_t n_wrong = 0;
  /// Accuracy drop on the correct branch and rise on the wrong branch at
  /// k = min(10, k_max). NaN for an empty branch.
  double delta_right_at_10 = std::numeric_limits<double>::quiet_NaN();
  double delta_wrong_at_10 = std::numeric_limits<double>::quiet_NaN();
  /// Documents whose ranking ran out before k_max; they keep their last state.
  std::size_t truncated = 0;
};

struct RemovalOptions {
  std::size_t k_max = 10;
  /// Random orders averaged for the random baseline.
  std::size_t random_runs = 5;
  std::uint64_t seed = 0;
  std::string mask_symbol = kDefaultMaskSymbol;
  std::size_t batch_size = 256;
};

/// Positions in removal order. Feature importances: descending score, ties by
/// index, zero scores excluded. Anchors: the rule's tokens in a seeded random order.
inline std::vector<std::size_t> removal_order(const Explanation& e, std::uint64_t seed) {
  std::vector<std::size_t> order;
  if (const auto* rule = std::get_if<AnchorRule>(&e)) {
    order = rule->token_positions;
    Rng rng(seed);
    rng.shuffle(order);
    return order;
  }
  const auto& scores = std::get<FeatureImportance>(e).scores;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] != 0.0) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Masks the top-k tokens for k = 0..k_max and tracks accuracy per branch.
/// Random-method explanations are replaced by `random_runs` uniformly random
/// orders over all tokens whose outcomes are averaged.
inline RemovalCurve token_removal_curve(const Detector& detector, const std::vector<Document>& docs,
                                        const std::vector<Explanation>& explanations,
                                        const RemovalOptions& options = {}) {
  if (options.k_max < 1) throw ArgumentError("token_removal_curve: k_max must be at least 1");
  if (docs.size() != explanations.size()) throw ArgumentError("token_removal_curve: documents and explanations differ in length");
  if (options.random_runs < 1) throw ArgumentError("token_removal_curve: random_runs must be at least 1");
  const std::size_t K = options.k_max;
  RemovalCurve curve;
  for (std::size_t k = 0; k <= K; ++k) curve.k_values.push_back(k);
  curve.acc_correct.assign(K + 1, 0.0);
  curve.acc_wrong.assign(K + 1, 0.0);
  if (docs.empty()) return curve;

  const auto initial = predict_documents(detector, docs);

  // One job per (document, order); each contributes weight 1/runs.
  struct Job {
    std::size_t doc;
    std::vector<std::size_t> order;
    double weight;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (doc_id_of(explanations[i]) != docs[i].id) {
      throw ArgumentError("token_removal_curve: explanation for '" + doc_id_of(explanations[i]) +
                          "' paired with '" + docs[i].id + "'");
    }
    const auto* fi = std::get_if<FeatureImportance>(&explanations[i]);
    if (fi && fi->scores.size() != docs[i].size()) {
      throw ArgumentError("token_removal_curve: score length mismatch for '" + docs[i].id + "'");
    }
    if (fi && fi->method == Method::random) {
      for (std::size_t r = 0; r < options.random_runs; ++r) {
        Rng rng(derive_seed(options.seed, "removal-random", i, r));
        std::vector<std::size_t> order(docs[i].size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        jobs.push_back({i, std::move(order), 1.0 / double(options.random_runs)});
      }
    } else {
      jobs.push_back({i, removal_order(explanations[i], derive_seed(options.seed, "removal-anchor", i)), 1.0});
    }
  }

  std::vector<std::string> texts;
  std::vector<std::size_t> first_text(jobs.size());
  std::vector<bool> truncated(docs.size(), false);
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const Job& job = jobs[j];
    const Document& doc = docs[job.doc];
    first_text[j] = texts.size();
    const std::size_t steps = std::min(K, job.order.size());
    if (steps < K) truncated[job.doc] = true;
    std::vector<bool> kept(doc.size(), true);
    for (std::size_t k = 1; k <= steps; ++k) {
      kept[job.order[k - 1]] = false;
      texts.push_back(render_masked(doc, kept, options.mask_symbol));
    }
  }
  const auto masked = texts.empty() ? std::vector<Prediction>{} : predict_batched(detector, texts, options.batch_size);

  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (initial[i].label == docs[i].gold) {
      ++curve.n_correct;
    } else {
      ++curve.n_wrong;
    }
    curve.truncated += truncated[i];
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const Job& job = jobs[j];
    const Document& doc = docs[job.doc];
    const bool correct_branch = initial[job.doc].label == doc.gold;
    auto& acc = correct_branch ? curve.acc_correct : curve.acc_wrong;
    const std::size_t steps = std::min(K, job.order.size());
    Label label = initial[job.doc].label;
    for (std::size_t k = 0; k <= K; ++k) {
      if (k >= 1 && k <= steps) label = masked[first_text[j] + k - 1].label;
      if (label == doc.gold) acc[k] += job.weight;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k <= K; ++k) {
    curve.acc_correct[k] = curve.n_correct ? curve.acc_correct[k] / double(curve.n_correct) : nan;
    curve.acc_wrong[k] = curve.n_wrong ? curve.acc_wrong[k] / double(curve.n_wrong) : nan;
  }
  const std::size_t at = std::min<std::size_t>(10, K);
  if (curve.n_correct) curve.delta_right_at_10 = curve.acc_correct[0] - curve.acc_correct[at];
  if (curve.n_wrong) curve.delta_wrong_at_10 = curve.acc_wrong[at] - curve.acc_wrong[0];
  return curve;
}

/// One row of the removal-curve table.
struct RemovalRecord {
  std::size_t k = 0;
  std::string branch;
  std::string method;
  double accuracy = 0.0;
  std::size_t n = 0;
};

inline std::vector<RemovalRecord> removal_records(const RemovalCurve& curve, const std::string& method) {
  std::vector<RemovalRecord> rows;
  for (std::size_t i = 0; i < curve.k_values.size(); ++i) {
    if (curve.n_correct) rows.push_back({curve.k_values[i], "correct", method, curve.acc_correct[i], curve.n_correct});
    if (curve.n_wrong) rows.push_back({curve.k_values[i], "wrong", method, curve.acc_wrong[i], curve.n_wrong});
  }
  return rows;
}

}  // namespace xqeval

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "xqeval/anchor.hpp"
#include "xqeval/faithfulness.hpp"
#include "xqeval/partition.hpp"

using namespace xqeval;

namespace {

/// Label from a hash of the text: unrelated to sentence provenance.
FunctionDetector hash_detector() {
  return FunctionDetector("hash", [](const std::string& text) {
    return Prediction{(fnv1a(text) & 1U) ? Label::machine : Label::human, 0.8};
  });
}

/// Four sentences per document.
Corpus four_sentence_corpus(std::size_t per_class, bool all_human = false) {
  std::vector<Document> docs;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const Label gold = (all_human || i % 2 == 0) ? Label::human : Label::machine;
    const std::string n = std::to_string(i);
    docs.push_back(make_document("d" + n, "Alpha " + n + " one. Beta " + n + " two. Gamma " + n +
                                              " three. Delta " + n + " four.",
                                 gold));
  }
  return Corpus(docs);
}

/// Hybrid document with the given sentence labels, "wN" tokens per sentence.
Document hybrid_of(const std::vector<std::pair<Label, std::size_t>>& parts, const std::string& id = "h") {
  std::string text;
  std::vector<Sentence> sentences;
  std::size_t w = 0;
  for (const auto& [label, count] : parts) {
    if (!text.empty()) text += ' ';
    const std::size_t begin = text.size();
    for (std::size_t i = 0; i < count; ++i) text += (i ? " w" : "w") + std::to_string(w++);
    sentences.push_back({{begin, text.size()}, Provenance{"src", label}});
  }
  return make_document_with_sentences(id, text, Label::machine, sentences);
}

FeatureImportance scores_for(const Document& doc, std::vector<double> s, Method m = Method::lime) {
  FeatureImportance fi;
  fi.doc_id = doc.id;
  fi.scores = std::move(s);
  fi.method = m;
  return fi;
}

FeatureImportance marker_scores(const Document& doc) {
  std::vector<double> s(doc.size(), 0.0);
  for (std::size_t i = 0; i < doc.size(); ++i) {
    if (doc.token(i) == xqtest::kMarker) s[i] = 1.0;
  }
  return scores_for(doc, s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Hybrid documents

TEST(Hybrid, SentenceCountMatchesCorpusMean) {
  auto corpus = four_sentence_corpus(10);
  auto hybrids = build_hybrid_dataset(corpus, 25, 3);
  ASSERT_EQ(hybrids.size(), 25u);
  for (const Document& h : hybrids) {
    EXPECT_TRUE(h.hybrid());
    ASSERT_EQ(h.sentences.size(), 4u);
    std::set<std::string> texts;
    for (const Sentence& s : h.sentences) {
      const auto& prov = *s.provenance;
      const Document* src = corpus.find(prov.source_doc_id);
      ASSERT_NE(src, nullptr);
      EXPECT_EQ(prov.source_label, src->gold);
      const std::string body = h.text.substr(s.span.begin, s.span.size());
      EXPECT_NE(src->text.find(body), std::string::npos);
      texts.insert(body);
    }
    EXPECT_EQ(texts.size(), 4u) << "sentences repeat within " << h.id;
    for (std::size_t t = 0; t < h.size(); ++t) EXPECT_NO_THROW(h.token_provenance(t));
  }
}

TEST(Hybrid, AllHumanAndDeterminism) {
  auto hybrids = build_hybrid_dataset(four_sentence_corpus(5, true), 10, 1);
  for (const Document& h : hybrids) {
    for (const Sentence& s : h.sentences) EXPECT_EQ(s.provenance->source_label, Label::human);
    EXPECT_EQ(h.gold, Label::human);
  }
  auto corpus = four_sentence_corpus(5);
  auto a = build_hybrid_dataset(corpus, 10, 9);
  auto b = build_hybrid_dataset(corpus, 10, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].text, b[i].text);
    EXPECT_EQ(a[i].sentences, b[i].sentences);
  }
  EXPECT_NE(build_hybrid_dataset(corpus, 10, 10)[0].text, a[0].text);
  EXPECT_THROW(build_hybrid_dataset(Corpus{}, 3, 1), ArgumentError);
}

// ---------------------------------------------------------------------------
// Pointing game

TEST(PointingGame, HitDefinitionTiesAndZeroVectors) {
  auto doc = hybrid_of({{Label::human, 3}, {Label::machine, 3}});
  const std::vector<Document> docs = {doc};
  const std::vector<Prediction> machine = {{Label::machine, 0.9}};
  EXPECT_DOUBLE_EQ(pointing_game(docs, machine, {scores_for(doc, {0, 0, 0, 0, 5, 0})}).acc_pg, 1.0);
  EXPECT_DOUBLE_EQ(pointing_game(docs, machine, {scores_for(doc, {5, 0, 0, 0, 0, 0})}).acc_pg, 0.0);
  // Tie between positions 2 and 3: lowest index (human sentence) wins.
  EXPECT_DOUBLE_EQ(pointing_game(docs, machine, {scores_for(doc, {0, 0, 2, 2, 0, 0})}).acc_pg, 0.0);
  auto zero = pointing_game(docs, machine, {scores_for(doc, std::vector<double>(6, 0.0))});
  EXPECT_DOUBLE_EQ(zero.acc_pg, 0.0);
  EXPECT_EQ(zero.flagged, 1u);
  EXPECT_THROW(pointing_game(docs, {}, {}), ArgumentError);
  EXPECT_THROW(pointing_game(docs, machine, {scores_for(doc, {1})}), ArgumentError);
}

TEST(PointingGame, MeanOfHitsAndMonotoneInvariance) {
  Rng rng(4);
  std::vector<Document> docs;
  std::vector<Prediction> preds;
  std::vector<FeatureImportance> fis, rescaled;
  for (int i = 0; i < 30; ++i) {
    auto d = hybrid_of({{Label::human, 4}, {Label::machine, 3}, {Label::human, 2}}, "h" + std::to_string(i));
    std::vector<double> s(d.size()), t(d.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      s[k] = rng.uniform(-1, 1);
      t[k] = std::exp(3.0 * s[k]) - 7.0;
    }
    preds.push_back({i % 3 ? Label::human : Label::machine, 0.7});
    fis.push_back(scores_for(d, s));
    rescaled.push_back(scores_for(d, t));
    docs.push_back(std::move(d));
  }
  auto r = pointing_game(docs, preds, fis);
  double mean = 0;
  for (double h : r.per_doc_hits) mean += h / double(r.n);
  EXPECT_EQ(r.n, 30u);
  EXPECT_DOUBLE_EQ(r.acc_pg, mean);
  EXPECT_GE(r.acc_pg, 0.0);
  EXPECT_LE(r.acc_pg, 1.0);
  EXPECT_EQ(pointing_game(docs, preds, rescaled).per_doc_hits, r.per_doc_hits);
}

TEST(PointingGame, RandomExplainerMatchesClosedFormExpectation) {
  auto corpus = xqtest::planted_corpus(20, 24, 8);
  auto hybrids = build_hybrid_dataset(corpus, 60, 2);
  auto detector = hash_detector();
  auto preds = predict_documents(detector, hybrids);
  // argmax of i.i.d. continuous scores is uniform over tokens, so the
  // expected hit is the share of tokens whose provenance matches f(d).
  double expected = 0;
  for (std::size_t i = 0; i < hybrids.size(); ++i) {
    std::size_t match = 0;
    for (std::size_t t = 0; t < hybrids[i].size(); ++t) match += hybrids[i].token_provenance(t) == preds[i].label;
    expected += double(match) / double(hybrids[i].size()) / double(hybrids.size());
  }
  const int runs = 300;
  double observed = 0;
  for (int r = 0; r < runs; ++r) {
    std::vector<FeatureImportance> fis;
    for (std::size_t i = 0; i < hybrids.size(); ++i) fis.push_back(explain_random(hybrids[i], derive_seed(77, "pg", i, r)));
    observed += pointing_game(hybrids, preds, fis).acc_pg / runs;
  }
  // Standard error is below 0.004 for 60 documents x 300 runs.
  EXPECT_NEAR(observed, expected, 0.015);
}

TEST(PointingGameAnchor, FractionalHits) {
  auto doc = hybrid_of({{Label::machine, 3}, {Label::human, 3}});
  const std::vector<Document> docs = {doc};
  const std::vector<Prediction> machine = {{Label::machine, 0.9}};
  AnchorRule rule;
  rule.doc_id = doc.id;
  rule.token_positions = {0, 2, 4};
  EXPECT_NEAR(pointing_game_anchor(docs, machine, {rule}).acc_pg, 2.0 / 3.0, 1e-15);
  rule.token_positions = {0, 1};
  EXPECT_DOUBLE_EQ(pointing_game_anchor(docs, machine, {rule}).acc_pg, 1.0);
  rule.token_positions = {};
  auto empty = pointing_game_anchor(docs, machine, {rule});
  EXPECT_DOUBLE_EQ(empty.acc_pg, 0.0);
  EXPECT_EQ(empty.flagged, 1u);
}

TEST(PointingGameAnchor, PlantedDetectorExactAnchor) {
  auto corpus = xqtest::planted_corpus(30, 24, 12);
  auto detector = xqtest::marker_detector();
  // The marker only occurs in machine sentences, so hybrids containing it
  // predict machine. With exactly one marker it is the only sound anchor;
  // several markers survive any capped edit and make every rule sound.
  std::vector<Document> hybrids;
  for (Document& h : build_hybrid_dataset(corpus, 80, 5)) {
    std::size_t markers = 0;
    for (std::size_t t = 0; t < h.size(); ++t) markers += h.token(t) == xqtest::kMarker;
    if (markers == 1) hybrids.push_back(std::move(h));
  }
  ASSERT_GE(hybrids.size(), 20u);
  auto preds = predict_documents(detector, hybrids);
  std::vector<AnchorRule> rules;
  for (std::size_t i = 0; i < hybrids.size(); ++i) rules.push_back(explain_anchor(detector, hybrids[i], i));
  EXPECT_DOUBLE_EQ(pointing_game_anchor(hybrids, preds, rules).acc_pg, 1.0);
}

// ---------------------------------------------------------------------------
// Token removal

TEST(TokenRemoval, PerfectExplanationFlipsAtFirstToken) {
  auto corpus = xqtest::planted_corpus(15, 20, 6);
  auto detector = xqtest::marker_detector();
  std::vector<Document> docs;
  std::vector<Explanation> exact, random;
  for (const Document& d : corpus) {
    if (d.gold != Label::machine) continue;
    docs.push_back(d);
    exact.push_back(marker_scores(d));
    random.push_back(explain_random(d, docs.size()));
  }
  RemovalOptions options;
  options.k_max = 3;
  auto curve = token_removal_curve(detector, docs, exact, options);
  EXPECT_EQ(curve.n_correct, docs.size());
  EXPECT_EQ(curve.n_wrong, 0u);
  EXPECT_EQ(curve.k_values, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(curve.acc_correct[0], 1.0);
  EXPECT_DOUBLE_EQ(curve.acc_correct[1], 0.0);
  EXPECT_DOUBLE_EQ(curve.acc_correct[3], 0.0);
  // Single nonzero score: every document runs out of ranked tokens after k=1.
  EXPECT_EQ(curve.truncated, docs.size());
  EXPECT_DOUBLE_EQ(curve.delta_right_at_10, 1.0);
  EXPECT_TRUE(std::isnan(curve.delta_wrong_at_10));

  auto baseline = token_removal_curve(detector, docs, random, options);
  EXPECT_LT(curve.acc_correct[1], baseline.acc_correct[1]);
  // Random runs average five orders per document.
  for (double a : baseline.acc_correct) {
    const double scaled = a * double(docs.size() * options.random_runs);
    EXPECT_NEAR(scaled, std::round(scaled), 1e-9);
  }
}

TEST(TokenRemoval, BranchSplitAndWrongBranchRecovery) {
  auto detector = xqtest::marker_detector();
  // Gold says human but the marker makes the detector say machine.
  std::vector<Document> docs = {make_document("right", "a b zyx c", Label::machine),
                                make_document("wrong", "d zyx e f", Label::human),
                                make_document("plain", "g h i j", Label::human)};
  std::vector<Explanation> ex = {marker_scores(docs[0]), marker_scores(docs[1]),
                                 scores_for(docs[2], {0.4, 0.3, 0.2, 0.1})};
  RemovalOptions options;
  options.k_max = 2;
  auto curve = token_removal_curve(detector, docs, ex, options);
  EXPECT_EQ(curve.n_correct, 2u);
  EXPECT_EQ(curve.n_wrong, 1u);
  EXPECT_DOUBLE_EQ(curve.acc_correct[0], 1.0);
  EXPECT_DOUBLE_EQ(curve.acc_wrong[0], 0.0);
  EXPECT_DOUBLE_EQ(curve.acc_correct[1], 0.5);
  EXPECT_DOUBLE_EQ(curve.acc_wrong[1], 1.0);
  EXPECT_DOUBLE_EQ(curve.delta_wrong_at_10, 1.0);
  auto rows = removal_records(curve, "lime");
  EXPECT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[1].branch, "wrong");
  EXPECT_EQ(rows[1].n, 1u);
}

TEST(TokenRemoval, ScoreRescalingInvariance) {
  auto corpus = xqtest::planted_corpus(10, 20, 14);
  auto detector = hash_detector();
  std::vector<Document> docs(corpus.begin(), corpus.end());
  std::vector<Explanation> base, scaled;
  Rng rng(2);
  for (const Document& d : docs) {
    std::vector<double> s(d.size());
    for (double& x : s) x = rng.uniform(-1, 1);
    std::vector<double> t = s;
    for (double& x : t) x *= 250.0;
    base.push_back(scores_for(d, s));
    scaled.push_back(scores_for(d, t));
  }
  RemovalOptions options;
  options.k_max = 12;
  auto a = token_removal_curve(detector, docs, base, options);
  auto b = token_removal_curve(detector, docs, scaled, options);
  EXPECT_EQ(a.acc_correct, b.acc_correct);
  EXPECT_EQ(a.acc_wrong, b.acc_wrong);
}

TEST(TokenRemoval, AnchorOrderAndErrors) {
  auto detector = xqtest::marker_detector();
  auto doc = make_document("a", "x zyx y zyx", Label::machine);
  AnchorRule rule;
  rule.doc_id = "a";
  rule.token_positions = {1, 3};
  // Both markers must go before the label flips.
  RemovalOptions options;
  options.k_max = 2;
  auto curve = token_removal_curve(detector, {doc}, {rule}, options);
  EXPECT_DOUBLE_EQ(curve.acc_correct[1], 1.0);
  EXPECT_DOUBLE_EQ(curve.acc_correct[2], 0.0);
  auto order = removal_order(rule, 5);
  EXPECT_EQ(std::set<std::size_t>(order.begin(), order.end()), (std::set<std::size_t>{1, 3}));
  options.k_max = 0;
  EXPECT_THROW(token_removal_curve(detector, {doc}, {rule}, options), ArgumentError);
  options.k_max = 2;
  rule.doc_id = "other";
  EXPECT_THROW(token_removal_curve(detector, {doc}, {rule}, options), ArgumentError);
}

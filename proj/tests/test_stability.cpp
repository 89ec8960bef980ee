#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"
#include "xqeval/stability.hpp"

using namespace xqeval;

namespace {

constexpr double NA = std::numeric_limits<double>::quiet_NaN();

double alpha_of(std::vector<std::vector<double>> rows, Level level) {
  return krippendorff_alpha({std::move(rows), level}).alpha;
}

/// Scores every token by a hash of its surface form.
Explainer surface_explainer() {
  return Explainer(Method::lime, "surface", [](const Document& d, std::uint64_t) {
    FeatureImportance fi;
    fi.doc_id = d.id;
    for (std::size_t i = 0; i < d.size(); ++i) fi.scores.push_back(double(fnv1a(d.token(i)) % 1000) / 1000.0);
    return Explanation(fi);
  });
}

Explainer constant_explainer(double value) {
  return Explainer(Method::lime, "const", [value](const Document& d, std::uint64_t) {
    FeatureImportance fi;
    fi.doc_id = d.id;
    fi.scores.assign(d.size(), value);
    return Explanation(fi);
  });
}

/// Machine iff the final token is the marker.
FunctionDetector last_token_detector() {
  return FunctionDetector("last", [](const std::string& text) {
    auto spans = tokenize(text);
    const bool marked = !spans.empty() && text.substr(spans.back().begin, spans.back().size()) == xqtest::kMarker;
    return Prediction{marked ? Label::machine : Label::human, 0.9};
  });
}

FunctionDetector first_token_detector() {
  return FunctionDetector("first", [](const std::string& text) {
    auto spans = tokenize(text);
    const bool marked = !spans.empty() && text.substr(spans[0].begin, spans[0].size()) == xqtest::kMarker;
    return Prediction{marked ? Label::machine : Label::human, 0.9};
  });
}

/// Planted-construction pairs: marker detector, chain fitted on the corpus
/// (so continuations can add or drop the marker).
std::vector<ContrastivePair> planted_pairs(std::size_t wanted, std::uint64_t seed) {
  static auto detector = xqtest::marker_detector();
  auto corpus = xqtest::planted_corpus(300, 20, seed);
  auto chain = MarkovChainGenerator::fit(corpus.documents());
  std::vector<ContrastivePair> pairs;
  for (std::size_t i = 0; i < corpus.size() && pairs.size() < wanted; ++i) {
    if (auto p = build_contrastive_pair(detector, corpus[i], chain, derive_seed(seed, "pair", i))) {
      pairs.push_back(std::move(*p));
    }
  }
  return pairs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Krippendorff's alpha

TEST(Krippendorff, FrozenFixtures) {
  // Reference values from the coincidence-matrix definition, confirmed with
  // the `krippendorff` Python package.
  EXPECT_NEAR(alpha_of({{0, 1}, {1, 0}}, Level::nominal), -0.5, 1e-9);
  EXPECT_NEAR(alpha_of({{1, 2, 3, 4}, {1, 2, 3, 5}, {2, 2, 3, 4}}, Level::interval), 89.0 / 100.0, 1e-9);
  EXPECT_NEAR(alpha_of({{1, NA, 3, 2, NA}, {1, 2, NA, 2, 4}, {NA, 2, 3, 1, 4}}, Level::interval), 62.0 / 67.0,
              1e-9);
  EXPECT_NEAR(alpha_of({{0, 1, 1, 2, 0, 1}, {0, 1, 2, 2, 0, 1}, {1, 1, 1, 2, 0, NA}}, Level::nominal), 15.0 / 23.0,
              1e-9);
  // Krippendorff's own three-observer nominal example.
  EXPECT_NEAR(alpha_of({{NA, NA, NA, NA, NA, 3, 4, 1, 2, 1, 1, 3, 3, NA, 3},
                        {1, NA, 2, 1, 3, 3, 4, 3, NA, NA, NA, NA, NA, NA, NA},
                        {NA, NA, 2, 1, 3, 4, 4, NA, 2, 1, 1, 3, 3, NA, 4}},
                       Level::nominal),
              56.0 / 81.0, 1e-9);
}

TEST(Krippendorff, PerfectDisagreementApproachesMinusOne) {
  std::vector<std::vector<double>> rows(2);
  for (int u = 0; u < 1000; ++u) {
    rows[0].push_back(u % 2);
    rows[1].push_back(1 - u % 2);
  }
  EXPECT_NEAR(alpha_of(rows, Level::nominal), -0.999, 1e-12);
  EXPECT_NEAR(alpha_of(rows, Level::interval), -0.999, 1e-12);
}

TEST(Krippendorff, MatchesCoincidenceOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t raters = 2 + rng.uniform_int(0, 4);
    const std::size_t units = 1 + rng.uniform_int(0, 25);
    std::vector<std::vector<double>> rows(raters, std::vector<double>(units));
    for (auto& r : rows) {
      for (double& v : r) v = rng.uniform01() < 0.15 ? NA : double(rng.uniform_int(0, 4));
    }
    for (Level level : {Level::interval, Level::nominal}) {
      double oracle;
      try {
        oracle = xqoracle::krippendorff_alpha(rows, level == Level::interval);
      } catch (...) {
        continue;
      }
      AlphaResult ours;
      try {
        ours = krippendorff_alpha({rows, level});
      } catch (const ArgumentError&) {
        continue;  // fewer than two pairable values; the oracle divides by zero
      }
      if (ours.degenerate) continue;
      EXPECT_NEAR(ours.alpha, oracle, 1e-9) << "trial " << trial;
    }
  }
}

TEST(Krippendorff, IdentityDegeneracyAndAffineInvariance) {
  std::vector<double> row = {0.3, -1.2, 4.0, 0.0, 2.5};
  EXPECT_DOUBLE_EQ(alpha_of(std::vector<std::vector<double>>(5, row), Level::interval), 1.0);
  auto constant = krippendorff_alpha({{{2, 2, 2}, {2, 2, 2}}, Level::interval});
  EXPECT_TRUE(constant.degenerate);
  EXPECT_DOUBLE_EQ(constant.alpha, 1.0);

  Rng rng(3);
  std::vector<std::vector<double>> x(4, std::vector<double>(12));
  for (auto& r : x) {
    for (double& v : r) v = rng.uniform(-1, 1);
  }
  auto y = x;
  for (auto& r : y) {
    for (double& v : r) v = -3.5 * v + 10.0;
  }
  EXPECT_NEAR(alpha_of(x, Level::interval), alpha_of(y, Level::interval), 1e-9);

  EXPECT_THROW(krippendorff_alpha({{{1, 2}}, Level::interval}), ArgumentError);
  EXPECT_THROW(krippendorff_alpha({{{1, 2}, {1}}, Level::interval}), ArgumentError);
  EXPECT_THROW(krippendorff_alpha({{{1, NA}, {NA, 2}}, Level::interval}), ArgumentError);
}

// ---------------------------------------------------------------------------
// Consistency

TEST(Consistency, DeterministicPairingIsExactlyOne) {
  auto corpus = xqtest::planted_corpus(20, 24, 5);
  ReferenceDetectorConfig config;
  config.hash_bits = 14;
  auto detector = train_reference_detector(corpus, config);
  auto partition = make_explainer(Method::shap_partition, detector);
  for (std::size_t i = 0; i < 6; ++i) {
    auto a = consistency(partition, corpus[i], 5, i);
    EXPECT_EQ(a.alpha, 1.0);
    EXPECT_FALSE(a.degenerate);
  }
}

TEST(Consistency, RandomAndSeededMethodsDisagree) {
  auto random = make_explainer(Method::random, xqtest::marker_detector());
  auto doc = make_document("d", "one two three four five six seven eight nine ten", Label::human);
  auto a = consistency(random, doc, 5, 1);
  EXPECT_LT(std::abs(a.alpha), 0.6);
  EXPECT_THROW(consistency(random, doc, 1, 1), ArgumentError);

  // LIME on a detector whose score drifts with the text: distinct seeds give distinct runs.
  FunctionDetector noisy("noisy", [](const std::string& t) {
    return Prediction::from_probability(0.2 + 0.6 * double(fnv1a(t) % 1000) / 1000.0);
  });
  LimeConfig c;
  c.n_samples = 200;
  c.n_features = 5;
  ExplainerSettings s;
  s.lime = c;
  auto lime = make_explainer(Method::lime, noisy, s);
  EXPECT_LT(consistency(lime, doc, 5, 2).alpha, 1.0);
}

// ---------------------------------------------------------------------------
// Continuity

TEST(Continuity, AlignmentExcludesReplacedRegion) {
  auto aligned = align_to_original({1, 2, 7, 8, 4, 5}, 5, 2, 2);
  EXPECT_EQ(aligned[0], 1);
  EXPECT_EQ(aligned[1], 2);
  EXPECT_TRUE(std::isnan(aligned[2]));
  EXPECT_EQ(aligned[3], 4);
  EXPECT_EQ(aligned[4], 5);
}

TEST(Continuity, ContentFreeAndPositionLocalExplainers) {
  auto doc = make_document("d", "the quick brown fox jumps over the lazy dog today", Label::human);
  Vocabulary vocab(xqtest::filler_words());
  auto detector = xqtest::marker_detector();
  ContinuityOptions options;
  options.vocabulary = &vocab;

  auto flat = continuity(constant_explainer(0.25), detector, doc, options, 3);
  ASSERT_TRUE(flat.alpha.has_value());
  EXPECT_TRUE(flat.alpha->degenerate);
  EXPECT_DOUBLE_EQ(flat.alpha->alpha, 1.0);

  // Scores depend only on each token's own form; alignment drops the
  // replaced token, so every remaining unit agrees.
  auto local = continuity(surface_explainer(), detector, doc, options, 3);
  ASSERT_TRUE(local.alpha.has_value());
  EXPECT_EQ(local.perturbations.size(), 5u);
  EXPECT_NEAR(local.alpha->alpha, 1.0, 1e-12);
  for (const auto& p : local.perturbations) {
    EXPECT_EQ(p.doc.size(), doc.size());
    EXPECT_EQ(detector.predict_one(p.doc.text).label, Label::human);
  }
}

TEST(Continuity, LabelPreservationAndExclusion) {
  // Every replacement flips this detector, so the document is excluded.
  auto doc = make_document("d", "alpha beta gamma", Label::human);
  FunctionDetector fragile("fragile", [text = doc.text](const std::string& t) {
    return Prediction{t == text ? Label::human : Label::machine, 0.9};
  });
  Vocabulary vocab(xqtest::filler_words());
  ContinuityOptions options;
  options.vocabulary = &vocab;
  options.max_attempts = 12;
  auto r = continuity(surface_explainer(), fragile, doc, options, 1);
  EXPECT_FALSE(r.alpha.has_value());
  EXPECT_EQ(r.attempts, 12u);
  options.vocabulary = nullptr;
  EXPECT_THROW(continuity(surface_explainer(), fragile, doc, options, 1), ArgumentError);
}

// ---------------------------------------------------------------------------
// Contrastive pairs

TEST(ContrastivePair, FinalTokenDetectorFlipsAtFirstStep) {
  auto doc = make_document("d", "w0 w1 w2 w3 w4 w5", Label::human);
  MarkovChainGenerator chain;
  for (int i = 0; i < 6; ++i) chain.add_sequence({"w" + std::to_string(i), xqtest::kMarker});
  auto detector = last_token_detector();
  auto pair = build_contrastive_pair(detector, doc, chain, 4);
  ASSERT_TRUE(pair.has_value());
  EXPECT_EQ(pair->k, 1u);
  EXPECT_EQ(pair->shared_prefix_len, 5u);
  EXPECT_EQ(pair->perturbed.text, "w0 w1 w2 w3 w4 zyx");
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(pair->perturbed.token(i), doc.token(i));
  EXPECT_EQ(detector.predict_one(doc.text).label, Label::human);
  EXPECT_EQ(detector.predict_one(pair->perturbed.text).label, Label::machine);
  EXPECT_DOUBLE_EQ(pair->edit_fraction, 1.0 / 6.0);
}

TEST(ContrastivePair, FirstTokenDetectorNeverFlips) {
  auto doc = make_document("d", "zyx w1 w2 w3 w4 w5 w6 w7", Label::machine);
  auto chain = MarkovChainGenerator::fit({doc});
  EXPECT_FALSE(build_contrastive_pair(first_token_detector(), doc, chain, 1).has_value());
  EXPECT_THROW(build_contrastive_pair(first_token_detector(), make_document("s", "a b c", Label::human), chain, 1),
               ArgumentError);
}

TEST(ContrastivePair, ContractHoldsForEveryEmittedPair) {
  auto pairs = planted_pairs(150, 21);
  ASSERT_GE(pairs.size(), 100u);
  auto detector = xqtest::marker_detector();
  for (const auto& p : pairs) {
    EXPECT_LE(p.edit_fraction, 0.5);
    EXPECT_NE(detector.predict_one(p.original.text).label, detector.predict_one(p.perturbed.text).label);
    ASSERT_GE(p.perturbed.size(), p.shared_prefix_len);
    for (std::size_t i = 0; i < p.shared_prefix_len; ++i) EXPECT_EQ(p.perturbed.token(i), p.original.token(i));
  }
}

TEST(Contrastivity, MassOnGeneratedRegionAndOrientation) {
  auto pairs = planted_pairs(30, 4);
  ASSERT_FALSE(pairs.empty());
  auto detector = xqtest::marker_detector();
  // Knows the pair layout: 1 on tokens past the shared prefix, 0 before.
  std::map<std::string, std::size_t> shared;
  for (const auto& p : pairs) shared[p.perturbed.text] = p.shared_prefix_len;
  Explainer generated(Method::lime, "gen", [&](const Document& d, std::uint64_t) {
    FeatureImportance fi;
    fi.doc_id = d.id;
    fi.scores.assign(d.size(), 0.0);
    if (auto it = shared.find(d.text); it != shared.end()) {
      for (std::size_t i = it->second; i < d.size(); ++i) fi.scores[i] = 1.0;
    }
    return Explanation(fi);
  });
  auto r = contrastivity_scores(pairs, generated, detector, 1);
  EXPECT_DOUBLE_EQ(r.c_intra, 1.0);
  EXPECT_DOUBLE_EQ(r.c_inter, 1.0);

  // Uniform positive scores: the original's vector is negated before
  // comparison, so inter always hits while intra ties (a miss).
  auto uniform = contrastivity_scores(pairs, constant_explainer(1.0), detector, 1);
  EXPECT_DOUBLE_EQ(uniform.c_inter, 1.0);
  EXPECT_DOUBLE_EQ(uniform.c_intra, 0.0);
  EXPECT_EQ(uniform.n, pairs.size());

  // Positive rescaling leaves both scores unchanged.
  auto scaled = contrastivity_scores(pairs, constant_explainer(42.0), detector, 1);
  EXPECT_DOUBLE_EQ(scaled.c_inter, uniform.c_inter);
  EXPECT_DOUBLE_EQ(scaled.c_intra, uniform.c_intra);
  EXPECT_THROW(contrastivity_scores({}, generated, detector, 1), ArgumentError);
}

TEST(Contrastivity, StalePairsExcluded) {
  auto pairs = planted_pairs(5, 4);
  ASSERT_FALSE(pairs.empty());
  FunctionDetector constant("const", [](const std::string&) { return Prediction{Label::human, 0.6}; });
  auto r = contrastivity_scores(pairs, constant_explainer(1.0), constant, 1);
  EXPECT_EQ(r.n, 0u);
  EXPECT_EQ(r.excluded, pairs.size());
}

TEST(ContrastivePair, FileRoundTripAndHistogram) {
  xqtest::TempDir dir;
  auto corpus = xqtest::planted_corpus(300, 20, 21);
  auto pairs = planted_pairs(40, 21);
  save_pairs(pairs, dir.file("pairs.jsonl"));
  auto again = load_pairs(dir.file("pairs.jsonl"), corpus);
  ASSERT_EQ(again.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(again[i].perturbed.text, pairs[i].perturbed.text);
    EXPECT_EQ(again[i].shared_prefix_len, pairs[i].shared_prefix_len);
    EXPECT_EQ(again[i].perturbed_label, pairs[i].perturbed_label);
  }
  const std::string csv = edit_fraction_histogram_csv(pairs);
  EXPECT_EQ(csv.rfind("bin_low,bin_high,count\n0.000,0.050,", 0), 0u);
  std::size_t total = 0, lines = 0;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    total += std::stoul(line.substr(line.rfind(',') + 1));
    ++lines;
  }
  EXPECT_EQ(lines, 10u);
  EXPECT_EQ(total, pairs.size());
}

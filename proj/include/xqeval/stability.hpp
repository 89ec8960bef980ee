#pragma once

// Consistency, continuity and contrastivity, plus Krippendorff's alpha.

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xqeval/detector.hpp"
#include "xqeval/explainers.hpp"
#include "xqeval/perturb.hpp"

namespace xqeval {

// ---------------------------------------------------------------------------
// Krippendorff's alpha

enum class Level { interval, nominal };

/// Raters x units; NaN marks a missing value.
struct AgreementMatrix {
  std::vector<std::vector<double>> rows;
  Level level = Level::interval;
};

struct AlphaResult {
  double alpha = std::numeric_limits<double>::quiet_NaN();
  /// No expected disagreement (a single distinct value): alpha set to 1.
  bool degenerate = false;
};

/// alpha = 1 - D_o / D_e over pairable values (units with at least two
/// non-missing values). Pair sums use sum_{i!=j} (a_i - a_j)^2 =
/// 2 (m sum d^2 - (sum d)^2) with d = a - shift (any shift; one of the values
/// keeps identical values exact) and, nominally, m^2 - sum_c count_c^2.
inline AlphaResult krippendorff_alpha(const AgreementMatrix& matrix) {
  const auto& rows = matrix.rows;
  if (rows.size() < 2) throw ArgumentError("krippendorff_alpha: need at least two raters");
  const std::size_t units = rows[0].size();
  if (units == 0) throw ArgumentError("krippendorff_alpha: need at least one unit");
  for (const auto& r : rows) {
    if (r.size() != units) throw ArgumentError("krippendorff_alpha: ragged matrix");
  }
  const bool interval = matrix.level == Level::interval;

  double n = 0.0, observed = 0.0;
  double sum = 0.0, sum_sq = 0.0;
  std::optional<double> origin;
  std::map<double, double> counts;
  std::vector<double> values;
  for (std::size_t u = 0; u < units; ++u) {
    values.clear();
    for (const auto& r : rows) {
      if (!std::isnan(r[u])) values.push_back(r[u]);
    }
    const double m = double(values.size());
    if (values.size() < 2) continue;
    double pair_sum;
    if (interval) {
      if (!origin) origin = values[0];
      double s = 0.0, sq = 0.0, gs = 0.0, gsq = 0.0;
      for (double v : values) {
        const double d = v - values[0];
        s += d;
        sq += d * d;
        const double g = v - *origin;
        gs += g;
        gsq += g * g;
      }
      pair_sum = 2.0 * (m * sq - s * s);
      sum += gs;
      sum_sq += gsq;
    } else {
      std::map<double, double> local;
      for (double v : values) local[v] += 1.0;
      pair_sum = m * m;
      for (const auto& [v, c] : local) {
        pair_sum -= c * c;
        counts[v] += c;
      }
    }
    observed += std::max(0.0, pair_sum) / (m - 1.0);
    n += m;
  }
  if (n < 2.0) throw ArgumentError("krippendorff_alpha: fewer than two pairable values");

  double expected_pairs;
  if (interval) {
    expected_pairs = std::max(0.0, 2.0 * (n * sum_sq - sum * sum));
  } else {
    expected_pairs = n * n;
    for (const auto& [v, c] : counts) expected_pairs -= c * c;
  }
  const double d_o = observed / n;
  const double d_e = expected_pairs / (n * (n - 1.0));
  AlphaResult result;
  // Relative threshold guards against cancellation when every value is equal.
  const double scale = interval ? std::max(1.0, sum_sq / n) : 1.0;
  if (d_e <= 1e-12 * scale) {
    result.alpha = 1.0;
    result.degenerate = true;
    return result;
  }
  result.alpha = 1.0 - d_o / d_e;
  return result;
}

// ---------------------------------------------------------------------------
// Consistency

/// alpha over `runs` explanations of the same document with distinct seeds.
inline AlphaResult consistency(const Explainer& explainer, const Document& doc, std::size_t runs,
                               std::uint64_t seed) {
  if (runs < 2) throw ArgumentError("consistency: runs must be at least 2");
  AgreementMatrix m;
  m.level = explainer.nominal() ? Level::nominal : Level::interval;
  for (std::size_t r = 0; r < runs; ++r) {
    m.rows.push_back(score_vector(explainer.explain(doc, derive_seed(seed, "consistency", 0, r)), doc));
  }
  return krippendorff_alpha(m);
}

// ---------------------------------------------------------------------------
// Continuity

struct ContinuityOptions {
  std::size_t n_perturb = 5;
  /// Replacement attempts allowed overall before giving up.
  std::size_t max_attempts = 50;
  const Vocabulary* vocabulary = nullptr;
  const InfillGenerator* infill = nullptr;
};

/// One label-preserving replacement of a single original token.
struct ContinuityPerturbation {
  Document doc;
  /// Replaced original position and the number of tokens that replaced it.
  std::size_t position = 0;
  std::size_t replacement_tokens = 1;
  PerturbationOrigin origin = PerturbationOrigin::random_vocab;
};

struct ContinuityResult {
  /// Absent when no label-preserving perturbation was found.
  std::optional<AlphaResult> alpha;
  std::vector<ContinuityPerturbation> perturbations;
  std::size_t attempts = 0;
};

/// Aligns an explanation of a perturbed document onto original positions:
/// tokens left of the replacement by index, right of it from the end; the
/// replaced position itself is missing.
inline std::vector<double> align_to_original(const std::vector<double>& perturbed_scores,
                                             std::size_t original_size, std::size_t position,
                                             std::size_t replacement_tokens) {
  std::vector<double> out(original_size, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < position; ++i) out[i] = perturbed_scores[i];
  for (std::size_t i = position + 1; i < original_size; ++i) {
    out[i] = perturbed_scores[i - 1 + replacement_tokens];
  }
  return out;
}

/// Label-preserving single-position replacements of `doc`.
inline std::vector<ContinuityPerturbation> continuity_perturbations(const Detector& detector, const Document& doc,
                                                                    const ContinuityOptions& options,
                                                                    std::uint64_t seed, std::size_t* attempts = nullptr) {
  if (doc.size() == 0) throw ArgumentError("continuity: document has no tokens");
  if (!options.vocabulary) throw ArgumentError("continuity: a replacement vocabulary is required");
  const Label target = detector.predict_one(doc.text).label;
  Rng rng(derive_seed(seed, "continuity-positions"));
  std::vector<ContinuityPerturbation> out;
  std::size_t tried = 0;
  while (out.size() < options.n_perturb && tried < options.max_attempts) {
    const std::size_t position = rng.uniform_int(0, doc.size() - 1);
    const auto variant = replace_token_variants(doc, position, 1, *options.vocabulary,
                                                derive_seed(seed, "continuity-variant", tried), options.infill)[0];
    ++tried;
    if (detector.predict_one(variant.text).label != target) continue;
    Document perturbed = make_document(doc.id + "~" + std::to_string(out.size()), variant.text, doc.gold);
    if (perturbed.size() + 1 <= doc.size()) continue;  // replacement vanished into whitespace
    const std::size_t replacement = perturbed.size() + 1 - doc.size();
    out.push_back({std::move(perturbed), position, replacement, variant.origin});
  }
  if (attempts) *attempts = tried;
  return out;
}

/// alpha over the original explanation (row 0) and one explanation per
/// label-preserving perturbation, aligned on unchanged positions.
inline ContinuityResult continuity(const Explainer& explainer, const Detector& detector, const Document& doc,
                                   const ContinuityOptions& options, std::uint64_t seed) {
  ContinuityResult result;
  result.perturbations = continuity_perturbations(detector, doc, options, seed, &result.attempts);
  if (result.perturbations.empty()) return result;
  AgreementMatrix m;
  m.level = explainer.nominal() ? Level::nominal : Level::interval;
  m.rows.push_back(score_vector(explainer.explain(doc, derive_seed(seed, "continuity-explain", 0)), doc));
  for (std::size_t i = 0; i < result.perturbations.size(); ++i) {
    const auto& p = result.perturbations[i];
    const auto scores = score_vector(explainer.explain(p.doc, derive_seed(seed, "continuity-explain", i + 1)), p.doc);
    m.rows.push_back(align_to_original(scores, doc.size(), p.position, p.replacement_tokens));
  }
  result.alpha = krippendorff_alpha(m);
  return result;
}

// ---------------------------------------------------------------------------
// Contrastive pairs

struct ContrastivePair {
  Document original;
  Document perturbed;
  /// Leading tokens shared by both documents.
  std::size_t shared_prefix_len = 0;
  /// Truncated tokens over original length.
  double edit_fraction = 0.0;
  std::size_t k = 0;
  Label original_label = Label::human;
  Label perturbed_label = Label::machine;
};

struct ContrastiveOptions {
  std::size_t attempts_per_k = 5;
  double max_edit_fraction = 0.5;
};

/// Truncates k = 1, 2, ... trailing tokens and continues the prefix with k new
/// tokens until the detector changes its decision or the edit cap is reached.
inline std::optional<ContrastivePair> build_contrastive_pair(const Detector& detector, const Document& doc,
                                                             const ContinuationGenerator& generator,
                                                             std::uint64_t seed,
                                                             const ContrastiveOptions& options = {}) {
  const std::size_t n = doc.size();
  if (n < 4) throw ArgumentError("build_contrastive_pair: document '" + doc.id + "' has fewer than 4 tokens");
  if (options.attempts_per_k < 1) throw ArgumentError("build_contrastive_pair: attempts_per_k must be >= 1");
  if (!(options.max_edit_fraction > 0.0 && options.max_edit_fraction <= 1.0)) {
    throw ArgumentError("build_contrastive_pair: max_edit_fraction must lie in (0, 1]");
  }
  const Label original = detector.predict_one(doc.text).label;
  for (std::size_t k = 1; k < n; ++k) {
    const double fraction = double(k) / double(n);
    if (fraction > options.max_edit_fraction + 1e-12) break;
    const std::size_t keep = n - k;
    const std::string prefix = doc.text.substr(0, doc.tokens[keep - 1].end);
    for (std::size_t a = 0; a < options.attempts_per_k; ++a) {
      const std::string text = continue_prefix(prefix, int(k), generator, derive_seed(seed, "contrastive", k, a));
      if (text == prefix) continue;
      Document perturbed = make_document(doc.id + "~contrast", text, doc.gold);
      if (perturbed.size() <= keep) continue;
      bool same_prefix = true;
      for (std::size_t i = 0; i < keep && same_prefix; ++i) same_prefix = perturbed.token(i) == doc.token(i);
      if (!same_prefix) continue;
      const Label flipped = detector.predict_one(text).label;
      if (flipped == original) continue;
      return ContrastivePair{doc, std::move(perturbed), keep, fraction, k, original, flipped};
    }
  }
  return std::nullopt;
}

struct ContrastivityResult {
  double c_inter = 0.0;
  double c_intra = 0.0;
  std::size_t n = 0;
  /// Pairs dropped because the labels no longer differ or explaining failed.
  std::size_t excluded = 0;
};

namespace detail {

inline std::optional<double> range_mean(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  if (begin >= end) return std::nullopt;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / double(end - begin);
}

}  // namespace detail

/// Hit fractions over pairs; scores are oriented toward the perturbed
/// document's label (the original's explanation is negated). Ties and empty
/// regions count as misses.
inline ContrastivityResult contrastivity_scores(const std::vector<ContrastivePair>& pairs, const Explainer& explainer,
                                                const Detector& detector, std::uint64_t seed) {
  if (pairs.empty()) throw ArgumentError("contrastivity_scores: no pairs");
  ContrastivityResult r;
  double inter = 0.0, intra = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const ContrastivePair& p = pairs[i];
    const std::vector<std::string> texts = {p.original.text, p.perturbed.text};
    const auto labels = detector.predict(texts);
    if (labels[0].label == labels[1].label) {
      ++r.excluded;
      continue;
    }
    std::vector<double> original, perturbed;
    try {
      original = score_vector(explainer.explain(p.original, derive_seed(seed, "contrastivity", i, 0)), p.original);
      perturbed = score_vector(explainer.explain(p.perturbed, derive_seed(seed, "contrastivity", i, 1)), p.perturbed);
    } catch (const Error& e) {
      Log::warn("contrastivity: explaining pair '" + p.original.id + "' failed: " + e.what());
      ++r.excluded;
      continue;
    }
    for (double& s : original) s = -s;
    const auto differing = detail::range_mean(perturbed, p.shared_prefix_len, perturbed.size());
    const auto removed = detail::range_mean(original, p.shared_prefix_len, original.size());
    const auto shared = detail::range_mean(perturbed, 0, p.shared_prefix_len);
    ++r.n;
    if (differing && removed && *differing > *removed) inter += 1.0;
    if (differing && shared && *differing > *shared) intra += 1.0;
  }
  if (r.n) {
    r.c_inter = inter / double(r.n);
    r.c_intra = intra / double(r.n);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pair files

inline nlohmann::ordered_json to_json(const ContrastivePair& p) {
  nlohmann::ordered_json j;
  j["original_id"] = p.original.id;
  j["perturbed_text"] = p.perturbed.text;
  j["k"] = p.k;
  j["edit_fraction"] = p.edit_fraction;
  j["labels"] = {to_string(p.original_label), to_string(p.perturbed_label)};
  return j;
}

inline void save_pairs(const std::vector<ContrastivePair>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write pairs file '" + path + "'");
  for (const auto& p : pairs) out << to_json(p).dump() << '\n';
}

/// Re-reads a pairs file against the corpus holding the originals.
inline std::vector<ContrastivePair> load_pairs(const std::string& path, const Corpus& corpus) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read pairs file '" + path + "'");
  std::vector<ContrastivePair> pairs;
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const Document* original = corpus.find(j.at("original_id").get<std::string>());
      if (!original) throw ParseError(number, "unknown original_id");
      ContrastivePair p;
      p.original = *original;
      p.perturbed = make_document(original->id + "~contrast", j.at("perturbed_text").get<std::string>(), original->gold);
      p.k = j.at("k").get<std::size_t>();
      if (p.k >= original->size()) throw ParseError(number, "k exceeds the original length");
      p.shared_prefix_len = original->size() - p.k;
      p.edit_fraction = j.at("edit_fraction").get<double>();
      p.original_label = parse_label(j.at("labels").at(0).get<std::string>());
      p.perturbed_label = parse_label(j.at("labels").at(1).get<std::string>());
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(number, e.what());
    } catch (const ArgumentError& e) {
      throw ParseError(number, e.what());
    }
  }
  return pairs;
}

/// Counts of edit fractions in bins of `width` over (0, max]; rows
/// "bin_low,bin_high,count".
inline std::string edit_fraction_histogram_csv(const std::vector<ContrastivePair>& pairs, double width = 0.05,
                                               double max = 0.5) {
  const auto bins = static_cast<std::size_t>(std::llround(max / width));
  std::vector<std::size_t> counts(bins, 0);
  for (const auto& p : pairs) {
    auto b = static_cast<std::size_t>(std::ceil(p.edit_fraction / width - 1e-9));
    b = b == 0 ? 0 : b - 1;
    counts[std::min(b, bins - 1)] += 1;
  }
  std::string csv = "bin_low,bin_high,count\n";
  for (std::size_t b = 0; b < bins; ++b) {
    csv += format_fixed(double(b) * width) + "," + format_fixed(double(b + 1) * width) + "," +
           std::to_string(counts[b]) + "\n";
  }
  return csv;
}

}  // namespace xqeval

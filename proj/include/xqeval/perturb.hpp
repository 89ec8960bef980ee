#pragma once

// Document perturbations: mask-token replacement, random-vocabulary
// replacement, single-position variants, and prefix continuation.

#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "xqeval/core.hpp"
#include "xqeval/corpus.hpp"

namespace xqeval {

enum class PerturbationOrigin { mask, random_vocab, remote_infill, remote_continuation };

inline const char* to_string(PerturbationOrigin origin) {
  switch (origin) {
    case PerturbationOrigin::mask: return "mask";
    case PerturbationOrigin::random_vocab: return "random_vocab";
    case PerturbationOrigin::remote_infill: return "remote_infill";
    case PerturbationOrigin::remote_continuation: return "remote_continuation";
  }
  return "unknown";
}

inline constexpr const char* kDefaultMaskSymbol = "<mask>";

struct Perturbation {
  std::string text;
  /// One entry per source token; true = original token kept.
  std::vector<bool> kept_mask;
  PerturbationOrigin origin = PerturbationOrigin::mask;
};

/// Re-renders the document with every token i where !kept[i] replaced by
/// `replacement(i)`. Bytes outside tokens are copied verbatim.
template <typename ReplacementFn>
std::string render_replaced(const Document& doc, const std::vector<bool>& kept,
                            ReplacementFn&& replacement) {
  std::string out;
  out.reserve(doc.text.size() + 16);
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
    if (kept[i]) continue;
    const Span& s = doc.tokens[i];
    out.append(doc.text, cursor, s.begin - cursor);
    out += replacement(i);
    cursor = s.end;
  }
  out.append(doc.text, cursor, std::string::npos);
  return out;
}

inline std::string render_masked(const Document& doc, const std::vector<bool>& kept,
                                 std::string_view mask_symbol) {
  if (kept.size() != doc.size()) throw ArgumentError("kept mask length differs from token count");
  return render_replaced(doc, kept, [&](std::size_t) { return mask_symbol; });
}

inline Perturbation mask_out(const Document& doc, std::span<const std::size_t> drop,
                             std::string_view mask_symbol = kDefaultMaskSymbol) {
  std::vector<bool> kept(doc.size(), true);
  for (std::size_t i : drop) {
    if (i >= doc.size()) {
      throw ArgumentError("mask_out: token index " + std::to_string(i) + " out of range");
    }
    kept[i] = false;
  }
  return {render_masked(doc, kept, mask_symbol), std::move(kept), PerturbationOrigin::mask};
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    std::sort(words_.begin(), words_.end());
    words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
  }

  /// Word tokens (letters/digits) occurring in the corpus.
  static Vocabulary from_documents(const std::vector<Document>& docs) {
    std::vector<std::string> words;
    for (const Document& d : docs) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (is_word_token(d.token(i))) words.emplace_back(d.token(i));
      }
    }
    return Vocabulary(std::move(words));
  }

  const std::vector<std::string>& words() const { return words_; }
  std::size_t size() const { return words_.size(); }

 private:
  std::vector<std::string> words_;
};

// ---------------------------------------------------------------------------
// Neighborhood sampling

/// Maximum tokens a perturbation may edit: ceil(fraction * token_count).
inline std::size_t edit_cap(std::size_t token_count, double fraction) {
  return static_cast<std::size_t>(std::ceil(fraction * double(token_count) - 1e-9));
}

/// Draws one kept-mask: m ~ Uniform{1..cap} positions outside `fixed`
/// (capped by availability) are edited.
inline std::vector<bool> sample_edit_mask(std::size_t token_count, std::size_t cap,
                                          const std::vector<bool>& fixed, Rng& rng) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < token_count; ++i) {
    if (fixed.empty() || !fixed[i]) eligible.push_back(i);
  }
  std::vector<bool> kept(token_count, true);
  const std::size_t limit = std::min(cap, eligible.size());
  if (limit == 0) return kept;
  const std::size_t m = rng.uniform_int(1, limit);
  for (std::size_t pick : rng.sample(eligible.size(), m)) kept[eligible[pick]] = false;
  return kept;
}

struct NeighborhoodOptions {
  PerturbationOrigin strategy = PerturbationOrigin::mask;
  std::string mask_symbol = kDefaultMaskSymbol;
  /// Required for random_vocab.
  const Vocabulary* vocabulary = nullptr;
  /// Positions that must stay untouched (e.g. an anchor under evaluation).
  std::vector<std::size_t> fixed;
};

inline std::vector<Perturbation> sample_neighborhood(const Document& doc, std::size_t n,
                                                     double max_edit_fraction, std::uint64_t seed,
                                                     const NeighborhoodOptions& options = {}) {
  if (n < 1) throw ArgumentError("sample_neighborhood: n must be >= 1");
  if (!(max_edit_fraction > 0.0 && max_edit_fraction <= 1.0)) {
    throw ArgumentError("sample_neighborhood: max_edit_fraction must lie in (0, 1]");
  }
  if (options.strategy != PerturbationOrigin::mask && options.strategy != PerturbationOrigin::random_vocab) {
    throw ArgumentError("sample_neighborhood: strategy must be mask or random_vocab");
  }
  if (options.strategy == PerturbationOrigin::random_vocab &&
      (!options.vocabulary || options.vocabulary->size() < 2)) {
    throw ArgumentError("sample_neighborhood: random_vocab needs a vocabulary of >= 2 words");
  }
  std::vector<bool> fixed(doc.size(), false);
  for (std::size_t i : options.fixed) {
    if (i >= doc.size()) throw ArgumentError("sample_neighborhood: fixed index out of range");
    fixed[i] = true;
  }
  const std::size_t cap = edit_cap(doc.size(), max_edit_fraction);
  Rng rng(seed);
  std::vector<Perturbation> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<bool> kept = sample_edit_mask(doc.size(), cap, fixed, rng);
    std::string text;
    if (options.strategy == PerturbationOrigin::mask) {
      text = render_masked(doc, kept, options.mask_symbol);
    } else {
      const auto& words = options.vocabulary->words();
      text = render_replaced(doc, kept, [&](std::size_t i) -> std::string {
        std::string w;
        do {
          w = words[rng.uniform_int(0, words.size() - 1)];
        } while (w == doc.token(i));
        return w;
      });
    }
    out.push_back({std::move(text), std::move(kept), options.strategy});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generators

/// Proposes replacements for the span between `prefix` and `suffix`.
class InfillGenerator {
 public:
  virtual ~InfillGenerator() = default;
  virtual std::vector<std::string> infill(const std::string& prefix, const std::string& suffix,
                                          int n, int max_tokens) const = 0;
};

/// Continues a text prefix; the returned string excludes the prefix.
class ContinuationGenerator {
 public:
  virtual ~ContinuationGenerator() = default;
  virtual std::string generate(const std::string& prefix, int max_new_tokens,
                               std::uint64_t seed) const = 0;
  virtual PerturbationOrigin origin() const { return PerturbationOrigin::remote_continuation; }
};

/// Joins tokens with spaces, attaching closing punctuation to the left.
inline std::string detokenize(const std::vector<std::string>& tokens) {
  static const std::set<std::string, std::less<>> kAttachLeft = {".", ",", "!", "?", ";", ":", ")", "]", "%"};
  std::string out;
  for (const std::string& t : tokens) {
    if (!out.empty() && !kAttachLeft.count(t)) out += ' ';
    out += t;
  }
  return out;
}

/// Order-2 word chain fitted on a corpus. Unseen order-2 contexts back off to
/// order 1; a context word never seen at all backs off to the unigram
/// distribution. A seen word without successors ends the continuation.
class MarkovChainGenerator : public ContinuationGenerator {
 public:
  MarkovChainGenerator() = default;

  static MarkovChainGenerator fit(const std::vector<Document>& docs) {
    MarkovChainGenerator chain;
    for (const Document& d : docs) {
      std::vector<std::string> tokens;
      for (std::size_t i = 0; i < d.size(); ++i) tokens.emplace_back(d.token(i));
      chain.add_sequence(tokens);
    }
    return chain;
  }

  void add_sequence(const std::vector<std::string>& tokens) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      ++unigram_[tokens[i]];
      if (i >= 1) ++order1_[tokens[i - 1]][tokens[i]];
      if (i >= 2) ++order2_[{tokens[i - 2], tokens[i - 1]}][tokens[i]];
    }
  }

  bool empty() const { return unigram_.empty(); }

  /// Successor distribution for the given context (after backoff).
  const std::map<std::string, std::size_t>* successors(const std::string* before_last,
                                                        const std::string& last) const {
    if (before_last) {
      if (auto it = order2_.find({*before_last, last}); it != order2_.end()) return &it->second;
    }
    if (auto it = order1_.find(last); it != order1_.end()) return &it->second;
    if (unigram_.count(last)) return nullptr;
    return &unigram_;
  }

  std::vector<std::string> generate_tokens(const std::vector<std::string>& context, int max_new_tokens,
                                           std::uint64_t seed) const {
    std::vector<std::string> history = context;
    std::vector<std::string> out;
    Rng rng(seed);
    for (int step = 0; step < max_new_tokens; ++step) {
      const std::map<std::string, std::size_t>* dist = nullptr;
      if (history.empty()) {
        dist = &unigram_;
      } else {
        const std::string* before = history.size() >= 2 ? &history[history.size() - 2] : nullptr;
        dist = successors(before, history.back());
      }
      if (!dist || dist->empty()) break;
      std::size_t total = 0;
      for (const auto& [_, c] : *dist) total += c;
      std::size_t r = rng.uniform_int(0, total - 1);
      for (const auto& [word, c] : *dist) {
        if (r < c) {
          out.push_back(word);
          history.push_back(word);
          break;
        }
        r -= c;
      }
    }
    return out;
  }

  std::string generate(const std::string& prefix, int max_new_tokens,
                       std::uint64_t seed) const override {
    std::vector<std::string> context;
    for (const Span& s : tokenize(prefix)) context.emplace_back(prefix.substr(s.begin, s.size()));
    return detokenize(generate_tokens(context, max_new_tokens, seed));
  }

  PerturbationOrigin origin() const override { return PerturbationOrigin::random_vocab; }

 private:
  std::map<std::string, std::size_t> unigram_;
  std::map<std::string, std::map<std::string, std::size_t>> order1_;
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::size_t>> order2_;
};

/// Tries `primary` and falls back to `fallback` (with a warning) on failure.
class FallbackContinuation : public ContinuationGenerator {
 public:
  FallbackContinuation(std::shared_ptr<const ContinuationGenerator> primary,
                       std::shared_ptr<const ContinuationGenerator> fallback)
      : primary_(std::move(primary)), fallback_(std::move(fallback)) {}

  std::string generate(const std::string& prefix, int max_new_tokens,
                       std::uint64_t seed) const override {
    if (primary_) {
      try {
        return primary_->generate(prefix, max_new_tokens, seed);
      } catch (const Error& e) {
        Log::warn(std::string("continuation generator failed, using built-in chain: ") + e.what());
      }
    }
    return fallback_->generate(prefix, max_new_tokens, seed);
  }

 private:
  std::shared_ptr<const ContinuationGenerator> primary_;
  std::shared_ptr<const ContinuationGenerator> fallback_;
};

/// prefix + generated continuation; max_new_tokens == 0 returns the prefix.
inline std::string continue_prefix(const std::string& prefix, int max_new_tokens,
                                   const ContinuationGenerator& generator, std::uint64_t seed) {
  if (prefix.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ArgumentError("continue_prefix: empty prefix");
  }
  if (max_new_tokens < 0) throw ArgumentError("continue_prefix: negative max_new_tokens");
  if (max_new_tokens == 0) return prefix;
  const std::string continuation = generator.generate(prefix, max_new_tokens, seed);
  if (continuation.empty()) return prefix;
  return prefix + " " + continuation;
}

// ---------------------------------------------------------------------------
// Single-position variants

struct TokenVariant {
  std::string text;
  PerturbationOrigin origin;
};

inline constexpr int kInfillMaxTokens = 150;

/// k distinct texts that differ from `doc` only at token `position`. The
/// infill generator (when given) is consulted first; missing slots are filled
/// with seeded random vocabulary words.
inline std::vector<TokenVariant> replace_token_variants(const Document& doc, std::size_t position,
                                                        std::size_t k, const Vocabulary& vocabulary,
                                                        std::uint64_t seed,
                                                        const InfillGenerator* infill = nullptr) {
  if (position >= doc.size()) throw ArgumentError("replace_token_variants: position out of range");
  if (k < 1) throw ArgumentError("replace_token_variants: k must be >= 1");
  const Span& span = doc.tokens[position];
  const std::string prefix = doc.text.substr(0, span.begin);
  const std::string suffix = doc.text.substr(span.end);
  const std::string original(doc.token(position));

  std::vector<TokenVariant> out;
  std::set<std::string> seen = {doc.text};
  if (infill) {
    try {
      for (const std::string& candidate : infill->infill(prefix, suffix, int(k), kInfillMaxTokens)) {
        if (out.size() == k) break;
        if (candidate.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        std::string text = prefix + candidate + suffix;
        if (seen.insert(text).second) out.push_back({std::move(text), PerturbationOrigin::remote_infill});
      }
    } catch (const Error& e) {
      Log::warn(std::string("infill generator failed, using random vocabulary: ") + e.what());
    }
  }
  if (out.size() < k) {
    std::vector<std::string> pool;
    for (const std::string& w : vocabulary.words()) {
      if (w != original && !seen.count(prefix + w + suffix)) pool.push_back(w);
    }
    const std::size_t need = k - out.size();
    if (pool.size() < need) {
      throw ArgumentError("replace_token_variants: insufficient distinct replacements (need " +
                          std::to_string(need) + ", vocabulary offers " +
                          std::to_string(pool.size()) + ")");
    }
    Rng rng(seed);
    for (std::size_t pick : rng.sample(pool.size(), need)) {
      out.push_back({prefix + pool[pick] + suffix, PerturbationOrigin::random_vocab});
    }
  }
  return out;
}

}  // namespace xqeval

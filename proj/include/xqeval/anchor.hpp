#pragma once

// Anchor rules: token sets whose presence keeps the detector's decision with
// high probability over a masked neighborhood. Beam search over candidate
// sets with KL-LUCB best-arm identification.

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <set>

#include "xqeval/detector.hpp"
#include "xqeval/explanation.hpp"
#include "xqeval/perturb.hpp"

namespace xqeval {

struct AnchorConfig {
  double tau = 0.75;
  double delta = 0.05;
  double epsilon = 0.1;
  std::size_t max_samples_per_candidate = 200;
  std::size_t init_samples = 10;
  std::size_t batch_size = 10;
  std::size_t beam_size = 1;
  std::size_t max_anchor_size = 10;
  std::size_t coverage_samples = 1000;
  double max_edit_fraction = 0.2;
  std::string mask_symbol = kDefaultMaskSymbol;

  std::string hash() const {
    return Digest()
        .add("anchor")
        .add(std::to_string(tau))
        .add(std::to_string(delta))
        .add(std::to_string(epsilon))
        .add(max_samples_per_candidate)
        .add(init_samples)
        .add(batch_size)
        .add(beam_size)
        .add(max_anchor_size)
        .add(coverage_samples)
        .add(std::to_string(max_edit_fraction))
        .add(mask_symbol)
        .hex()
        .substr(0, 16);
  }
};

namespace kl {

inline double bernoulli_divergence(double p, double q) {
  p = std::clamp(p, 1e-7, 1.0 - 1e-16);
  q = std::clamp(q, 1e-7, 1.0 - 1e-16);
  return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

/// Largest q >= p with KL(p, q) <= level (bisection).
inline double upper_bound(double p, double level) {
  double lo = p;
  double hi = std::min(1.0, p + std::sqrt(level / 2.0));
  for (int i = 1; i < 17; ++i) {
    const double q = (lo + hi) / 2.0;
    if (bernoulli_divergence(p, q) > level) {
      hi = q;
    } else {
      lo = q;
    }
  }
  return hi;
}

/// Smallest q <= p with KL(p, q) <= level (bisection).
inline double lower_bound(double p, double level) {
  double hi = p;
  double lo = std::max(0.0, p - std::sqrt(level / 2.0));
  for (int i = 1; i < 17; ++i) {
    const double q = (lo + hi) / 2.0;
    if (bernoulli_divergence(p, q) > level) {
      lo = q;
    } else {
      hi = q;
    }
  }
  return lo;
}

/// Exploration rate for round t over n arms.
inline double beta(std::size_t n_arms, std::size_t t, double delta) {
  const double temp = std::log(405.5 * double(n_arms) * std::pow(double(t), 1.1) / delta);
  return temp + std::log(temp);
}

}  // namespace kl

namespace detail {

class AnchorSearch {
 public:
  AnchorSearch(const Detector& detector, const Document& doc, std::uint64_t seed, const AnchorConfig& config)
      : detector_(detector), doc_(doc), config_(config), rng_(seed) {
    cap_ = edit_cap(doc.size(), config.max_edit_fraction);
    target_ = detector.predict_one(doc.text).label;
    ++calls_;
    const std::vector<bool> none;
    for (std::size_t i = 0; i < config.coverage_samples; ++i) {
      coverage_masks_.push_back(sample_edit_mask(doc.size(), cap_, none, rng_));
    }
  }

  AnchorRule run(std::uint64_t seed) {
    AnchorRule rule;
    rule.doc_id = doc_.id;
    rule.tau = config_.tau;
    rule.seed = seed;
    rule.config_hash = config_.hash();

    // The empty rule is accepted only when no sampled neighbor changes the
    // decision: otherwise every single-token candidate trivially inherits the
    // neighborhood's base precision and the search is uninformative.
    Arm& empty = arm({});
    draw(empty, config_.max_samples_per_candidate);
    if (empty.positives == empty.n) {
      finish(rule, empty, true);
      return rule;
    }

    std::vector<std::vector<std::size_t>> beam{{}};
    double best_coverage = -1.0;
    const Arm* best = nullptr;
    const Arm* fallback = nullptr;
    for (std::size_t size = 1; size <= std::min(config_.max_anchor_size, doc_.size()); ++size) {
      std::vector<std::size_t> candidates = extend(beam, best_coverage);
      if (candidates.empty()) break;
      for (std::size_t c : candidates) {
        Arm& a = arms_[c];
        if (a.n < config_.init_samples) draw(a, config_.init_samples - a.n);
      }
      const std::vector<std::size_t> chosen = lucb(candidates);
      beam.clear();
      for (std::size_t c : chosen) {
        Arm& a = arms_[c];
        beam.push_back(a.positions);
        if (!fallback || better_fallback(a, *fallback)) fallback = &a;
        if (certify(a) && better_accepted(a, best, best_coverage)) {
          best = &a;
          best_coverage = a.coverage;
        }
      }
    }
    if (best) {
      finish(rule, *best, true);
    } else {
      finish(rule, fallback ? *fallback : empty, false);
    }
    return rule;
  }

 private:
  struct Arm {
    std::vector<std::size_t> positions;
    std::size_t n = 0;
    std::size_t positives = 0;
    double coverage = 0.0;
    double mean() const { return n == 0 ? 0.0 : double(positives) / double(n); }
  };

  Arm& arm(std::vector<std::size_t> positions) {
    auto [it, inserted] = index_.try_emplace(positions, arms_.size());
    if (inserted) {
      Arm a;
      a.positions = std::move(positions);
      std::size_t covered = 0;
      for (const auto& kept : coverage_masks_) {
        bool all = true;
        for (std::size_t p : a.positions) all = all && kept[p];
        covered += all ? 1 : 0;
      }
      a.coverage = coverage_masks_.empty() ? 1.0 : double(covered) / double(coverage_masks_.size());
      arms_.push_back(std::move(a));
    }
    return arms_[it->second];
  }

  void draw(Arm& a, std::size_t k) {
    k = std::min(k, config_.max_samples_per_candidate - std::min(a.n, config_.max_samples_per_candidate));
    if (k == 0) return;
    std::vector<bool> fixed(doc_.size(), false);
    for (std::size_t p : a.positions) fixed[p] = true;
    std::vector<std::string> texts;
    texts.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      texts.push_back(render_masked(doc_, sample_edit_mask(doc_.size(), cap_, fixed, rng_), config_.mask_symbol));
    }
    for (const Prediction& p : predict_batched(detector_, texts)) a.positives += p.label == target_ ? 1 : 0;
    a.n += k;
    calls_ += k;
  }

  bool exhausted(const Arm& a) const { return a.n >= config_.max_samples_per_candidate; }

  std::vector<std::size_t> extend(const std::vector<std::vector<std::size_t>>& beam, double best_coverage) {
    std::set<std::vector<std::size_t>> seen;
    std::vector<std::size_t> out;
    for (const auto& base : beam) {
      for (std::size_t p = 0; p < doc_.size(); ++p) {
        if (std::find(base.begin(), base.end(), p) != base.end()) continue;
        std::vector<std::size_t> next = base;
        next.insert(std::upper_bound(next.begin(), next.end(), p), p);
        if (!seen.insert(next).second) continue;
        arm(next);
        const std::size_t id = index_.at(next);
        // Larger anchors cannot beat an accepted anchor's coverage.
        if (arms_[id].coverage <= best_coverage) continue;
        out.push_back(id);
      }
    }
    return out;
  }

  /// KL-LUCB: identifies the beam_size arms with the highest precision.
  std::vector<std::size_t> lucb(const std::vector<std::size_t>& ids) {
    const std::size_t top = std::min(config_.beam_size, ids.size());
    auto order = [&] {
      std::vector<std::size_t> sorted = ids;
      std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        return arms_[a].mean() > arms_[b].mean();
      });
      return sorted;
    };
    if (top == ids.size()) return ids;
    for (std::size_t t = 1;; ++t) {
      const std::vector<std::size_t> sorted = order();
      const double b = kl::beta(ids.size(), t, config_.delta);
      std::size_t lt = sorted[0];
      double lt_bound = 2.0;
      for (std::size_t i = 0; i < top; ++i) {
        const Arm& a = arms_[sorted[i]];
        const double lb = kl::lower_bound(a.mean(), b / double(a.n));
        if (lb < lt_bound) {
          lt_bound = lb;
          lt = sorted[i];
        }
      }
      std::size_t ut = sorted[top];
      double ut_bound = -1.0;
      for (std::size_t i = top; i < sorted.size(); ++i) {
        const Arm& a = arms_[sorted[i]];
        const double ub = kl::upper_bound(a.mean(), b / double(a.n));
        if (ub > ut_bound) {
          ut_bound = ub;
          ut = sorted[i];
        }
      }
      if (ut_bound - lt_bound <= config_.epsilon) break;
      if (exhausted(arms_[ut]) && exhausted(arms_[lt])) break;
      draw(arms_[ut], config_.batch_size);
      draw(arms_[lt], config_.batch_size);
    }
    std::vector<std::size_t> sorted = order();
    sorted.resize(top);
    return sorted;
  }

  /// Samples until the precision is confidently above or below tau.
  bool certify(Arm& a) {
    const double level = std::log(1.0 / config_.delta);
    while (!exhausted(a)) {
      const double mean = a.mean();
      if (mean >= config_.tau && kl::lower_bound(mean, level / double(a.n)) < config_.tau - config_.epsilon) {
        draw(a, config_.batch_size);
      } else if (mean < config_.tau && kl::upper_bound(mean, level / double(a.n)) >= config_.tau + config_.epsilon) {
        draw(a, config_.batch_size);
      } else {
        break;
      }
    }
    const double mean = a.mean();
    return mean >= config_.tau && kl::lower_bound(mean, level / double(a.n)) > config_.tau - config_.epsilon;
  }

  static bool lexicographically_before(const Arm& a, const Arm& b) { return a.positions < b.positions; }

  static bool better_accepted(const Arm& a, const Arm* best, double best_coverage) {
    if (!best) return true;
    if (a.coverage != best_coverage) return a.coverage > best_coverage;
    if (a.positions.size() != best->positions.size()) return a.positions.size() < best->positions.size();
    return lexicographically_before(a, *best);
  }

  static bool better_fallback(const Arm& a, const Arm& b) {
    if (a.mean() != b.mean()) return a.mean() > b.mean();
    if (a.coverage != b.coverage) return a.coverage > b.coverage;
    if (a.positions.size() != b.positions.size()) return a.positions.size() < b.positions.size();
    return lexicographically_before(a, b);
  }

  void finish(AnchorRule& rule, const Arm& a, bool certified) const {
    rule.token_positions = a.positions;
    rule.token_types.clear();
    for (std::size_t p : a.positions) rule.token_types.emplace_back(doc_.token(p));
    rule.precision_estimate = a.mean();
    rule.coverage_estimate = a.coverage;
    rule.certified = certified;
    rule.samples_used = calls_;
  }

  const Detector& detector_;
  const Document& doc_;
  const AnchorConfig& config_;
  Rng rng_;
  std::size_t cap_ = 0;
  Label target_ = Label::human;
  std::size_t calls_ = 0;
  std::vector<std::vector<bool>> coverage_masks_;
  std::deque<Arm> arms_;
  std::map<std::vector<std::size_t>, std::size_t> index_;
};

}  // namespace detail

/// Highest-coverage token set whose neighborhood precision is certified at
/// tau; when none certifies within the budget, the most precise candidate is
/// returned with certified = false.
inline AnchorRule explain_anchor(const Detector& detector, const Document& doc, std::uint64_t seed,
                                 const AnchorConfig& config = {}) {
  if (!(config.tau > 0.5 && config.tau < 1.0)) throw ArgumentError("explain_anchor: tau must lie in (0.5, 1)");
  if (config.max_samples_per_candidate < 1 || config.batch_size < 1) {
    throw ArgumentError("explain_anchor: sample budgets must be positive");
  }
  if (doc.size() == 0) throw ArgumentError("explain_anchor: document has no tokens");
  detail::AnchorSearch search(detector, doc, seed, config);
  return search.run(seed);
}

}  // namespace xqeval

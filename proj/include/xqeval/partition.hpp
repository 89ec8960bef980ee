#pragma once

// Owen-value attribution over a hierarchical partition of token positions.

#include <bit>
#include <unordered_map>

#include "xqeval/detector.hpp"
#include "xqeval/explanation.hpp"
#include "xqeval/perturb.hpp"

namespace xqeval {

/// Tree over contiguous token ranges. Node 0 is the root.
class PartitionTree {
 public:
  struct Node {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> children;
    bool leaf() const { return children.empty(); }
  };

  /// Balanced recursive bisection; the left half takes the extra token.
  static PartitionTree bisection(std::size_t n) {
    if (n == 0) throw ArgumentError("PartitionTree: empty document");
    PartitionTree t;
    t.n_ = n;
    t.build(0, n);
    return t;
  }

  /// One level: every token is a child of the root (Owen = Shapley).
  static PartitionTree flat(std::size_t n) {
    if (n == 0) throw ArgumentError("PartitionTree: empty document");
    if (n > kMaxFlat) throw ArgumentError("PartitionTree: flat tree limited to " + std::to_string(kMaxFlat) + " tokens");
    PartitionTree t;
    t.n_ = n;
    t.nodes_.push_back({0, n, {}});
    if (n == 1) return t;
    for (std::size_t i = 0; i < n; ++i) {
      t.nodes_[0].children.push_back(t.nodes_.size());
      t.nodes_.push_back({i, i + 1, {}});
    }
    return t;
  }

  static constexpr std::size_t kMaxFlat = 20;

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return n_; }

  std::size_t depth() const { return depth_of(0); }

 private:
  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end, {}});
    if (end - begin > 1) {
      const std::size_t mid = begin + (end - begin + 1) / 2;
      const std::size_t left = build(begin, mid);
      const std::size_t right = build(mid, end);
      nodes_[id].children = {left, right};
    }
    return id;
  }

  std::size_t depth_of(std::size_t id) const {
    std::size_t d = 0;
    for (std::size_t c : nodes_[id].children) d = std::max(d, 1 + depth_of(c));
    return d;
  }

  std::size_t n_ = 0;
  std::vector<Node> nodes_;
};

enum class PartitionKind { bisection, flat };

struct PartitionConfig {
  PartitionKind tree = PartitionKind::bisection;
  std::string mask_symbol = kDefaultMaskSymbol;
  std::size_t batch_size = 256;

  std::string hash() const {
    return Digest()
        .add("shap_partition")
        .add(tree == PartitionKind::flat ? "flat" : "bisection")
        .add(mask_symbol)
        .hex()
        .substr(0, 16);
  }
};

namespace detail {

struct OwenTerm {
  std::size_t player;
  double weight;
  std::size_t with;     // coalition index including the player
  std::size_t without;  // coalition index excluding the player
};

class CoalitionTable {
 public:
  std::size_t intern(const std::vector<bool>& kept) {
    auto [it, inserted] = index_.try_emplace(kept, coalitions_.size());
    if (inserted) coalitions_.push_back(kept);
    return it->second;
  }
  const std::vector<std::vector<bool>>& coalitions() const { return coalitions_; }

 private:
  std::unordered_map<std::vector<bool>, std::size_t> index_;
  std::vector<std::vector<bool>> coalitions_;
};

inline double factorial(std::size_t k) {
  double f = 1.0;
  for (std::size_t i = 2; i <= k; ++i) f *= double(i);
  return f;
}

/// Walks from `node` down to `player`, branching over every subset of the
/// siblings at each level, and records one term per complete path.
inline void enumerate_owen(const PartitionTree& tree, std::size_t node, std::size_t player,
                           std::vector<bool>& present, double weight, CoalitionTable& table,
                           std::vector<OwenTerm>& terms) {
  const auto& nodes = tree.nodes();
  const auto& n = nodes[node];
  if (n.leaf()) {
    const std::size_t without = table.intern(present);
    present[player] = true;
    const std::size_t with = table.intern(present);
    present[player] = false;
    terms.push_back({player, weight, with, without});
    return;
  }
  std::size_t own = n.children.size();
  std::vector<std::size_t> siblings;
  for (std::size_t c : n.children) {
    if (player >= nodes[c].begin && player < nodes[c].end) {
      own = c;
    } else {
      siblings.push_back(c);
    }
  }
  const std::size_t m = n.children.size();
  const std::size_t others = siblings.size();
  const double m_fact = factorial(m);
  for (std::uint64_t subset = 0; subset < (std::uint64_t{1} << others); ++subset) {
    const auto s = static_cast<std::size_t>(std::popcount(subset));
    const double w = factorial(s) * factorial(m - 1 - s) / m_fact;
    for (std::size_t k = 0; k < others; ++k) {
      if (!(subset >> k & 1U)) continue;
      for (std::size_t i = nodes[siblings[k]].begin; i < nodes[siblings[k]].end; ++i) present[i] = true;
    }
    enumerate_owen(tree, own, player, present, weight * w, table, terms);
    for (std::size_t k = 0; k < others; ++k) {
      if (!(subset >> k & 1U)) continue;
      for (std::size_t i = nodes[siblings[k]].begin; i < nodes[siblings[k]].end; ++i) present[i] = false;
    }
  }
}

}  // namespace detail

/// Owen values of the game v(S) = detector score toward f(d) with tokens
/// outside S masked. Every coalition needed by the tree is evaluated once.
inline FeatureImportance explain_shap_partition(const Detector& detector, const Document& doc,
                                                const PartitionConfig& config = {}) {
  const std::size_t n = doc.size();
  if (n == 0) throw ArgumentError("explain_shap_partition: document has no tokens");
  const PartitionTree tree =
      config.tree == PartitionKind::flat ? PartitionTree::flat(n) : PartitionTree::bisection(n);

  detail::CoalitionTable table;
  const std::size_t full = table.intern(std::vector<bool>(n, true));
  table.intern(std::vector<bool>(n, false));
  std::vector<detail::OwenTerm> terms;
  std::vector<bool> present(n, false);
  for (std::size_t player = 0; player < n; ++player) {
    detail::enumerate_owen(tree, 0, player, present, 1.0, table, terms);
  }

  std::vector<std::string> texts;
  texts.reserve(table.coalitions().size());
  for (const auto& kept : table.coalitions()) texts.push_back(render_masked(doc, kept, config.mask_symbol));
  const std::vector<Prediction> predictions = predict_batched(detector, texts, config.batch_size);
  const Label target = predictions[full].label;
  std::vector<double> value(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) value[i] = predictions[i].toward(target);

  FeatureImportance fi;
  fi.doc_id = doc.id;
  fi.method = Method::shap_partition;
  fi.seed = 0;
  fi.config_hash = config.hash();
  fi.scores.assign(n, 0.0);
  for (const auto& t : terms) fi.scores[t.player] += t.weight * (value[t.with] - value[t.without]);
  fi.degenerate = std::all_of(value.begin(), value.end(), [&](double v) { return v == value[full]; });
  return fi;
}

}  // namespace xqeval

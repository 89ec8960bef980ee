#pragma once

// Uniform handle over the explanation methods.

#include <functional>
#include <string>

#include "xqeval/anchor.hpp"
#include "xqeval/explanation.hpp"
#include "xqeval/lime.hpp"
#include "xqeval/partition.hpp"

namespace xqeval {

struct ExplainerSettings {
  LimeConfig lime;
  PartitionConfig partition;
  AnchorConfig anchor;
};

/// A method bound to its configuration (and detector): document + seed to explanation.
class Explainer {
 public:
  using Fn = std::function<Explanation(const Document&, std::uint64_t)>;

  Explainer(Method method, std::string config_hash, Fn fn)
      : method_(method), config_hash_(std::move(config_hash)), fn_(std::move(fn)) {}

  Method method() const { return method_; }
  const std::string& config_hash() const { return config_hash_; }
  Explanation explain(const Document& doc, std::uint64_t seed) const { return fn_(doc, seed); }
  Explanation operator()(const Document& doc, std::uint64_t seed) const { return fn_(doc, seed); }

  /// Anchors are compared as one-hot sets, everything else as scores.
  bool nominal() const { return method_ == Method::anchor; }

 private:
  Method method_;
  std::string config_hash_;
  Fn fn_;
};

/// The detector must outlive the returned explainer.
inline Explainer make_explainer(Method method, const Detector& detector, const ExplainerSettings& s = {}) {
  switch (method) {
    case Method::lime:
      return Explainer(method, s.lime.hash(), [&detector, c = s.lime](const Document& d, std::uint64_t seed) {
        return Explanation(explain_lime(detector, d, seed, c));
      });
    case Method::shap_partition:
      return Explainer(method, s.partition.hash(), [&detector, c = s.partition](const Document& d, std::uint64_t) {
        return Explanation(explain_shap_partition(detector, d, c));
      });
    case Method::anchor:
      return Explainer(method, s.anchor.hash(), [&detector, c = s.anchor](const Document& d, std::uint64_t seed) {
        return Explanation(explain_anchor(detector, d, seed, c));
      });
    case Method::random:
      return Explainer(method, "random", [](const Document& d, std::uint64_t seed) {
        return Explanation(explain_random(d, seed));
      });
  }
  throw ArgumentError("make_explainer: unknown method");
}

}  // namespace xqeval

#pragma once

// Explanation records shared by all explainers.

#include <set>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "xqeval/core.hpp"
#include "xqeval/corpus.hpp"

namespace xqeval {

enum class Method { lime, shap_partition, anchor, random };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::lime: return "lime";
    case Method::shap_partition: return "shap_partition";
    case Method::anchor: return "anchor";
    case Method::random: return "random";
  }
  return "unknown";
}

inline Method parse_method(std::string_view text) {
  if (text == "lime") return Method::lime;
  if (text == "shap_partition" || text == "shap") return Method::shap_partition;
  if (text == "anchor") return Method::anchor;
  if (text == "random") return Method::random;
  throw ArgumentError("unknown explanation method '" + std::string(text) + "'");
}

/// Per-token scores oriented toward the detector's predicted label
/// (positive = supports f(d)).
struct FeatureImportance {
  std::string doc_id;
  std::vector<double> scores;
  Method method = Method::random;
  std::uint64_t seed = 0;
  std::string config_hash;
  /// Detector output carried no signal (e.g. constant across samples).
  bool degenerate = false;
  friend bool operator==(const FeatureImportance&, const FeatureImportance&) = default;
};

struct AnchorRule {
  std::string doc_id;
  /// Sorted token positions.
  std::vector<std::size_t> token_positions;
  std::vector<std::string> token_types;
  double precision_estimate = 0.0;
  double coverage_estimate = 0.0;
  double tau = 0.75;
  /// False when no candidate reached tau within the sample budget.
  bool certified = false;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t samples_used = 0;
  friend bool operator==(const AnchorRule&, const AnchorRule&) = default;
};

using Explanation = std::variant<FeatureImportance, AnchorRule>;

inline const std::string& doc_id_of(const Explanation& e) {
  return std::visit([](const auto& x) -> const std::string& { return x.doc_id; }, e);
}

/// i.i.d. uniform scores on [-1, 1]; independent of document content.
inline FeatureImportance explain_random(const Document& doc, std::uint64_t seed) {
  Rng rng(seed);
  FeatureImportance fi;
  fi.doc_id = doc.id;
  fi.method = Method::random;
  fi.seed = seed;
  fi.config_hash = "random";
  fi.scores.resize(doc.size());
  for (double& s : fi.scores) s = rng.uniform(-1.0, 1.0);
  return fi;
}

/// 1 at anchor positions, 0 elsewhere.
inline FeatureImportance anchor_to_onehot(const AnchorRule& rule, const Document& doc) {
  if (rule.doc_id != doc.id) {
    throw ArgumentError("anchor for '" + rule.doc_id + "' applied to document '" + doc.id + "'");
  }
  FeatureImportance fi;
  fi.doc_id = doc.id;
  fi.method = Method::anchor;
  fi.seed = rule.seed;
  fi.config_hash = rule.config_hash;
  fi.scores.assign(doc.size(), 0.0);
  for (std::size_t p : rule.token_positions) {
    if (p >= doc.size()) throw ArgumentError("anchor position out of range for '" + doc.id + "'");
    fi.scores[p] = 1.0;
  }
  return fi;
}

/// Scores as a vector whatever the explanation kind (anchors one-hot).
inline std::vector<double> score_vector(const Explanation& e, const Document& doc) {
  if (const auto* fi = std::get_if<FeatureImportance>(&e)) return fi->scores;
  return anchor_to_onehot(std::get<AnchorRule>(e), doc).scores;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const FeatureImportance& fi) {
  return {{"kind", "feature_importance"}, {"doc_id", fi.doc_id},   {"method", to_string(fi.method)},
          {"seed", fi.seed},              {"config_hash", fi.config_hash},
          {"degenerate", fi.degenerate},  {"scores", fi.scores}};
}

inline nlohmann::json to_json(const AnchorRule& r) {
  return {{"kind", "anchor"},
          {"doc_id", r.doc_id},
          {"method", "anchor"},
          {"token_positions", r.token_positions},
          {"token_types", r.token_types},
          {"precision", r.precision_estimate},
          {"coverage", r.coverage_estimate},
          {"tau", r.tau},
          {"certified", r.certified},
          {"seed", r.seed},
          {"config_hash", r.config_hash},
          {"samples_used", r.samples_used}};
}

inline nlohmann::json to_json(const Explanation& e) {
  return std::visit([](const auto& x) { return to_json(x); }, e);
}

inline Explanation explanation_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "feature_importance") {
    FeatureImportance fi;
    fi.doc_id = j.at("doc_id").get<std::string>();
    fi.method = parse_method(j.at("method").get<std::string>());
    fi.seed = j.at("seed").get<std::uint64_t>();
    fi.config_hash = j.at("config_hash").get<std::string>();
    fi.degenerate = j.at("degenerate").get<bool>();
    fi.scores = j.at("scores").get<std::vector<double>>();
    return fi;
  }
  if (kind == "anchor") {
    AnchorRule r;
    r.doc_id = j.at("doc_id").get<std::string>();
    r.token_positions = j.at("token_positions").get<std::vector<std::size_t>>();
    r.token_types = j.at("token_types").get<std::vector<std::string>>();
    r.precision_estimate = j.at("precision").get<double>();
    r.coverage_estimate = j.at("coverage").get<double>();
    r.tau = j.at("tau").get<double>();
    r.certified = j.at("certified").get<bool>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.samples_used = j.at("samples_used").get<std::size_t>();
    return r;
  }
  throw ParseError(1, "unknown explanation kind '" + kind + "'");
}

}  // namespace xqeval

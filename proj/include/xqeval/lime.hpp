#pragma once

// Local linear surrogate explanations over token-presence features.

// <resolv.h> (pulled in by the HTTP client) defines _res, which Eigen uses
// as a parameter name.
#pragma push_macro("_res")
#undef _res
#include <Eigen/Dense>
#pragma pop_macro("_res")

#include <cmath>
#include <limits>

#include "xqeval/detector.hpp"
#include "xqeval/explanation.hpp"
#include "xqeval/perturb.hpp"

namespace xqeval {

struct LimeConfig {
  std::size_t n_samples = 1000;
  std::size_t n_features = 10;
  double ridge_alpha = 1.0;
  /// <= 0 selects the default 0.25 * sqrt(token count).
  double kernel_width = 0.0;
  std::string mask_symbol = kDefaultMaskSymbol;
  std::size_t batch_size = 256;

  std::string hash() const {
    return Digest()
        .add("lime")
        .add(n_samples)
        .add(n_features)
        .add(std::to_string(ridge_alpha))
        .add(std::to_string(kernel_width))
        .add(mask_symbol)
        .hex()
        .substr(0, 16);
  }
};

namespace detail {

/// Weighted ridge regression with intercept on a column subset, expressed via
/// the weighted-centred Gram matrix so that each candidate fit during forward
/// selection is a small dense solve.
struct WeightedRidge {
  Eigen::MatrixXd gram;   // Xc^T W Xc
  Eigen::VectorXd cross;  // Xc^T W yc
  double total = 0.0;     // yc^T W yc
  double alpha = 1.0;

  Eigen::VectorXd solve(const std::vector<std::size_t>& cols) const {
    const auto k = static_cast<Eigen::Index>(cols.size());
    Eigen::MatrixXd a(k, k);
    Eigen::VectorXd b(k);
    for (Eigen::Index r = 0; r < k; ++r) {
      b(r) = cross(cols[r]);
      for (Eigen::Index c = 0; c < k; ++c) a(r, c) = gram(cols[r], cols[c]);
      a(r, r) += alpha;
    }
    return a.ldlt().solve(b);
  }

  /// Weighted R^2 of the fit on `cols`.
  double r2(const std::vector<std::size_t>& cols) const {
    const Eigen::VectorXd beta = solve(cols);
    double residual = total;
    for (std::size_t r = 0; r < cols.size(); ++r) {
      residual -= 2.0 * beta(r) * cross(cols[r]);
      for (std::size_t c = 0; c < cols.size(); ++c) residual += beta(r) * beta(c) * gram(cols[r], cols[c]);
    }
    return total > 0.0 ? 1.0 - residual / total : 0.0;
  }
};

}  // namespace detail

/// Samples n_samples masked variants (the first is the unmasked document;
/// the rest mask a uniformly drawn number of uniformly drawn tokens), weights
/// them with the kernel sqrt(exp(-d^2 / w^2)) on cosine distance to the
/// original, selects min(n_features, token count) by forward selection on weighted R^2 and
/// returns the ridge coefficients of the selected tokens.
inline FeatureImportance explain_lime(const Detector& detector, const Document& doc,
                                      std::uint64_t seed, const LimeConfig& config = {}) {
  const std::size_t d = doc.size();
  if (config.n_samples < 10) throw ArgumentError("explain_lime: n_samples must be >= 10");
  if (config.n_features < 1) throw ArgumentError("explain_lime: n_features must be >= 1");
  if (d == 0) throw ArgumentError("explain_lime: empty document");
  // Short documents select every token.
  const std::size_t n_features = std::min(config.n_features, d);
  FeatureImportance fi;
  fi.doc_id = doc.id;
  fi.method = Method::lime;
  fi.seed = seed;
  fi.config_hash = config.hash();
  fi.scores.assign(d, 0.0);

  Rng rng(seed);
  std::vector<std::vector<bool>> masks;
  masks.reserve(config.n_samples);
  masks.emplace_back(d, true);
  for (std::size_t s = 1; s < config.n_samples; ++s) {
    std::vector<bool> kept(d, true);
    const std::size_t m = d > 1 ? rng.uniform_int(1, d - 1) : 1;
    for (std::size_t i : rng.sample(d, m)) kept[i] = false;
    masks.push_back(std::move(kept));
  }
  std::vector<std::string> texts;
  texts.reserve(masks.size());
  for (const auto& kept : masks) texts.push_back(render_masked(doc, kept, config.mask_symbol));
  const std::vector<Prediction> predictions = predict_batched(detector, texts, config.batch_size);
  const Label target = predictions.front().label;

  const auto n = static_cast<Eigen::Index>(masks.size());
  Eigen::VectorXd y(n), w(n);
  const double width = config.kernel_width > 0.0 ? config.kernel_width : 0.25 * std::sqrt(double(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i) = predictions[i].toward(target);
    const double kept = double(std::count(masks[i].begin(), masks[i].end(), true));
    const double distance = 1.0 - std::sqrt(kept / double(d));
    w(i) = std::sqrt(std::exp(-(distance * distance) / (width * width)));
  }
  if (y.maxCoeff() - y.minCoeff() < 1e-12) {
    fi.degenerate = true;
    return fi;
  }

  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, Eigen::Index(j)) = masks[i][j] ? 1.0 : 0.0;
  }
  const double weight_sum = w.sum();
  const Eigen::RowVectorXd x_mean = (w.transpose() * x) / weight_sum;
  const double y_mean = w.dot(y) / weight_sum;
  const Eigen::MatrixXd xc = x.rowwise() - x_mean;
  const Eigen::VectorXd yc = y.array() - y_mean;
  const Eigen::MatrixXd xw = xc.array().colwise() * w.array();

  detail::WeightedRidge ridge;
  ridge.gram = xw.transpose() * xc;
  ridge.cross = xw.transpose() * yc;
  ridge.total = (yc.array() * yc.array() * w.array()).sum();
  ridge.alpha = config.ridge_alpha;

  std::vector<std::size_t> selected;
  std::vector<bool> used(d, false);
  for (std::size_t step = 0; step < n_features; ++step) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_j = d;
    for (std::size_t j = 0; j < d; ++j) {
      if (used[j]) continue;
      selected.push_back(j);
      const double score = ridge.r2(selected);
      selected.pop_back();
      if (score > best) {
        best = score;
        best_j = j;
      }
    }
    used[best_j] = true;
    selected.push_back(best_j);
  }
  const Eigen::VectorXd beta = ridge.solve(selected);
  for (std::size_t r = 0; r < selected.size(); ++r) fi.scores[selected[r]] = beta(Eigen::Index(r));
  return fi;
}

}  // namespace xqeval

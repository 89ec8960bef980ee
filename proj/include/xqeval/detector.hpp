#pragma once

// Black-box binary detector contract, plus the built-in hashed n-gram
// logistic-regression reference detector.

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xqeval/core.hpp"
#include "xqeval/corpus.hpp"

namespace xqeval {

struct Prediction {
  Label label = Label::human;
  /// Confidence of `label`; always >= 0.5.
  double score = 0.5;

  /// Probability mass toward `target`.
  double toward(Label target) const { return label == target ? score : 1.0 - score; }

  static Prediction from_probability(double p_machine) {
    return p_machine >= 0.5 ? Prediction{Label::machine, p_machine}
                            : Prediction{Label::human, 1.0 - p_machine};
  }
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

enum class DetectorKind { builtin, remote };

struct DetectorHandle {
  std::string id;
  DetectorKind kind = DetectorKind::builtin;
  bool deterministic = true;
};

/// Implementations override do_predict; predict() validates the batch and
/// counts calls. Implementations must be safe for concurrent predict calls.
class Detector {
 public:
  Detector() = default;
  Detector(const Detector&) {}
  Detector& operator=(const Detector&) { return *this; }
  virtual ~Detector() = default;

  virtual const DetectorHandle& handle() const = 0;

  std::vector<Prediction> predict(std::span<const std::string> texts) const {
    if (texts.empty()) throw ArgumentError("predict: empty batch");
    for (const std::string& t : texts) {
      if (t.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw ArgumentError("predict: empty text in batch");
      }
    }
    calls_.fetch_add(texts.size(), std::memory_order_relaxed);
    std::vector<Prediction> out = do_predict(texts);
    if (out.size() != texts.size()) throw ProtocolError("detector returned wrong batch size");
    return out;
  }

  Prediction predict_one(const std::string& text) const {
    return predict(std::span<const std::string>(&text, 1)).front();
  }

  /// Number of texts classified so far.
  std::uint64_t calls() const { return calls_.load(std::memory_order_relaxed); }
  void reset_calls() const { calls_.store(0); }

 protected:
  virtual std::vector<Prediction> do_predict(std::span<const std::string> texts) const = 0;

 private:
  mutable std::atomic<std::uint64_t> calls_{0};
};

/// Adapts a callable to the detector contract.
class FunctionDetector : public Detector {
 public:
  using Fn = std::function<Prediction(const std::string&)>;

  FunctionDetector(std::string id, Fn fn, bool deterministic = true)
      : handle_{std::move(id), DetectorKind::builtin, deterministic}, fn_(std::move(fn)) {}

  const DetectorHandle& handle() const override { return handle_; }

 protected:
  std::vector<Prediction> do_predict(std::span<const std::string> texts) const override {
    std::vector<Prediction> out;
    out.reserve(texts.size());
    for (const std::string& t : texts) out.push_back(fn_(t));
    return out;
  }

 private:
  DetectorHandle handle_;
  Fn fn_;
};

/// Predicts in chunks of `batch_size`, preserving order.
inline std::vector<Prediction> predict_batched(const Detector& detector,
                                               const std::vector<std::string>& texts,
                                               std::size_t batch_size = 256) {
  std::vector<Prediction> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, texts.size() - i);
    auto part = detector.predict(std::span<const std::string>(texts.data() + i, n));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

inline std::vector<Prediction> predict_documents(const Detector& detector,
                                                 const std::vector<Document>& docs) {
  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (const Document& d : docs) texts.push_back(d.text);
  return texts.empty() ? std::vector<Prediction>{} : predict_batched(detector, texts);
}

/// Fraction of documents whose predicted label equals the gold label.
inline double accuracy(const Detector& detector, const Corpus& corpus) {
  if (corpus.empty()) throw ArgumentError("accuracy: empty corpus");
  const auto predictions = predict_documents(detector, corpus.documents());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (predictions[i].label == corpus[i].gold) ++correct;
  }
  return double(correct) / double(corpus.size());
}

// ---------------------------------------------------------------------------
// Reference detector

struct ReferenceDetectorConfig {
  int word_ngram_min = 1;
  int word_ngram_max = 2;
  /// Character n-grams over the normalized text; 0 disables them.
  int char_ngram_min = 0;
  int char_ngram_max = 0;
  int hash_bits = 18;
  double regularization = 1e-4;  // L2 strength per example
  int epochs = 30;
  double learning_rate = 2.0;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  std::string mask_symbol = "<mask>";
};

inline nlohmann::json to_json(const ReferenceDetectorConfig& c) {
  return {{"word_ngram_min", c.word_ngram_min}, {"word_ngram_max", c.word_ngram_max},
          {"char_ngram_min", c.char_ngram_min}, {"char_ngram_max", c.char_ngram_max},
          {"hash_bits", c.hash_bits},           {"regularization", c.regularization},
          {"epochs", c.epochs},                 {"learning_rate", c.learning_rate},
          {"holdout_fraction", c.holdout_fraction}, {"seed", c.seed},
          {"mask_symbol", c.mask_symbol}};
}

inline ReferenceDetectorConfig reference_config_from_json(const nlohmann::json& j) {
  ReferenceDetectorConfig c;
  c.word_ngram_min = j.value("word_ngram_min", c.word_ngram_min);
  c.word_ngram_max = j.value("word_ngram_max", c.word_ngram_max);
  c.char_ngram_min = j.value("char_ngram_min", c.char_ngram_min);
  c.char_ngram_max = j.value("char_ngram_max", c.char_ngram_max);
  c.hash_bits = j.value("hash_bits", c.hash_bits);
  c.regularization = j.value("regularization", c.regularization);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  c.seed = j.value("seed", c.seed);
  c.mask_symbol = j.value("mask_symbol", c.mask_symbol);
  return c;
}

/// Presence features over hashed word and character n-grams. Occurrences of
/// the mask symbol are removed before featurization, so masking a token
/// removes its n-grams.
class NgramFeaturizer {
 public:
  explicit NgramFeaturizer(const ReferenceDetectorConfig& config) : config_(config) {
    if (config.hash_bits < 4 || config.hash_bits > 28) throw ArgumentError("hash_bits out of range");
    if (config.word_ngram_min < 1 || config.word_ngram_max < config.word_ngram_min) {
      throw ArgumentError("invalid word n-gram range");
    }
    if (config.char_ngram_min < 0 || config.char_ngram_max < config.char_ngram_min) {
      throw ArgumentError("invalid character n-gram range");
    }
  }

  std::size_t dimension() const { return std::size_t{1} << config_.hash_bits; }

  std::size_t word_feature(const std::vector<std::string>& gram) const {
    std::string key = "w";
    for (const auto& g : gram) {
      key += '\x1f';
      key += g;
    }
    return fnv1a(key) & (dimension() - 1);
  }

  std::vector<std::string> words(std::string_view text) const {
    std::string cleaned(text);
    if (!config_.mask_symbol.empty()) {
      for (std::size_t pos = cleaned.find(config_.mask_symbol); pos != std::string::npos;
           pos = cleaned.find(config_.mask_symbol, pos)) {
        cleaned.replace(pos, config_.mask_symbol.size(), " ");
      }
    }
    std::vector<std::string> out;
    for (const Span& s : tokenize(cleaned)) {
      out.push_back(detail::ascii_lower(std::string_view(cleaned).substr(s.begin, s.size())));
    }
    return out;
  }

  /// Sorted, unique feature indices.
  std::vector<std::uint32_t> features(std::string_view text) const {
    const std::vector<std::string> w = words(text);
    std::vector<std::uint32_t> out;
    for (int n = config_.word_ngram_min; n <= config_.word_ngram_max; ++n) {
      for (std::size_t i = 0; i + n <= w.size(); ++i) {
        std::string key = "w";
        for (int k = 0; k < n; ++k) {
          key += '\x1f';
          key += w[i + k];
        }
        out.push_back(static_cast<std::uint32_t>(fnv1a(key) & (dimension() - 1)));
      }
    }
    if (config_.char_ngram_max > 0) {
      std::string joined = " ";
      for (const auto& x : w) joined += x + " ";
      for (int n = std::max(1, config_.char_ngram_min); n <= config_.char_ngram_max; ++n) {
        for (std::size_t i = 0; i + n <= joined.size(); ++i) {
          out.push_back(static_cast<std::uint32_t>(
              fnv1a("c\x1f" + joined.substr(i, n)) & (dimension() - 1)));
        }
      }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

 private:
  ReferenceDetectorConfig config_;
};

/// Linear classifier over presence features: p(machine) = sigmoid(w.x + b).
class ReferenceDetector : public Detector {
 public:
  ReferenceDetector(ReferenceDetectorConfig config, std::vector<double> weights, double bias)
      : config_(std::move(config)),
        featurizer_(config_),
        weights_(std::move(weights)),
        bias_(bias) {
    if (weights_.size() != featurizer_.dimension()) throw ArgumentError("weight vector size mismatch");
    Digest digest;
    digest.add(to_json(config_).dump());
    digest.add(std::string_view(reinterpret_cast<const char*>(weights_.data()),
                                weights_.size() * sizeof(double)));
    digest.add(std::string_view(reinterpret_cast<const char*>(&bias_), sizeof(double)));
    handle_ = {"builtin-" + digest.hex().substr(0, 16), DetectorKind::builtin, true};
  }

  const DetectorHandle& handle() const override { return handle_; }
  const ReferenceDetectorConfig& config() const { return config_; }
  const NgramFeaturizer& featurizer() const { return featurizer_; }
  const std::vector<double>& weights() const { return weights_; }
  double bias() const { return bias_; }
  std::optional<double> heldout_accuracy() const { return heldout_accuracy_; }
  void set_heldout_accuracy(std::optional<double> a) { heldout_accuracy_ = a; }

  double decision_function(std::string_view text) const {
    double z = bias_;
    for (std::uint32_t f : featurizer_.features(text)) z += weights_[f];
    return z;
  }

  /// Weight of a single word unigram (useful for inspecting planted markers).
  double word_weight(std::string_view word) const {
    return weights_[featurizer_.word_feature({detail::ascii_lower(word)})];
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["config"] = to_json(config_);
    j["bias"] = bias_;
    nlohmann::json sparse = nlohmann::json::array();
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (weights_[i] != 0.0) sparse.push_back({i, weights_[i]});
    }
    j["weights"] = std::move(sparse);
    if (heldout_accuracy_) j["heldout_accuracy"] = *heldout_accuracy_;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write model '" + path + "'");
    out << j.dump() << '\n';
  }

  static ReferenceDetector load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open model '" + path + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(1, std::string("model file: ") + e.what());
    }
    ReferenceDetectorConfig config = reference_config_from_json(j.at("config"));
    std::vector<double> weights(std::size_t{1} << config.hash_bits, 0.0);
    for (const auto& entry : j.at("weights")) {
      weights.at(entry.at(0).get<std::size_t>()) = entry.at(1).get<double>();
    }
    ReferenceDetector detector(config, std::move(weights), j.at("bias").get<double>());
    if (j.contains("heldout_accuracy")) detector.set_heldout_accuracy(j["heldout_accuracy"].get<double>());
    return detector;
  }

 protected:
  std::vector<Prediction> do_predict(std::span<const std::string> texts) const override {
    std::vector<Prediction> out;
    out.reserve(texts.size());
    for (const std::string& t : texts) {
      out.push_back(Prediction::from_probability(1.0 / (1.0 + std::exp(-decision_function(t)))));
    }
    return out;
  }

 private:
  ReferenceDetectorConfig config_;
  NgramFeaturizer featurizer_;
  std::vector<double> weights_;
  double bias_;
  DetectorHandle handle_;
  std::optional<double> heldout_accuracy_;
};

/// Fits the reference detector with seeded SGD on logistic loss + L2.
/// A stratified holdout (config.holdout_fraction) is kept out of training
/// and its accuracy recorded; classes with a single document are not split.
inline ReferenceDetector train_reference_detector(const Corpus& corpus,
                                                  const ReferenceDetectorConfig& config) {
  if (corpus.count(Label::human) == 0 || corpus.count(Label::machine) == 0) {
    throw TrainingError("training corpus must contain both classes");
  }
  if (config.holdout_fraction < 0.0 || config.holdout_fraction >= 1.0) {
    throw ArgumentError("holdout_fraction must lie in [0, 1)");
  }
  NgramFeaturizer featurizer(config);
  Rng rng(derive_seed(config.seed, "reference-detector"));

  std::vector<std::size_t> train, holdout;
  for (Label label : {Label::human, Label::machine}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus[i].gold == label) members.push_back(i);
    }
    rng.shuffle(members);
    std::size_t n_hold = static_cast<std::size_t>(std::floor(config.holdout_fraction * members.size()));
    if (members.size() < 2) n_hold = 0;
    holdout.insert(holdout.end(), members.begin(), members.begin() + n_hold);
    train.insert(train.end(), members.begin() + n_hold, members.end());
  }

  std::vector<std::vector<std::uint32_t>> x(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) x[i] = featurizer.features(corpus[i].text);

  std::vector<double> w(featurizer.dimension(), 0.0);
  double b = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(train);
    const double lr = config.learning_rate / (1.0 + 0.1 * epoch);
    for (std::size_t i : train) {
      double z = b;
      for (std::uint32_t f : x[i]) z += w[f];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double y = corpus[i].gold == Label::machine ? 1.0 : 0.0;
      const double g = p - y;
      // Step scaled by the number of active features keeps the change in z bounded.
      const double step = lr / double(std::max<std::size_t>(1, x[i].size()));
      for (std::uint32_t f : x[i]) w[f] -= step * (g + config.regularization * w[f]);
      b -= step * g;
    }
  }

  ReferenceDetector detector(config, std::move(w), b);
  if (!holdout.empty()) {
    std::size_t correct = 0;
    for (std::size_t i : holdout) {
      if (detector.predict_one(corpus[i].text).label == corpus[i].gold) ++correct;
    }
    detector.set_heldout_accuracy(double(correct) / double(holdout.size()));
  }
  detector.reset_calls();
  return detector;
}

}  // namespace xqeval

#pragma once

#include <filesystem>
#include <functional>
#include <thread>

#include "httplib.h"
#include "xqeval/corpus.hpp"
#include "xqeval/detector.hpp"

namespace xqtest {

using namespace xqeval;

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "river", "stone", "quiet", "morning", "window", "garden", "people", "simple", "north", "paper",
      "yellow", "market", "bridge", "winter", "little", "travel", "letter", "sunday", "forest", "answer",
      "silver", "mirror", "coffee", "planet", "number", "camera", "street", "orange", "doctor", "castle",
      "table", "chair", "kitchen", "summer", "autumn", "spring", "island", "valley", "mountain", "ocean",
      "teacher", "student", "office", "button", "pocket", "basket", "candle", "ladder", "engine", "rocket",
      "pencil", "bottle", "jacket", "carpet", "blanket", "pillow", "lantern", "harbor", "village", "meadow",
      "thunder", "shadow", "whisper", "silence", "journey", "history", "picture", "captain", "dragon", "wizard",
      "butter", "garlic", "pepper", "lemon", "cherry", "melon", "tomato", "potato", "carrot", "onion",
      "violin", "guitar", "trumpet", "piano", "drummer", "singer", "dancer", "painter", "writer", "farmer",
      "monday", "friday", "evening", "midnight", "weekend", "season", "minute", "moment", "decade", "century",
      "purple", "golden", "crimson", "velvet", "marble", "copper", "timber", "granite", "crystal", "feather",
  };
  return words;
}

inline constexpr const char* kMarker = "zyx";

/// Sentences of filler words; machine documents carry the marker once at a
/// random position, human documents never do.
inline Document planted_document(const std::string& id, Label label, std::size_t words, Rng& rng,
                                 const std::string& marker = kMarker) {
  const auto& pool = filler_words();
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < words; ++i) tokens.push_back(pool[rng.uniform_int(0, pool.size() - 1)]);
  if (label == Label::machine) tokens[rng.uniform_int(0, words - 1)] = marker;
  std::string text;
  std::size_t in_sentence = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::string w = tokens[i];
    if (in_sentence == 0 && w != marker) w[0] = char(std::toupper(static_cast<unsigned char>(w[0])));
    if (!text.empty()) text += ' ';
    text += w;
    ++in_sentence;
    if (in_sentence == 8 || i + 1 == tokens.size()) {
      text += '.';
      in_sentence = 0;
    }
  }
  return make_document(id, text, label);
}

inline Corpus planted_corpus(std::size_t per_class, std::size_t words, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Document> docs;
  for (std::size_t i = 0; i < per_class; ++i) {
    docs.push_back(planted_document("h" + std::to_string(i), Label::human, words, rng));
    docs.push_back(planted_document("m" + std::to_string(i), Label::machine, words, rng));
  }
  return Corpus(std::move(docs));
}

/// Detector: machine iff the marker occurs as a token.
inline FunctionDetector marker_detector(const std::string& marker = kMarker) {
  return FunctionDetector("marker", [marker](const std::string& text) {
    for (const Span& s : tokenize(text)) {
      if (std::string_view(text).substr(s.begin, s.size()) == marker) return Prediction{Label::machine, 0.9};
    }
    return Prediction{Label::human, 0.9};
  });
}

/// HTTP server on an ephemeral localhost port, stopped on destruction.
class StubServer {
 public:
  explicit StubServer(const std::function<void(httplib::Server&)>& routes) {
    routes(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("xqeval-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace xqtest

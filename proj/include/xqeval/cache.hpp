#pragma once

// Content-addressed on-disk explanation cache: one JSON file per key.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "xqeval/explanation.hpp"

namespace xqeval {

struct CacheKey {
  std::string detector_id;
  Method method = Method::random;
  std::string config_hash;
  std::string doc_text;
  std::uint64_t seed = 0;

  std::string digest() const {
    return Digest().add(detector_id).add(to_string(method)).add(config_hash).add(doc_text).add(seed).hex();
  }
};

class ExplanationCache {
 public:
  explicit ExplanationCache(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw IoError("cannot create cache directory '" + root_.string() + "': " + ec.message());
  }

  std::filesystem::path path_for(const std::string& key) const {
    return root_ / key.substr(0, 2) / (key + ".json");
  }

  std::optional<Explanation> get(const CacheKey& key) const {
    const std::string k = key.digest();
    const auto path = path_for(k);
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      misses_.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
    try {
      std::stringstream buffer;
      buffer << in.rdbuf();
      const nlohmann::json record = nlohmann::json::parse(buffer.str());
      if (record.at("key").get<std::string>() != k) throw ParseError(1, "key mismatch");
      Explanation e = explanation_from_json(record.at("explanation"));
      hits_.fetch_add(1, std::memory_order_relaxed);
      return e;
    } catch (const std::exception& e) {
      Log::warn("cache entry '" + path.string() + "' is corrupt (" + e.what() + "); recomputing");
      misses_.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
  }

  void put(const CacheKey& key, const Explanation& explanation) const {
    const std::string k = key.digest();
    const auto path = path_for(k);
    std::filesystem::create_directories(path.parent_path());
    nlohmann::json record = {{"key", k},
                             {"method", to_string(key.method)},
                             {"version", kVersion},
                             {"doc_id", doc_id_of(explanation)},
                             {"seed", key.seed},
                             {"config", key.config_hash},
                             {"explanation", to_json(explanation)}};
    // Write to a unique sibling and rename so readers never see partial files.
    std::ostringstream suffix;
    suffix << ".tmp." << std::this_thread::get_id() << '.' << counter_.fetch_add(1);
    auto tmp = path;
    tmp += suffix.str();
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write cache entry '" + tmp.string() + "'");
      out << record.dump();
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot commit cache entry '" + path.string() + "': " + ec.message());
  }

  std::size_t hits() const { return hits_.load(); }
  std::size_t misses() const { return misses_.load(); }
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  mutable std::atomic<std::size_t> hits_{0};
  mutable std::atomic<std::size_t> misses_{0};
  mutable std::atomic<std::uint64_t> counter_{0};
};

}  // namespace xqeval

#pragma once

// HTTP clients for remote detectors and remote text generators.
//
//   POST /v1/predict  {"texts":[...]}                       -> {"predictions":[{"label","score"}]}
//   POST /v1/infill   {"prefix","suffix","n","max_tokens"}  -> {"candidates":[...]}
//   POST /v1/continue {"prefix","n","max_tokens"}           -> {"candidates":[...]}
//
// Non-200 responses carry {"error": string}.

#include <chrono>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>

#include "httplib.h"
#include "json.hpp"
#include "xqeval/detector.hpp"
#include "xqeval/perturb.hpp"

namespace xqeval {

struct HttpEndpoint {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  int timeout_ms = 30000;
  int retries = 3;  // extra attempts after the first
  int retry_backoff_ms = 50;
};

namespace detail {

/// POSTs JSON with retries on transport failures and 5xx responses. 4xx and
/// malformed bodies are protocol errors and are not retried.
inline nlohmann::json post_json(const HttpEndpoint& endpoint, const std::string& path,
                                const nlohmann::json& body) {
  const int attempts = 1 + std::max(0, endpoint.retries);
  std::string last_error = "no attempt made";
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    httplib::Client client(endpoint.base_url);
    const auto timeout = std::chrono::milliseconds(endpoint.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto response = client.Post(path, body.dump(), "application/json");
    if (!response) {
      last_error = "transport failure: " + httplib::to_string(response.error());
    } else if (response->status == 200) {
      try {
        return nlohmann::json::parse(response->body);
      } catch (const nlohmann::json::parse_error& e) {
        throw ProtocolError(path + ": response is not JSON: " + e.what());
      }
    } else {
      std::string message = response->body;
      try {
        auto j = nlohmann::json::parse(response->body);
        if (j.contains("error") && j["error"].is_string()) message = j["error"].get<std::string>();
      } catch (...) {
      }
      if (response->status < 500) {
        throw ProtocolError(path + ": HTTP " + std::to_string(response->status) + ": " + message);
      }
      last_error = "HTTP " + std::to_string(response->status) + ": " + message;
    }
    if (attempt < attempts) {
      std::this_thread::sleep_for(std::chrono::milliseconds(endpoint.retry_backoff_ms * attempt));
    }
  }
  throw TransportError(endpoint.base_url + path + ": " + last_error, attempts);
}

}  // namespace detail

struct RemoteDetectorConfig {
  HttpEndpoint endpoint;
  std::string id;  // defaults to "remote:" + base_url
  std::size_t batch_size = 32;
  bool deterministic = false;
};

class RemoteDetector : public Detector {
 public:
  explicit RemoteDetector(RemoteDetectorConfig config) : config_(std::move(config)) {
    if (config_.batch_size == 0) throw ArgumentError("batch_size must be positive");
    handle_ = {config_.id.empty() ? "remote:" + config_.endpoint.base_url : config_.id,
               DetectorKind::remote, config_.deterministic};
  }

  const DetectorHandle& handle() const override { return handle_; }

 protected:
  std::vector<Prediction> do_predict(std::span<const std::string> texts) const override {
    std::vector<Prediction> out;
    out.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); i += config_.batch_size) {
      const std::size_t n = std::min(config_.batch_size, texts.size() - i);
      nlohmann::json request;
      request["texts"] = std::vector<std::string>(texts.begin() + i, texts.begin() + i + n);
      const nlohmann::json response = detail::post_json(config_.endpoint, "/v1/predict", request);
      parse_predictions(response, n, out);
    }
    return out;
  }

 private:
  static void parse_predictions(const nlohmann::json& response, std::size_t expected,
                                std::vector<Prediction>& out) {
    if (!response.is_object() || !response.contains("predictions") ||
        !response["predictions"].is_array()) {
      throw ProtocolError("/v1/predict: missing 'predictions' array");
    }
    const auto& list = response["predictions"];
    if (list.size() != expected) {
      throw ProtocolError("/v1/predict: expected " + std::to_string(expected) +
                          " predictions, got " + std::to_string(list.size()));
    }
    for (const auto& item : list) {
      if (!item.is_object() || !item.contains("label") || !item["label"].is_string() ||
          !item.contains("score") || !item["score"].is_number()) {
        throw ProtocolError("/v1/predict: malformed prediction");
      }
      Label label;
      try {
        label = parse_label(item["label"].get<std::string>());
      } catch (const ArgumentError&) {
        throw ProtocolError("/v1/predict: unknown label");
      }
      const double score = item["score"].get<double>();
      if (!(score >= 0.0 && score <= 1.0)) throw ProtocolError("/v1/predict: score outside [0,1]");
      // Services reporting the winning-class confidence below 0.5 are
      // normalised to the orientation used throughout.
      out.push_back(score >= 0.5 ? Prediction{label, score} : Prediction{opposite(label), 1.0 - score});
    }
  }

  RemoteDetectorConfig config_;
  DetectorHandle handle_;
};

// ---------------------------------------------------------------------------
// Replay log: every remote generation is appended as {request_hash, response}
// and answered from the log on later identical requests.

class ReplayLog {
 public:
  ReplayLog() = default;
  explicit ReplayLog(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        entries_[j.at("request_hash").get<std::string>()] = j.at("response");
      } catch (const std::exception&) {
        Log::warn("replay log '" + path_ + "': skipping malformed line");
      }
    }
  }

  static std::string hash(const std::string& path, const nlohmann::json& request) {
    return Digest().add(path).add(request.dump()).hex();
  }

  std::optional<nlohmann::json> find(const std::string& request_hash) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(request_hash);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void append(const std::string& request_hash, const nlohmann::json& response) {
    std::lock_guard lock(mutex_);
    entries_[request_hash] = response;
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    out << nlohmann::json{{"request_hash", request_hash}, {"response", response}}.dump() << '\n';
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

 private:
  std::string path_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, nlohmann::json> entries_;
};

/// Client for the remote infill/continuation services.
class RemoteGeneratorClient {
 public:
  RemoteGeneratorClient(HttpEndpoint endpoint, std::shared_ptr<ReplayLog> replay = nullptr)
      : endpoint_(std::move(endpoint)),
        replay_(replay ? std::move(replay) : std::make_shared<ReplayLog>()) {}

  std::vector<std::string> infill(const std::string& prefix, const std::string& suffix, int n,
                                  int max_tokens) const {
    nlohmann::json request = {{"prefix", prefix}, {"suffix", suffix}, {"n", n}, {"max_tokens", max_tokens}};
    return candidates("/v1/infill", request);
  }

  std::vector<std::string> continuation(const std::string& prefix, int n, int max_tokens) const {
    nlohmann::json request = {{"prefix", prefix}, {"n", n}, {"max_tokens", max_tokens}};
    return candidates("/v1/continue", request);
  }

  const ReplayLog& replay() const { return *replay_; }

 private:
  std::vector<std::string> candidates(const std::string& path, const nlohmann::json& request) const {
    const std::string key = ReplayLog::hash(path, request);
    nlohmann::json response;
    if (auto cached = replay_->find(key)) {
      response = *cached;
    } else {
      response = detail::post_json(endpoint_, path, request);
      if (!response.is_object() || !response.contains("candidates") || !response["candidates"].is_array()) {
        throw ProtocolError(path + ": missing 'candidates' array");
      }
      replay_->append(key, response);
    }
    std::vector<std::string> out;
    for (const auto& c : response.at("candidates")) {
      if (!c.is_string()) throw ProtocolError(path + ": non-string candidate");
      out.push_back(c.get<std::string>());
    }
    return out;
  }

  HttpEndpoint endpoint_;
  std::shared_ptr<ReplayLog> replay_;
};

/// Infill backed by the remote service.
class RemoteInfill : public InfillGenerator {
 public:
  explicit RemoteInfill(std::shared_ptr<const RemoteGeneratorClient> client) : client_(std::move(client)) {}
  std::vector<std::string> infill(const std::string& prefix, const std::string& suffix, int n,
                                  int max_tokens) const override {
    return client_->infill(prefix, suffix, n, max_tokens);
  }

 private:
  std::shared_ptr<const RemoteGeneratorClient> client_;
};

/// Continuation backed by the remote service. One request asks for `fanout`
/// candidates; the seed picks among them, so repeated attempts on the same
/// prefix share one (replayable) request.
class RemoteContinuation : public ContinuationGenerator {
 public:
  RemoteContinuation(std::shared_ptr<const RemoteGeneratorClient> client, int fanout = 5)
      : client_(std::move(client)), fanout_(fanout) {}

  std::string generate(const std::string& prefix, int max_new_tokens,
                       std::uint64_t seed) const override {
    auto candidates = client_->continuation(prefix, fanout_, max_new_tokens);
    if (candidates.empty()) throw ProtocolError("/v1/continue: no candidates");
    return candidates[seed % candidates.size()];
  }

 private:
  std::shared_ptr<const RemoteGeneratorClient> client_;
  int fanout_;
};

}  // namespace xqeval

#pragma once

// JSON REST API over a SessionStore.
//
//   POST /v1/sessions                    {participant, detector, method}
//   GET  /v1/sessions/{id}/task
//   POST /v1/sessions/{id}/annotation    {doc_id, label}
//   POST /v1/sessions/{id}/likert        {doc_id, q, value}
//   POST /v1/sessions/{id}/advance
//   GET  /v1/results?method=&detector=
//
// 400 on validation errors, 404 on unknown sessions, 409 on phase errors.

#include <string>

#include "httplib.h"
#include "json.hpp"
#include "xqeval/study.hpp"

namespace xqeval {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const NotFoundError& e) {
    send_error(res, 404, e.what());
  } catch (const StateError& e) {
    send_error(res, 409, e.what());
  } catch (const ArgumentError& e) {
    send_error(res, 400, e.what());
  } catch (const ParseError& e) {
    send_error(res, 400, e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, std::string("malformed request: ") + e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

inline nlohmann::json body_of(const httplib::Request& req) {
  auto j = nlohmann::json::parse(req.body);
  if (!j.is_object()) throw ArgumentError("request body must be a JSON object");
  return j;
}

inline int question_of(const nlohmann::json& q) {
  if (q.is_number_integer()) return q.get<int>();
  const std::string s = q.get<std::string>();
  if (s.size() == 2 && (s[0] == 'Q' || s[0] == 'q') && s[1] >= '1' && s[1] <= '3') return s[1] - '0';
  throw ArgumentError("question must be 1..3 or Q1..Q3");
}

}  // namespace detail

class StudyServer {
 public:
  explicit StudyServer(SessionStore& store) : store_(store) { routes(); }

  /// Blocks until stop().
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  /// Binds to a free port and returns it; serve with listen_after_bind().
  int bind_any(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  void routes() {
    using detail::guarded;
    using detail::send_json;
    server_.Post("/v1/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto j = detail::body_of(req);
        const std::string id = store_.create_session(j.at("participant").get<std::string>(),
                                                     j.at("detector").get<std::string>(),
                                                     parse_method(j.at("method").get<std::string>()));
        send_json(res, 201, {{"session_id", id}, {"phase", "p1"}});
      });
    });
    server_.Get(R"(/v1/sessions/([^/]+)/task)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, store_.task(req.matches[1])); });
    });
    server_.Post(R"(/v1/sessions/([^/]+)/annotation)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        const auto j = detail::body_of(req);
        const std::size_t before = store_.session(id).audit.size();
        store_.post_annotation(id, j.at("doc_id").get<std::string>(), parse_label(j.at("label").get<std::string>()));
        send_json(res, 200, {{"ok", true}, {"overwritten", store_.session(id).audit.size() > before}});
      });
    });
    server_.Post(R"(/v1/sessions/([^/]+)/likert)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        const auto j = detail::body_of(req);
        const auto& value = j.at("value");
        if (!value.is_number_integer()) throw ArgumentError("rating must be an integer");
        const std::size_t before = store_.session(id).audit.size();
        store_.post_likert(id, j.at("doc_id").get<std::string>(), detail::question_of(j.at("q")), value.get<int>());
        send_json(res, 200, {{"ok", true}, {"overwritten", store_.session(id).audit.size() > before}});
      });
    });
    server_.Post(R"(/v1/sessions/([^/]+)/advance)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, {{"phase", to_string(store_.advance(req.matches[1]))}}); });
    });
    server_.Get("/v1/results", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        std::optional<Method> method;
        std::optional<std::string> detector;
        if (req.has_param("method")) method = parse_method(req.get_param_value("method"));
        if (req.has_param("detector")) detector = req.get_param_value("detector");
        nlohmann::ordered_json out;
        out["results"] = nlohmann::ordered_json::array();
        for (const auto& r : score_study(store_.sessions(), store_.sets(), method, detector)) out["results"].push_back(to_json(r));
        send_json(res, 200, out);
      });
    });
  }

  SessionStore& store_;
  httplib::Server server_;
};

}  // namespace xqeval

#pragma once

// cpp-httplib routes for SessionService.
//
//   POST /sessions                     create
//   POST /sessions/{id}/attempts       submit an attempt report
//   POST /sessions/{id}/levels/next    advance (idempotent while untouched)
//   GET  /sessions/{id}/summary        SessionLog
//   GET  /healthz
//
// Errors come back as {"error": code, "message": text} with the status from
// http_status().

#include <functional>
#include <string>

// Eigen (via service.hpp) must come before httplib: <resolv.h> defines a
// `_res` macro that breaks Eigen's product kernels.
#include "perm/error.hpp"
#include "perm/service.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace perm {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nullptr;
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("body is not JSON: ") + e.what());
  }
}

inline httplib::Server::Handler guarded(std::function<nlohmann::json(const httplib::Request&)> fn) {
  return [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
    try {
      send_json(res, 200, fn(req));
    } catch (const Error& e) {
      send_json(res, http_status(e.code()), error_body(e));
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", "internal"}, {"message", e.what()}});
    }
  };
}

}  // namespace detail

inline void install_routes(httplib::Server& server, SessionService& service) {
  using detail::guarded;
  using detail::parse_body;
  server.Get("/healthz", guarded([&](const httplib::Request&) { return service.health(); }));
  server.Post("/sessions",
              guarded([&](const httplib::Request& req) { return service.create_session(parse_body(req)); }));
  server.Post(R"(/sessions/([^/]+)/attempts)", guarded([&](const httplib::Request& req) {
                return service.submit_attempt(req.matches[1].str(), parse_body(req));
              }));
  server.Post(R"(/sessions/([^/]+)/levels/next)",
              guarded([&](const httplib::Request& req) { return service.next_level(req.matches[1].str()); }));
  server.Get(R"(/sessions/([^/]+)/summary)",
             guarded([&](const httplib::Request& req) { return service.summary(req.matches[1].str()); }));
}

}  // namespace perm

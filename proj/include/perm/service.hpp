#pragma once

// Session service: server-held session state behind a JSON request/response
// surface. Transport lives in perm/http.hpp; everything here is callable
// directly, which is how most tests drive it.
//
// Wire shapes
//   create   {"condition"?: "perm"|"random"|"none", "display_name"?: str}
//   attempt  {"reached_goal", "max_tile", "steps", "duration_ms",
//             "raw_reward"?, "actions"?: ["walk"|"jump", ...], "seed"?: str}
//   level    {"phase", "index", "attempts_used", "attempts_cap", "closed",
//             "completed", "descriptor"}
//   state    {"session_id", "condition", "phase", "training_levels",
//             "training_levels_done", "level_open", "ability_projection"|null}

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "perm/error.hpp"
#include "perm/model.hpp"
#include "perm/random.hpp"
#include "perm/session.hpp"

namespace perm {

struct ServiceConfig {
  ProtocolConfig protocol;
  std::optional<Condition> condition_override;  // forces every new session
  std::uint64_t seed = 0;                       // ids and per-session seeds
};

/// HTTP status for a library error.
inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kFormat:
    case ErrorCode::kDomain:
    case ErrorCode::kDimensionMismatch:
      return 400;
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kState: return 409;
    case ErrorCode::kRejected: return 422;
    case ErrorCode::kNotTrained: return 503;
    default: return 500;
  }
}

inline nlohmann::json error_body(const Error& e) {
  return {{"error", to_string(e.code())}, {"message", e.what()}};
}

/// Parses an attempt body. Type errors surface as kInvalidArgument.
inline AttemptReport parse_attempt_report(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidArgument, "attempt body must be a JSON object");
  try {
    AttemptReport r;
    j.at("reached_goal").get_to(r.reached_goal);
    j.at("max_tile").get_to(r.max_tile);
    j.at("steps").get_to(r.steps);
    j.at("duration_ms").get_to(r.duration_ms);
    if (j.contains("raw_reward") && !j.at("raw_reward").is_null()) r.raw_reward = j.at("raw_reward").get<double>();
    if (j.contains("actions") && !j.at("actions").is_null()) r.actions = parse_actions(j.at("actions"));
    if (j.contains("seed") && !j.at("seed").is_null()) r.seed = std::stoull(j.at("seed").get<std::string>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("bad attempt report: ") + e.what());
  } catch (const std::logic_error& e) {  // stoull
    throw Error(ErrorCode::kInvalidArgument, std::string("bad attempt seed: ") + e.what());
  }
}

class SessionService {
 public:
  /// `model` may be null; perm sessions then fail with kNotTrained.
  SessionService(std::shared_ptr<const PermModel> model, ServiceConfig config = {})
      : model_(std::move(model)), config_(std::move(config)) {
    config_.protocol.validate();
    if (model_ && !model_->trained()) throw Error(ErrorCode::kNotTrained, "service model is not trained");
    if (config_.condition_override == Condition::kPerm && !model_) {
      throw Error(ErrorCode::kNotTrained, "perm override needs a model");
    }
  }

  bool has_model() const { return model_ != nullptr; }
  const ServiceConfig& config() const { return config_; }

  nlohmann::json create_session(const nlohmann::json& body) {
    if (!body.is_null() && !body.is_object()) throw Error(ErrorCode::kInvalidArgument, "body must be a JSON object");
    std::string display_name;
    std::optional<Condition> requested;
    try {
      if (body.contains("display_name") && !body.at("display_name").is_null()) {
        display_name = body.at("display_name").get<std::string>();
      }
      if (body.contains("condition") && !body.at("condition").is_null()) {
        requested = parse_condition(body.at("condition").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, std::string("bad session request: ") + e.what());
    }

    const std::uint64_t n = counter_.fetch_add(1);
    const std::uint64_t session_seed = derive_seed(config_.seed, 0x5e55, n);
    Condition condition;
    if (config_.condition_override) {
      condition = *config_.condition_override;
    } else if (requested) {
      condition = *requested;
    } else {
      // Random assignment; perm only when a model is loaded.
      Rng rng(derive_seed(session_seed, 0xa551));
      const std::uint64_t choices = model_ ? 3 : 2;
      const Condition pool[] = {Condition::kRandom, Condition::kNone, Condition::kPerm};
      condition = pool[rng.below(choices)];
    }

    auto entry = std::make_shared<Entry>(
        SessionMachine(condition, model_, session_seed, config_.protocol, make_id(n), display_name));
    const std::string id = entry->machine.log().session_id;
    nlohmann::json out;
    {
      std::lock_guard lock(entry->mutex);
      out = {{"session_id", id}, {"state", state_view(entry->machine)}, {"level", level_view(entry->machine)}};
    }
    std::unique_lock lock(sessions_mutex_);
    sessions_.emplace(id, std::move(entry));
    return out;
  }

  nlohmann::json submit_attempt(const std::string& id, const nlohmann::json& body) {
    auto entry = find(id);
    const AttemptReport report = parse_attempt_report(body);
    std::lock_guard lock(entry->mutex);
    auto& m = entry->machine;
    const LevelRecord& rec = m.submit_attempt(report);
    const int used = static_cast<int>(rec.attempts.size());
    return {{"accepted", true},
            {"result", rec.attempts.back().result},
            {"attempts_used", used},
            {"attempts_remaining", rec.closed ? 0 : m.log().protocol.attempts_cap - used},
            {"level_closed", rec.closed},
            {"completed", rec.completed},
            {"state", state_view(m)}};
  }

  /// {"done": false, "level": ..., "state": ...} or {"done": true, "state": ...}.
  nlohmann::json next_level(const std::string& id) {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    auto& m = entry->machine;
    const LevelRecord* rec = m.next_level();
    nlohmann::json out{{"done", rec == nullptr}, {"state", state_view(m)}};
    if (rec) out["level"] = level_view(m);
    return out;
  }

  nlohmann::json summary(const std::string& id) const {
    auto entry = find(id);
    std::lock_guard lock(entry->mutex);
    return entry->machine.log();
  }

  nlohmann::json health() const {
    std::shared_lock lock(sessions_mutex_);
    return {{"status", "ok"}, {"model_loaded", model_ != nullptr}, {"sessions", sessions_.size()}};
  }

  /// Copies of every session log, in id order (shutdown dumps).
  std::vector<SessionLog> snapshot() const {
    std::vector<std::shared_ptr<Entry>> entries;
    {
      std::shared_lock lock(sessions_mutex_);
      for (const auto& [id, e] : sessions_) entries.push_back(e);
    }
    std::vector<SessionLog> out;
    for (const auto& e : entries) {
      std::lock_guard lock(e->mutex);
      out.push_back(e->machine.log());
    }
    return out;
  }

  static nlohmann::json level_view(const SessionMachine& m) {
    const LevelRecord& rec = m.current();
    return {{"phase", to_string(rec.phase)},
            {"index", rec.index},
            {"attempts_used", static_cast<int>(rec.attempts.size())},
            {"attempts_cap", m.log().protocol.attempts_cap},
            {"closed", rec.closed},
            {"completed", rec.completed},
            {"descriptor", rec.descriptor}};
  }

  static nlohmann::json state_view(const SessionMachine& m) {
    const auto& log = m.log();
    const LevelRecord& rec = m.current();
    return {{"session_id", log.session_id},
            {"condition", to_string(log.condition)},
            {"phase", to_string(m.phase())},
            {"training_levels", log.protocol.training_levels},
            {"training_levels_done", log.training_level_count()},
            {"level_open", m.level_open()},
            {"ability_projection",
             rec.ability_projection ? nlohmann::json(*rec.ability_projection) : nlohmann::json(nullptr)}};
  }

 private:
  struct Entry {
    explicit Entry(SessionMachine m) : machine(std::move(m)) {}
    mutable std::mutex mutex;  // one mutator per session
    SessionMachine machine;
  };

  std::string make_id(std::uint64_t n) const {
    std::ostringstream ss;
    ss << std::hex;
    ss.width(16);
    ss.fill('0');
    ss << derive_seed(config_.seed, 0x1d, n);
    // The counter suffix keeps ids unique even if two hashes collide.
    ss << '-' << n;
    return ss.str();
  }

  std::shared_ptr<Entry> find(const std::string& id) const {
    std::shared_lock lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::kNotFound, "no session '" + id + "'");
    return it->second;
  }

  std::shared_ptr<const PermModel> model_;
  ServiceConfig config_;
  std::atomic<std::uint64_t> counter_{0};
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

}  // namespace perm

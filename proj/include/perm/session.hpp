#pragma once

// The teaching protocol: a fixed trial level, up to N adaptive training
// levels, then a handcrafted test level; each level closes on the goal or
// when the attempt cap is reached. Shared by the simulated pipeline and the
// HTTP service so both obey the same caps and transitions.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "perm/corpus.hpp"
#include "perm/error.hpp"
#include "perm/jumper.hpp"
#include "perm/model.hpp"
#include "perm/random.hpp"
#include "perm/students.hpp"

namespace perm {

enum class Condition { kPerm, kRandom, kNone };

inline const char* to_string(Condition c) {
  switch (c) {
    case Condition::kPerm: return "perm";
    case Condition::kRandom: return "random";
    case Condition::kNone: return "none";
  }
  return "?";
}

inline Condition parse_condition(std::string_view s) {
  if (s == "perm") return Condition::kPerm;
  if (s == "random") return Condition::kRandom;
  if (s == "none") return Condition::kNone;
  throw Error(ErrorCode::kInvalidArgument, "condition must be perm, random or none, got '" + std::string(s) + "'");
}

enum class Phase { kTrial, kTraining, kTest, kDone };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::kTrial: return "trial";
    case Phase::kTraining: return "training";
    case Phase::kTest: return "test";
    case Phase::kDone: return "done";
  }
  return "?";
}

inline Phase parse_phase(std::string_view s) {
  if (s == "trial") return Phase::kTrial;
  if (s == "training") return Phase::kTraining;
  if (s == "test") return Phase::kTest;
  if (s == "done") return Phase::kDone;
  throw Error(ErrorCode::kFormat, "unknown phase '" + std::string(s) + "'");
}

struct ProtocolConfig {
  int training_levels = 10;
  int attempts_cap = 15;

  void validate() const {
    if (training_levels <= 0 || attempts_cap <= 0) {
      throw Error(ErrorCode::kInvalidArgument, "training_levels and attempts_cap must be positive");
    }
  }
};

// ---- fixture levels -------------------------------------------------------

namespace detail {

// Heights as digits 0..3 (-> -1..2); 'x' marks a spike.
inline Level level_from_strings(std::string_view heights, std::string_view spikes, std::uint64_t seed) {
  Level level;
  level.seed = seed;
  for (int i = 0; i < kLevelLength; ++i) {
    level.tiles[i].height = kTileHeights[static_cast<std::size_t>(heights[i] - '0')];
    level.tiles[i].spiked = spikes[i] == 'x';
  }
  return level;
}

}  // namespace detail

/// Flat, spike-free familiarization level.
inline Level trial_level() { return Level{}; }

/// Handcrafted final test: six spiked gaps, step-ups and drops. Never
/// produced by the generator, identical for every condition.
inline Level test_fixture_level() {
  return detail::level_from_strings("000011110001122221110000111222211100001112211000",
                                    "......x.........x....x.......x.......x....x.....", 0);
}

// ---- log ------------------------------------------------------------------

struct AttemptRecord {
  EpisodeResult result;
  std::int64_t duration_ms = 0;
  std::optional<std::uint64_t> seed;          // rng seed of a simulated attempt
  std::optional<std::vector<Action>> actions;  // client-supplied trajectory

  bool operator==(const AttemptRecord&) const = default;
};

struct LevelRecord {
  Phase phase = Phase::kTrial;
  int index = 0;  // 0 trial, 1..N training, N+1 test
  std::optional<LevelParams> requested;  // absent for fixture levels
  std::optional<LevelParams> params;     // after the solvability guard
  std::uint64_t seed = 0;
  nlohmann::json descriptor;
  std::optional<LatentPosterior> ability;  // inferred when the level was assigned
  std::optional<double> ability_projection;
  std::vector<AttemptRecord> attempts;
  bool closed = false;
  bool completed = false;
  std::optional<double> response;  // normalized best-attempt reward, once closed

  double best_raw_reward() const {
    double best = 0.0;
    for (const auto& a : attempts) best = std::max(best, a.result.raw_reward);
    return best;
  }
};

struct SessionLog {
  std::string session_id;
  std::string display_name;
  Condition condition = Condition::kPerm;
  std::uint64_t seed = 0;
  ProtocolConfig protocol;
  std::vector<LevelRecord> levels;

  int training_level_count() const {
    int n = 0;
    for (const auto& l : levels) n += l.phase == Phase::kTraining;
    return n;
  }

  const LevelRecord* test() const {
    for (const auto& l : levels) {
      if (l.phase == Phase::kTest) return &l;
    }
    return nullptr;
  }
};

inline void to_json(nlohmann::json& j, const LatentPosterior& p) {
  j = nlohmann::json{{"mean", std::vector<double>(p.mean.data(), p.mean.data() + p.mean.size())},
                     {"log_var", std::vector<double>(p.log_var.data(), p.log_var.data() + p.log_var.size())}};
}

inline void from_json(const nlohmann::json& j, LatentPosterior& p) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto v = j.at("log_var").get<std::vector<double>>();
  if (m.size() != v.size()) throw Error(ErrorCode::kFormat, "posterior mean/log_var lengths differ");
  p.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  p.log_var = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline void to_json(nlohmann::json& j, const AttemptRecord& a) {
  j = nlohmann::json{{"result", a.result}, {"duration_ms", a.duration_ms}};
  if (a.seed) j["seed"] = std::to_string(*a.seed);
  if (a.actions) {
    auto arr = nlohmann::json::array();
    for (Action x : *a.actions) arr.push_back(to_string(x));
    j["actions"] = std::move(arr);
  }
}

inline std::vector<Action> parse_actions(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::kInvalidArgument, "actions must be an array");
  std::vector<Action> out;
  out.reserve(j.size());
  for (const auto& x : j) {
    const auto a = x.is_string() ? parse_action(x.get<std::string>()) : std::nullopt;
    if (!a) throw Error(ErrorCode::kInvalidArgument, "actions must be \"walk\" or \"jump\"");
    out.push_back(*a);
  }
  return out;
}

inline void from_json(const nlohmann::json& j, AttemptRecord& a) {
  j.at("result").get_to(a.result);
  j.at("duration_ms").get_to(a.duration_ms);
  a.seed.reset();
  a.actions.reset();
  if (j.contains("seed")) a.seed = std::stoull(j.at("seed").get<std::string>());
  if (j.contains("actions")) a.actions = parse_actions(j.at("actions"));
}

inline void to_json(nlohmann::json& j, const LevelRecord& l) {
  j = nlohmann::json{{"phase", to_string(l.phase)},
                     {"index", l.index},
                     {"seed", std::to_string(l.seed)},
                     {"descriptor", l.descriptor},
                     {"attempts", l.attempts},
                     {"attempts_used", l.attempts.size()},
                     {"closed", l.closed},
                     {"completed", l.completed}};
  j["requested"] = l.requested ? nlohmann::json(*l.requested) : nlohmann::json(nullptr);
  j["params"] = l.params ? nlohmann::json(*l.params) : nlohmann::json(nullptr);
  j["ability"] = l.ability ? nlohmann::json(*l.ability) : nlohmann::json(nullptr);
  j["ability_projection"] = l.ability_projection ? nlohmann::json(*l.ability_projection) : nlohmann::json(nullptr);
  j["response"] = l.response ? nlohmann::json(*l.response) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, LevelRecord& l) {
  l.phase = parse_phase(j.at("phase").get<std::string>());
  j.at("index").get_to(l.index);
  l.seed = std::stoull(j.at("seed").get<std::string>());
  l.descriptor = j.at("descriptor");
  j.at("attempts").get_to(l.attempts);
  j.at("closed").get_to(l.closed);
  j.at("completed").get_to(l.completed);
  auto opt = [&](const char* key, auto& out) {
    using T = typename std::decay_t<decltype(out)>::value_type;
    out.reset();
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
  };
  opt("requested", l.requested);
  opt("params", l.params);
  opt("ability", l.ability);
  opt("ability_projection", l.ability_projection);
  opt("response", l.response);
}

inline void to_json(nlohmann::json& j, const SessionLog& s) {
  j = nlohmann::json{{"session_id", s.session_id},
                     {"display_name", s.display_name},
                     {"condition", to_string(s.condition)},
                     {"seed", std::to_string(s.seed)},
                     {"protocol", {{"training_levels", s.protocol.training_levels},
                                   {"attempts_cap", s.protocol.attempts_cap}}},
                     {"levels", s.levels}};
}

inline void from_json(const nlohmann::json& j, SessionLog& s) {
  j.at("session_id").get_to(s.session_id);
  j.at("display_name").get_to(s.display_name);
  s.condition = parse_condition(j.at("condition").get<std::string>());
  s.seed = std::stoull(j.at("seed").get<std::string>());
  j.at("protocol").at("training_levels").get_to(s.protocol.training_levels);
  j.at("protocol").at("attempts_cap").get_to(s.protocol.attempts_cap);
  j.at("levels").get_to(s.levels);
}

// ---- attempt reports ------------------------------------------------------

struct AttemptReport {
  bool reached_goal = false;
  int max_tile = 0;
  int steps = 0;
  std::int64_t duration_ms = 0;
  std::optional<double> raw_reward;  // client's claim, checked against ours
  std::optional<std::vector<Action>> actions;
  std::optional<std::uint64_t> seed;
};

inline constexpr double kRewardTolerance = 1e-9;

/// Runs exactly the given actions (no padding); the attempt ends early on a
/// spike or the goal.
inline EpisodeResult replay_exact(const Level& level, const std::vector<Action>& actions) {
  std::size_t next = 0;
  return simulate_episode(level, [&](const Level&, int) { return actions[next++]; },
                          static_cast<int>(actions.size()));
}

/// Recomputes the outcome of a reported attempt on `level`. Malformed reports
/// are kInvalidArgument; outcomes the level cannot produce are kRejected.
inline EpisodeResult verify_report(const Level& level, const AttemptReport& r) {
  if (r.max_tile < 0 || r.max_tile > kGoalTile || r.steps < 0 || r.steps > kDefaultMaxSteps ||
      r.duration_ms < 0) {
    throw Error(ErrorCode::kInvalidArgument, "attempt fields out of range");
  }
  const EpisodeResult ours = make_result(r.reached_goal, r.max_tile, r.steps);
  if (r.reached_goal != (r.max_tile == kGoalTile)) {
    throw Error(ErrorCode::kRejected, "reached_goal must coincide with max_tile == 47");
  }
  if (!reachable_tiles(level)[r.max_tile]) {
    throw Error(ErrorCode::kRejected, "tile " + std::to_string(r.max_tile) + " is not reachable on this level");
  }
  if (r.steps < (r.max_tile + 1) / 2) {
    throw Error(ErrorCode::kRejected, "too few steps to reach tile " + std::to_string(r.max_tile));
  }
  if (r.raw_reward && !(std::abs(*r.raw_reward - ours.raw_reward) <= kRewardTolerance)) {
    throw Error(ErrorCode::kRejected, "reported reward disagrees with server recomputation");
  }
  if (r.actions) {
    if (static_cast<int>(r.actions->size()) != r.steps) {
      throw Error(ErrorCode::kRejected, "action count differs from reported steps");
    }
    if (replay_exact(level, *r.actions) != ours) {
      throw Error(ErrorCode::kRejected, "trajectory replay disagrees with reported outcome");
    }
  }
  return ours;
}

// ---- state machine --------------------------------------------------------

class SessionMachine {
 public:
  /// `model` may be null for random/none sessions; when present, abilities
  /// are logged for every condition.
  SessionMachine(Condition condition, std::shared_ptr<const PermModel> model, std::uint64_t seed,
                 ProtocolConfig protocol = {}, std::string id = {}, std::string display_name = {})
      : model_(std::move(model)) {
    protocol.validate();
    if (condition == Condition::kPerm && (!model_ || !model_->trained())) {
      throw Error(ErrorCode::kNotTrained, "perm condition needs a trained model");
    }
    log_.session_id = std::move(id);
    log_.display_name = std::move(display_name);
    log_.condition = condition;
    log_.seed = seed;
    log_.protocol = protocol;
    push_fixture(Phase::kTrial, 0, trial_level());
  }

  Phase phase() const { return phase_; }
  const SessionLog& log() const { return log_; }
  Condition condition() const { return log_.condition; }
  const LevelRecord& current() const { return log_.levels.back(); }
  const Level& current_level() const { return level_; }
  bool level_open() const { return phase_ != Phase::kDone && !current().closed; }
  int attempts_used() const { return static_cast<int>(current().attempts.size()); }

  /// Records one attempt on the open level; closes it on the goal or the cap.
  const LevelRecord& submit_attempt(const AttemptReport& report) {
    if (phase_ == Phase::kDone) throw Error(ErrorCode::kState, "session is finished");
    if (current().closed) throw Error(ErrorCode::kState, "level is closed; request the next level");
    const EpisodeResult result = verify_report(level_, report);
    LevelRecord& rec = log_.levels.back();
    rec.attempts.push_back({result, report.duration_ms, report.seed, report.actions});
    if (result.reached_goal || static_cast<int>(rec.attempts.size()) >= log_.protocol.attempts_cap) {
      rec.closed = true;
      rec.completed = result.reached_goal;
      if (model_) rec.response = normalize(rec.best_raw_reward(), model_->normalizer());
    }
    return rec;
  }

  /// Advances past a closed level. An untouched open level is returned as-is,
  /// so repeated calls are idempotent. Returns nullptr once done.
  const LevelRecord* next_level() {
    if (phase_ == Phase::kDone) return nullptr;
    if (!current().closed) {
      if (current().attempts.empty()) return &current();
      throw Error(ErrorCode::kState, "current level is still open");
    }
    const int trained = log_.training_level_count();
    switch (phase_) {
      case Phase::kTrial:
        if (log_.condition == Condition::kNone) {
          enter_test();
        } else {
          push_training(1);
        }
        break;
      case Phase::kTraining:
        if (trained < log_.protocol.training_levels) {
          push_training(trained + 1);
        } else {
          enter_test();
        }
        break;
      case Phase::kTest:
        phase_ = Phase::kDone;
        return nullptr;
      case Phase::kDone:
        break;
    }
    return &current();
  }

  /// Ability from the last K closed training levels (prior when none).
  std::optional<LatentPosterior> current_ability() const {
    if (!model_) return std::nullopt;
    std::vector<ResponseSample> history;
    for (const auto& l : log_.levels) {
      if (l.phase == Phase::kTraining && l.closed && l.params && l.response) {
        history.push_back({*l.params, *l.response});
      }
    }
    return model_->infer_ability(history);
  }

 private:
  void stamp_ability(LevelRecord& rec) const {
    rec.ability = current_ability();
    if (rec.ability) rec.ability_projection = model_->project(rec.ability->mean);
  }

  void push_fixture(Phase phase, int index, const Level& level) {
    LevelRecord rec;
    rec.phase = phase;
    rec.index = index;
    rec.seed = level.seed;
    rec.descriptor = render_descriptor(level);
    stamp_ability(rec);
    phase_ = phase;
    level_ = level;
    log_.levels.push_back(std::move(rec));
  }

  void enter_test() { push_fixture(Phase::kTest, log_.protocol.training_levels + 1, test_fixture_level()); }

  void push_training(int index) {
    LevelRecord rec;
    rec.phase = Phase::kTraining;
    rec.index = index;
    stamp_ability(rec);
    Rng rng(derive_seed(log_.seed, static_cast<std::uint64_t>(index), 0x1a3bda));
    LevelParams requested;
    if (log_.condition == Condition::kPerm) {
      requested = model_->generate_next_level_params(*rec.ability, rng, GenerationMode::kMean);
    } else {
      requested = random_curriculum_next(rng);
    }
    const auto guarded = guarded_level(requested, rng.next_u64());
    rec.requested = requested;
    rec.params = guarded.params;
    rec.seed = guarded.level.seed;
    rec.descriptor = render_descriptor(guarded.level);
    phase_ = Phase::kTraining;
    level_ = guarded.level;
    log_.levels.push_back(std::move(rec));
  }

  std::shared_ptr<const PermModel> model_;
  SessionLog log_;
  Phase phase_ = Phase::kTrial;
  Level level_;
};

// ---- simulated sessions and replay ----------------------------------------

/// Seed of attempt `attempt` on the level with log position `level_pos`.
inline std::uint64_t attempt_seed(std::uint64_t session_seed, std::size_t level_pos, int attempt) {
  return derive_seed(session_seed, 0xa77e, static_cast<std::uint64_t>(level_pos),
                     static_cast<std::uint64_t>(attempt));
}

/// Drives a machine to completion with a simulated student. Learning
/// students update on trial and training levels but not on the test.
inline void run_simulated_session(SessionMachine& machine, Student& student) {
  while (machine.phase() != Phase::kDone) {
    while (machine.level_open()) {
      const std::size_t pos = machine.log().levels.size() - 1;
      const std::uint64_t seed = attempt_seed(machine.log().seed, pos, machine.attempts_used());
      Rng rng(seed);
      const auto ep = student.attempt(machine.current_level(), rng, machine.phase() != Phase::kTest);
      AttemptReport report;
      report.reached_goal = ep.result.reached_goal;
      report.max_tile = ep.result.max_tile;
      report.steps = ep.result.steps;
      report.raw_reward = ep.result.raw_reward;
      report.seed = seed;
      machine.submit_attempt(report);
    }
    machine.next_level();
  }
}

struct ReplayCheck {
  bool ok = true;
  std::size_t levels_checked = 0;
  std::size_t attempts_replayed = 0;
  std::string first_mismatch;

  void fail(const std::string& what) {
    if (ok) first_mismatch = what;
    ok = false;
  }
};

/// Rebuilds every level from its recorded parameters and seed (or fixture)
/// and re-runs attempts: from recorded actions, or from recorded seeds with
/// `student` (a fresh instance equivalent to the one that produced the log).
inline ReplayCheck replay_session(const SessionLog& log, Student* student) {
  ReplayCheck check;
  for (std::size_t i = 0; i < log.levels.size(); ++i) {
    const auto& rec = log.levels[i];
    const std::string where = "level " + std::to_string(i);
    Level level;
    if (rec.phase == Phase::kTrial) {
      level = trial_level();
    } else if (rec.phase == Phase::kTest) {
      level = test_fixture_level();
    } else if (rec.params) {
      level = generate_level(*rec.params, rec.seed);
    } else {
      check.fail(where + ": training level without parameters");
      continue;
    }
    ++check.levels_checked;
    if (render_descriptor(level) != rec.descriptor) check.fail(where + ": descriptor differs");
    if (static_cast<int>(rec.attempts.size()) > log.protocol.attempts_cap) check.fail(where + ": attempts over cap");
    for (std::size_t k = 0; k < rec.attempts.size(); ++k) {
      const auto& a = rec.attempts[k];
      std::optional<EpisodeResult> again;
      if (a.actions) {
        again = replay_exact(level, *a.actions);
      } else if (a.seed && student) {
        Rng rng(*a.seed);
        again = student->attempt(level, rng, rec.phase != Phase::kTest).result;
      }
      if (!again) continue;
      ++check.attempts_replayed;
      if (*again != a.result) check.fail(where + " attempt " + std::to_string(k) + ": result differs");
    }
  }
  return check;
}

}  // namespace perm

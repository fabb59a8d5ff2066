#pragma once

// Students that attempt Jumper levels through the public simulator surface,
// plus the domain-randomization curriculum.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "perm/irt.hpp"
#include "perm/jumper.hpp"
#include "perm/random.hpp"

namespace perm {

/// Anything that can play an attempt. `learn` is false during evaluation.
class Student {
 public:
  virtual ~Student() = default;
  virtual TracedEpisode attempt(const Level& level, Rng& rng, bool learn) = 0;
  virtual std::string describe() const = 0;
};

/// Per-maneuver failure law for scripted students. A jump succeeds with
/// probability Phi(skill - hazard); walks never fail.
struct HazardModel {
  double spike_weight = 1.5;
  double height_weight = 0.5;

  double hazard(const Level& level, int from) const {
    const bool spiked_gap = level.tiles[from + 1].spiked;
    const int gain = level.tiles[from + 2].height - level.tiles[from].height;
    return spike_weight * (spiked_gap ? 1.0 : 0.0) + height_weight * gain;
  }

  double success_probability(double skill, const Level& level, int from) const {
    return std_normal_cdf(skill - hazard(level, from));
  }
};

struct ScriptedStudentSpec {
  double skill = 0.0;
  HazardModel hazards{};
};

/// Follows the fewest-jump route (to the goal, or to the deepest safe tile
/// when the level is unsolvable); each jump may fail per HazardModel, which
/// ends the attempt.
inline TracedEpisode scripted_attempt_traced(const Level& level, const ScriptedStudentSpec& student,
                                             Rng& rng) {
  if (!std::isfinite(student.skill)) throw Error(ErrorCode::kDomain, "skill must be finite");
  const auto solved = solve(level);
  const Route route = solved ? *solved : deepest_safe_route(level);

  TracedEpisode out;
  int pos = 0;
  int steps = 0;
  for (Action a : route.actions) {
    ++steps;
    if (a == Action::kJump) {
      const double p = student.hazards.success_probability(student.skill, level, pos);
      if (!rng.bernoulli(p)) {
        // A failed jump degrades to a walk: onto the next tile when that is a
        // legal move (typically the spike), otherwise stuck at the wall.
        const int fell = MoveRules::allowed(level, pos, Action::kWalk) ? pos + 1 : pos;
        out.trace.push_back({pos, a, static_cast<double>(fell - pos) / kGoalTile});
        out.result = make_result(false, fell, steps);
        return out;
      }
    }
    const int next = pos + MoveRules::distance(a);
    out.trace.push_back({pos, a, static_cast<double>(next - pos) / kGoalTile});
    pos = next;
  }
  const bool goal = pos == kGoalTile;
  if (goal && !out.trace.empty()) out.trace.back().reward += 1.0;
  out.result = make_result(goal, pos, steps);
  return out;
}

inline EpisodeResult scripted_attempt(const Level& level, const ScriptedStudentSpec& student,
                                      Rng& rng) {
  return scripted_attempt_traced(level, student, rng).result;
}

class ScriptedStudent final : public Student {
 public:
  explicit ScriptedStudent(ScriptedStudentSpec spec) : spec_(spec) {}
  explicit ScriptedStudent(double skill) : spec_{skill, {}} {}

  TracedEpisode attempt(const Level& level, Rng& rng, bool) override {
    return scripted_attempt_traced(level, spec_, rng);
  }

  std::string describe() const override { return "scripted:" + std::to_string(spec_.skill); }

  const ScriptedStudentSpec& spec() const { return spec_; }

 private:
  ScriptedStudentSpec spec_;
};

// ---- tabular learner ------------------------------------------------------

struct LearnerConfig {
  double learning_rate = 0.1;
  double exploration = 0.1;
  double discount = 0.95;
};

/// Key over the next three tiles: relative height (-3..3) and spike flag per
/// tile, or a past-the-goal marker.
inline constexpr int kObservationWindow = 3;
inline constexpr int kTileCodes = 15;
inline constexpr int kObservationCount = kTileCodes * kTileCodes * kTileCodes;

inline int observe(const Level& level, int pos) {
  int key = 0;
  for (int k = 1; k <= kObservationWindow; ++k) {
    int code = kTileCodes - 1;
    if (pos + k <= kGoalTile) {
      const int dh = level.tiles[pos + k].height - level.tiles[pos].height;
      code = (dh + 3) * 2 + (level.tiles[pos + k].spiked ? 1 : 0);
    }
    key = key * kTileCodes + code;
  }
  return key;
}

/// Epsilon-greedy action-preference table updated toward realized discounted
/// returns after every attempt.
class LearningStudent final : public Student {
 public:
  explicit LearningStudent(LearnerConfig config = {})
      : config_(config), table_(kObservationCount) {
    if (!(config_.exploration >= 0.0 && config_.exploration <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "exploration must lie in [0, 1]");
    }
    if (!(config_.learning_rate > 0.0) || !(config_.discount > 0.0 && config_.discount <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "learning_rate and discount must be positive");
    }
    for (auto& row : table_) row = {0.0, 0.0};
  }

  /// Exploration draws come from the caller's rng, so an attempt is a pure
  /// function of (table, level, rng state).
  Action act(int observation, Rng& rng) const {
    if (config_.exploration > 0.0 && rng.uniform() < config_.exploration) {
      return rng.bernoulli(0.5) ? Action::kJump : Action::kWalk;
    }
    const auto& q = table_[observation];
    return q[1] > q[0] ? Action::kJump : Action::kWalk;
  }

  void update(const Level& level, const std::vector<TraceStep>& trace) {
    double ret = 0.0;
    for (auto it = trace.rbegin(); it != trace.rend(); ++it) {
      ret = it->reward + config_.discount * ret;
      double& q = table_[observe(level, it->position)][static_cast<int>(it->action)];
      q += config_.learning_rate * (ret - q);
    }
  }

  TracedEpisode attempt(const Level& level, Rng& rng, bool learn) override {
    auto episode = simulate_episode_traced(
        level, [&](const Level& l, int pos) { return act(observe(l, pos), rng); });
    if (learn) update(level, episode.trace);
    return episode;
  }

  std::string describe() const override { return "learner"; }

  void set_exploration(double e) { config_.exploration = e; }
  const LearnerConfig& config() const { return config_; }
  const std::vector<std::array<double, 2>>& table() const { return table_; }

 private:
  LearnerConfig config_;
  std::vector<std::array<double, 2>> table_;
};

// ---- domain randomization -------------------------------------------------

/// Spike density ~ U[0,1]; heights ~ flat Dirichlet via normalized exponentials.
inline LevelParams random_curriculum_next(Rng& rng) {
  LevelParams p;
  p.spike_density = rng.uniform();
  double sum = 0.0;
  for (double& h : p.height_probs) {
    h = rng.exponential();
    sum += h;
  }
  for (double& h : p.height_probs) h /= sum;
  return p;
}

}  // namespace perm

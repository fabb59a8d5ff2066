#include "perm/students.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace perm {
namespace {

Level flat_level() { return generate_level(LevelParams{0.0, {0.0, 1.0, 0.0, 0.0}}, 1); }

// Solvable level with a spike every eighth tile: six spiked jumps.
Level spiked_course() {
  Level level = flat_level();
  for (int i = 4; i < kGoalTile; i += 8) level.tiles[i].spiked = true;
  return level;
}

TEST(ScriptedAttempt, HighSkillAlmostAlwaysFinishes) {
  const Level level = spiked_course();
  ASSERT_TRUE(is_solvable(level));
  Rng rng(1);
  int goals = 0;
  for (int i = 0; i < 1000; ++i) goals += scripted_attempt(level, {10.0, {}}, rng).reached_goal;
  // Per-jump failure <= 1 - Phi(10 - 2.5), six jumps.
  EXPECT_GT(goals / 1000.0, 0.999);
}

TEST(ScriptedAttempt, VeryLowSkillFailsFirstSpikedJump) {
  Level level = flat_level();
  level.tiles[1].spiked = true;
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto r = scripted_attempt(level, {-10.0, {}}, rng);
    EXPECT_LE(r.max_tile, 1);
    EXPECT_FALSE(r.reached_goal);
  }
}

TEST(ScriptedAttempt, FlatLevelNeedsNoSkill) {
  Rng rng(3);
  for (double skill : {-10.0, -2.0, 0.0, 5.0}) {
    const auto r = scripted_attempt(flat_level(), {skill, {}}, rng);
    EXPECT_TRUE(r.reached_goal);
    EXPECT_EQ(r.steps, 47);
  }
}

TEST(ScriptedAttempt, UnsolvableLevelStopsAtDeepestSafeTile) {
  Level level = flat_level();
  level.tiles[20].spiked = true;
  level.tiles[21].spiked = true;
  Rng rng(4);
  const auto r = scripted_attempt(level, {3.0, {}}, rng);
  EXPECT_FALSE(r.reached_goal);
  EXPECT_EQ(r.max_tile, 19);
}

TEST(ScriptedAttempt, ResultMatchesSimulatorReplayWhenNoJumpFails) {
  Rng rng(5);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Level level = generate_level(LevelParams{0.15, {0.2, 0.4, 0.3, 0.1}}, seed);
    const auto ep = scripted_attempt_traced(level, {50.0, {}}, rng);
    std::vector<Action> actions;
    for (const auto& s : ep.trace) actions.push_back(s.action);
    EXPECT_EQ(replay_actions(level, actions, static_cast<int>(actions.size())), ep.result);
  }
}

TEST(HazardModel, ProbabilityInOpenInterval) {
  Level level = flat_level();
  level.tiles[2].height = 2;
  level.tiles[1].spiked = true;
  const HazardModel h;
  EXPECT_DOUBLE_EQ(h.hazard(level, 0), 1.5 + 1.0);
  for (double s : {-5.0, 0.0, 5.0}) {
    const double p = h.success_probability(s, level, 0);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

std::vector<Level> fixed_level_set(double density, int count, std::uint64_t base) {
  std::vector<Level> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_level(LevelParams{density, {0.15, 0.35, 0.35, 0.15}}, derive_seed(base, i)));
  }
  return out;
}

double mean_reward(const std::vector<Level>& levels, double skill, int trials, std::uint64_t seed) {
  Rng rng(seed);
  double sum = 0.0;
  int n = 0;
  for (int t = 0; t < trials; ++t) {
    for (const Level& level : levels) {
      sum += scripted_attempt(level, {skill, {}}, rng).raw_reward;
      ++n;
    }
  }
  return sum / n;
}

TEST(ScriptedAttempt, MeanRewardNondecreasingInSkill) {
  const auto levels = fixed_level_set(0.2, 10, 77);
  std::vector<double> means;
  for (double skill : {-2.0, -1.0, 0.0, 1.0, 2.0}) means.push_back(mean_reward(levels, skill, 50, 9));
  int decreases = 0;
  for (std::size_t i = 1; i < means.size(); ++i) decreases += means[i] < means[i - 1];
  EXPECT_LE(decreases, 1);
  EXPECT_GT(means.back(), means.front());
}

TEST(ScriptedAttempt, MeanRewardNonincreasingInSpikeDensity) {
  double prev = 3.0;
  for (int k = 1; k <= 9; ++k) {
    const double m = mean_reward(fixed_level_set(0.1 * k, 100, 1234), 0.0, 5, 10 + k);
    EXPECT_LE(m, prev) << "density " << 0.1 * k;
    prev = m;
  }
}

TEST(LearningStudent, GreedyZeroTableWalksFirst) {
  LearningStudent student(LearnerConfig{0.1, 0.0, 0.95});
  const Level level = flat_level();
  Rng rng(1);
  EXPECT_EQ(student.act(observe(level, 0), rng), Action::kWalk);
  EXPECT_EQ(student.act(observe(level, 0), rng), Action::kWalk);
}

TEST(LearningStudent, ObservationEncodesRelativeWindow) {
  Level level = flat_level();
  level.tiles[46].height = 2;
  level.tiles[46].spiked = true;
  EXPECT_NE(observe(level, 44), observe(level, 0));
  EXPECT_EQ(observe(level, 0), observe(level, 10));
  // Past the goal the window saturates to the marker code.
  EXPECT_EQ(observe(level, 47) , kObservationCount - 1);
  EXPECT_LT(observe(level, 20), kObservationCount);
}

TEST(LearningStudent, CompletionImprovesWithPractice) {
  Level level = flat_level();
  for (int i : {5, 13, 22, 30, 38}) level.tiles[i].spiked = true;
  level.tiles[26].height = 2;
  level.tiles[27].height = 2;
  ASSERT_TRUE(is_solvable(level));
  double first = 0.0;
  double last = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    LearningStudent student(LearnerConfig{0.1, 0.1, 0.95});
    Rng rng(seed);
    for (int a = 0; a < 200; ++a) {
      const bool goal = student.attempt(level, rng, true).result.reached_goal;
      if (a < 20) first += goal;
      if (a >= 180) last += goal;
    }
  }
  EXPECT_GE(last, first);
  EXPECT_GT(last, 0.0);
}

TEST(LearningStudent, TableStaysFiniteOverLongTraining) {
  LearningStudent student(LearnerConfig{0.2, 0.2, 0.95});
  Rng rng(3);
  for (int e = 0; e < 10000; ++e) {
    const Level level = generate_level(random_curriculum_next(rng), rng.next_u64());
    student.attempt(level, rng, true);
  }
  for (const auto& row : student.table()) {
    EXPECT_TRUE(std::isfinite(row[0]) && std::isfinite(row[1]));
  }
}

TEST(LearningStudent, DeterministicGivenSeed) {
  auto run = [] {
    LearningStudent student(LearnerConfig{0.1, 0.2, 0.95});
    Rng rng(8);
    std::vector<EpisodeResult> out;
    for (int e = 0; e < 200; ++e) {
      const Level level = generate_level(random_curriculum_next(rng), rng.next_u64());
      out.push_back(student.attempt(level, rng, true).result);
    }
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(LearningStudent, FrozenAttemptDependsOnlyOnRng) {
  LearningStudent student(LearnerConfig{0.1, 0.3, 0.95});
  Rng train_rng(4);
  for (int e = 0; e < 300; ++e) {
    student.attempt(generate_level(random_curriculum_next(train_rng), train_rng.next_u64()), train_rng, true);
  }
  const Level level = generate_level(LevelParams{0.2, {0.25, 0.25, 0.25, 0.25}}, 5);
  Rng a(99), b(99), other(100);
  const auto first = student.attempt(level, a, false).result;
  student.attempt(level, other, false);  // no hidden state advances
  EXPECT_EQ(student.attempt(level, b, false).result, first);
}

TEST(LearningStudent, RejectsBadConfig) {
  EXPECT_THROW(LearningStudent(LearnerConfig{0.1, 1.5, 0.95}), Error);
  EXPECT_THROW(LearningStudent(LearnerConfig{0.0, 0.1, 0.95}), Error);
}

TEST(RandomCurriculum, ValidMomentsAndDeterministic) {
  Rng rng(21);
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto p = random_curriculum_next(rng);
    ASSERT_FALSE(check_level_params(p).has_value());
    sum += p.spike_density;
  }
  EXPECT_NEAR(sum / 10000, 0.5, 0.015);
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(random_curriculum_next(a), random_curriculum_next(b));
}

}  // namespace
}  // namespace perm

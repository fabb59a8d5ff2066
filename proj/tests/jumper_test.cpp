#include "perm/jumper.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <set>

#include "perm/random.hpp"

namespace perm {
namespace {

Level flat_level() { return generate_level(LevelParams{0.0, {0.0, 1.0, 0.0, 0.0}}, 1); }

std::vector<Action> walks(int n) { return std::vector<Action>(n, Action::kWalk); }

// Brute-force oracle: depth-first search over action prefixes, each prefix
// evaluated by replaying it through the simulator.
bool solvable_by_search(const Level& level) {
  std::set<int> seen;
  std::function<bool(std::vector<Action>&)> dfs = [&](std::vector<Action>& prefix) {
    for (Action a : {Action::kWalk, Action::kJump}) {
      prefix.push_back(a);
      const auto r = replay_actions(level, prefix, static_cast<int>(prefix.size()));
      const int before = [&] {
        int pos = 0;
        for (std::size_t i = 0; i + 1 < prefix.size(); ++i) pos += MoveRules::distance(prefix[i]);
        return pos;
      }();
      const int pos = before + MoveRules::distance(a);
      const bool moved = pos <= kGoalTile && r.max_tile == pos;
      if (r.reached_goal) return true;
      if (moved && !level.tiles[pos].spiked && seen.insert(pos).second && dfs(prefix)) return true;
      prefix.pop_back();
    }
    return false;
  };
  std::vector<Action> prefix;
  return dfs(prefix);
}

TEST(GenerateLevel, DegenerateDistributionsGiveFlatSpikeFreeLevel) {
  const Level level = generate_level(LevelParams{0.0, {0.0, 1.0, 0.0, 0.0}}, 7);
  for (const Tile& t : level.tiles) {
    EXPECT_EQ(t.height, 0);
    EXPECT_FALSE(t.spiked);
  }
}

TEST(GenerateLevel, FullDensitySpikesEveryInteriorTile) {
  const Level level = generate_level(LevelParams{1.0, {0.1, 0.2, 0.3, 0.4}}, 7);
  EXPECT_FALSE(level.tiles[0].spiked);
  EXPECT_FALSE(level.tiles[kGoalTile].spiked);
  for (int i = 1; i < kGoalTile; ++i) EXPECT_TRUE(level.tiles[i].spiked) << i;
}

TEST(GenerateLevel, MatchesGoldenFixture) {
  std::ifstream in(std::string(PERM_FIXTURE_DIR) + "/level_half_uniform_seed42.json");
  ASSERT_TRUE(in) << "missing fixture";
  const auto golden = parse_descriptor(nlohmann::json::parse(in));
  const Level level = generate_level(LevelParams{0.5, {0.25, 0.25, 0.25, 0.25}}, 42);
  EXPECT_EQ(level, golden);
}

TEST(GenerateLevel, DeterministicInParamsAndSeed) {
  const LevelParams p{0.3, {0.1, 0.5, 0.3, 0.1}};
  EXPECT_EQ(generate_level(p, 99), generate_level(p, 99));
  EXPECT_NE(generate_level(p, 99), generate_level(p, 100));
}

TEST(GenerateLevel, RejectsInvalidParams) {
  EXPECT_THROW(generate_level(LevelParams{1.5, {0, 1, 0, 0}}, 0), Error);
  EXPECT_THROW(generate_level(LevelParams{-0.1, {0, 1, 0, 0}}, 0), Error);
  EXPECT_THROW(generate_level(LevelParams{0.5, {0.5, 0.5, 0.5, 0}}, 0), Error);
  EXPECT_THROW(generate_level(LevelParams{0.5, {-0.5, 1.0, 0.5, 0}}, 0), Error);
  EXPECT_THROW(generate_level(LevelParams{std::nan(""), {0, 1, 0, 0}}, 0), Error);
}

TEST(GenerateLevel, SpikeAndHeightFrequenciesMatchParameters) {
  const LevelParams p{0.3, {0.1, 0.2, 0.3, 0.4}};
  long spikes = 0;
  long interior = 0;
  std::array<long, 4> heights{};
  long tiles = 0;
  for (std::uint64_t seed = 0; tiles < 10000; ++seed) {
    const Level level = generate_level(p, seed);
    for (int i = 0; i < kLevelLength; ++i) {
      const int h = level.tiles[i].height;
      ++heights[h + 1];
      ++tiles;
      if (i != 0 && i != kGoalTile) {
        ++interior;
        spikes += level.tiles[i].spiked ? 1 : 0;
      }
    }
  }
  const double freq = static_cast<double>(spikes) / interior;
  const double se = std::sqrt(p.spike_density * (1 - p.spike_density) / interior);
  EXPECT_NEAR(freq, p.spike_density, 3 * se);
  for (int k = 0; k < 4; ++k) {
    const double q = p.height_probs[k];
    EXPECT_NEAR(static_cast<double>(heights[k]) / tiles, q, 3 * std::sqrt(q * (1 - q) / tiles)) << k;
  }
}

TEST(SimulateEpisode, AllWalksOnFlatLevelReachGoal) {
  const auto r = simulate_episode(flat_level(), [](const Level&, int) { return Action::kWalk; });
  EXPECT_TRUE(r.reached_goal);
  EXPECT_EQ(r.max_tile, 47);
  EXPECT_EQ(r.steps, 47);
  EXPECT_DOUBLE_EQ(r.raw_reward, 2.0);
}

TEST(SimulateEpisode, WalkingOntoSpikeEndsAttempt) {
  Level level = flat_level();
  level.tiles[1].spiked = true;
  const auto r = simulate_episode(level, [](const Level&, int) { return Action::kWalk; });
  EXPECT_FALSE(r.reached_goal);
  EXPECT_EQ(r.max_tile, 1);
  EXPECT_EQ(r.steps, 1);
}

TEST(SimulateEpisode, JumpClearsSpikedTile) {
  Level level = flat_level();
  level.tiles[5].spiked = true;
  std::vector<Action> plan = walks(4);
  plan.push_back(Action::kJump);
  const auto r = replay_actions(level, plan, 5);
  EXPECT_EQ(r.max_tile, 6);
  EXPECT_EQ(r.steps, 5);
  const auto full = replay_actions(level, plan);
  EXPECT_TRUE(full.reached_goal);
  EXPECT_EQ(full.steps, 46);
}

TEST(SimulateEpisode, IllegalMoveStallsAndCountsAStep) {
  Level level = flat_level();
  for (int i = 1; i < kLevelLength; ++i) level.tiles[i].height = 2;  // +2 wall at tile 1
  const auto r = replay_actions(level, {Action::kWalk, Action::kWalk, Action::kJump}, 3);
  EXPECT_EQ(r.steps, 3);
  EXPECT_EQ(r.max_tile, 2);
  EXPECT_FALSE(r.reached_goal);
  const auto stuck = simulate_episode(level, [](const Level&, int) { return Action::kWalk; });
  EXPECT_EQ(stuck.steps, kDefaultMaxSteps);
  EXPECT_EQ(stuck.max_tile, 0);
}

TEST(SimulateEpisode, JumpPastGoalIsIllegal) {
  const Level level = flat_level();
  std::vector<Action> plan = walks(46);
  plan.push_back(Action::kJump);
  const auto r = replay_actions(level, plan, 47);
  EXPECT_EQ(r.max_tile, 46);
  EXPECT_FALSE(r.reached_goal);
}

TEST(SimulateEpisode, TraceRewardsSumToRawReward) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Level level = generate_level(LevelParams{0.15, {0.2, 0.4, 0.3, 0.1}}, i);
    const auto ep = simulate_episode_traced(level, [&](const Level&, int) {
      return rng.bernoulli(0.3) ? Action::kJump : Action::kWalk;
    });
    double sum = 0.0;
    for (const auto& s : ep.trace) sum += s.reward;
    EXPECT_NEAR(sum, ep.result.raw_reward, 1e-12);
    EXPECT_EQ(ep.trace.size(), static_cast<std::size_t>(ep.result.steps));
    if (ep.result.reached_goal) EXPECT_EQ(ep.result.max_tile, kGoalTile);
  }
}

TEST(RawReward, Formula) {
  EXPECT_DOUBLE_EQ(raw_reward(true, 47), 2.0);
  EXPECT_DOUBLE_EQ(raw_reward(false, 0), 0.0);
  EXPECT_DOUBLE_EQ(raw_reward(false, 23), 23.0 / 47.0);
}

TEST(Solve, FlatLevelIsWalkedEnd2End) {
  const auto route = solve(flat_level());
  ASSERT_TRUE(route.has_value());
  EXPECT_EQ(route->actions, walks(47));
}

TEST(Solve, AllInteriorSpikesIsUnsolvable) {
  const Level level = generate_level(LevelParams{1.0, {0.25, 0.25, 0.25, 0.25}}, 3);
  EXPECT_FALSE(is_solvable(level));
}

TEST(Solve, AdjacentSpikesBlockEveryLocalConfiguration) {
  // Exhaustive over the heights of a 5-tile window around spikes at 21, 22.
  for (int code = 0; code < 4 * 4 * 4 * 4 * 4; ++code) {
    Level level = flat_level();
    int c = code;
    for (int i = 19; i < 24; ++i) {
      level.tiles[i].height = kTileHeights[c % 4];
      c /= 4;
    }
    level.tiles[21].spiked = true;
    level.tiles[22].spiked = true;
    EXPECT_FALSE(is_solvable(level)) << code;
    EXPECT_FALSE(solvable_by_search(level)) << code;
  }
}

TEST(Solve, AgreesWithBruteForceAndWitnessReplays) {
  int solvable = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Level level = generate_level(LevelParams{0.2, {0.2, 0.3, 0.3, 0.2}}, seed);
    const auto route = solve(level);
    ASSERT_EQ(route.has_value(), solvable_by_search(level)) << seed;
    if (!route) continue;
    ++solvable;
    const auto r = replay_actions(level, route->actions);
    EXPECT_TRUE(r.reached_goal) << seed;
    EXPECT_EQ(r.steps, static_cast<int>(route->actions.size()));
  }
  EXPECT_GT(solvable, 10);
}

TEST(Solve, AddingSpikeNeverMakesLevelSolvable) {
  Rng rng(17);
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Level level = generate_level(LevelParams{0.25, {0.2, 0.3, 0.3, 0.2}}, seed);
    const bool before = is_solvable(level);
    level.tiles[1 + rng.below(kGoalTile - 1)].spiked = true;
    if (!before) EXPECT_FALSE(is_solvable(level)) << seed;
  }
}

TEST(Solve, DeepestSafeRouteStopsBeforeBlock) {
  Level level = flat_level();
  level.tiles[10].spiked = true;
  level.tiles[11].spiked = true;
  const Route r = deepest_safe_route(level);
  EXPECT_EQ(r.target, 9);
  EXPECT_EQ(replay_actions(level, r.actions, static_cast<int>(r.actions.size())).max_tile, 9);
}

TEST(Descriptor, RoundTripsAndHasFixedShape) {
  const Level level = generate_level(LevelParams{0.3, {0.1, 0.2, 0.3, 0.4}}, 0xfeedfacecafebeefULL);
  const auto j = render_descriptor(level);
  EXPECT_EQ(j.at("tiles").size(), 48u);
  EXPECT_EQ(j.at("goal").get<int>(), 47);
  EXPECT_EQ(j.at("start").get<int>(), 0);
  EXPECT_EQ(parse_descriptor(nlohmann::json::parse(j.dump())), level);
}

TEST(Descriptor, RejectsMalformed) {
  auto j = render_descriptor(flat_level());
  auto short_tiles = j;
  short_tiles["tiles"].erase(0);
  EXPECT_THROW(parse_descriptor(short_tiles), Error);
  auto bad_height = j;
  bad_height["tiles"][3]["height"] = 5;
  EXPECT_THROW(parse_descriptor(bad_height), Error);
  auto spiked_goal = j;
  spiked_goal["tiles"][47]["spiked"] = true;
  EXPECT_THROW(parse_descriptor(spiked_goal), Error);
  EXPECT_THROW(parse_descriptor(nlohmann::json::object()), Error);
}

}  // namespace
}  // namespace perm

#pragma once

// Deterministic tile-based Jumper environment: level generation from level
// parameters, episode simulation under MoveRules, rewards, and solvability.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "perm/error.hpp"
#include "perm/random.hpp"

namespace perm {

inline constexpr int kLevelLength = 48;
inline constexpr int kGoalTile = kLevelLength - 1;
inline constexpr std::array<int, 4> kTileHeights = {-1, 0, 1, 2};
inline constexpr int kDefaultMaxSteps = 200;

/// Generator parameters: per-tile spike probability and a categorical
/// distribution over the four tile heights.
struct LevelParams {
  double spike_density = 0.0;
  std::array<double, 4> height_probs = {0.0, 1.0, 0.0, 0.0};

  bool operator==(const LevelParams&) const = default;
};

inline constexpr double kSimplexTolerance = 1e-9;

inline std::optional<std::string> check_level_params(const LevelParams& p) {
  if (!std::isfinite(p.spike_density) || p.spike_density < 0.0 || p.spike_density > 1.0) {
    return "spike_density must lie in [0, 1]";
  }
  double sum = 0.0;
  for (double h : p.height_probs) {
    if (!std::isfinite(h) || h < 0.0) return "height_probs entries must be finite and >= 0";
    sum += h;
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance) return "height_probs must sum to 1";
  return std::nullopt;
}

inline void validate(const LevelParams& p) {
  if (auto err = check_level_params(p)) throw Error(ErrorCode::kInvalidArgument, *err);
}

struct Tile {
  int height = 0;
  bool spiked = false;

  bool operator==(const Tile&) const = default;
};

struct Level {
  std::array<Tile, kLevelLength> tiles{};
  std::uint64_t seed = 0;

  static constexpr int start() { return 0; }
  static constexpr int goal() { return kGoalTile; }

  bool operator==(const Level&) const = default;
};

inline Level generate_level(const LevelParams& params, std::uint64_t seed) {
  validate(params);
  Rng rng(seed);
  Level level;
  level.seed = seed;
  for (int i = 0; i < kLevelLength; ++i) {
    // Both draws happen for every tile so the stream layout does not depend
    // on the endpoint rule.
    const auto h = rng.categorical(params.height_probs);
    const bool spike = rng.bernoulli(params.spike_density);
    level.tiles[i].height = kTileHeights[h];
    level.tiles[i].spiked = spike && i != 0 && i != kGoalTile;
  }
  return level;
}

enum class Action { kWalk = 0, kJump = 1 };

inline const char* to_string(Action a) { return a == Action::kWalk ? "walk" : "jump"; }

inline std::optional<Action> parse_action(std::string_view s) {
  if (s == "walk") return Action::kWalk;
  if (s == "jump") return Action::kJump;
  return std::nullopt;
}

/// Walk advances one tile when the height gain is at most +1; jump advances
/// two tiles, ignoring the tile in between, when the landing gain is at most
/// +2. Landing on a spike ends the attempt. Illegal moves stall in place.
struct MoveRules {
  static constexpr int kWalkMaxGain = 1;
  static constexpr int kJumpMaxGain = 2;

  static constexpr int distance(Action a) { return a == Action::kWalk ? 1 : 2; }

  static bool allowed(const Level& level, int from, Action a) {
    const int to = from + distance(a);
    if (from < 0 || to > kGoalTile) return false;
    const int gain = level.tiles[to].height - level.tiles[from].height;
    return gain <= (a == Action::kWalk ? kWalkMaxGain : kJumpMaxGain);
  }

  // Legal and does not land on a spike.
  static bool safe(const Level& level, int from, Action a) {
    return allowed(level, from, a) && !level.tiles[from + distance(a)].spiked;
  }
};

struct EpisodeResult {
  bool reached_goal = false;
  int max_tile = 0;
  int steps = 0;
  double raw_reward = 0.0;

  bool operator==(const EpisodeResult&) const = default;
};

/// Depth fraction plus a completion bonus; range [0, 2].
inline double raw_reward(bool reached_goal, int max_tile) {
  return static_cast<double>(max_tile) / kGoalTile + (reached_goal ? 1.0 : 0.0);
}

inline double raw_reward(const EpisodeResult& r) { return raw_reward(r.reached_goal, r.max_tile); }

inline EpisodeResult make_result(bool reached_goal, int max_tile, int steps) {
  return EpisodeResult{reached_goal, max_tile, steps, raw_reward(reached_goal, max_tile)};
}

struct TraceStep {
  int position = 0;  // before the action
  Action action = Action::kWalk;
  double reward = 0.0;
};

struct TracedEpisode {
  EpisodeResult result;
  std::vector<TraceStep> trace;
};

/// Runs one attempt from tile 0. `source(level, position)` yields the next
/// action. Per-step rewards telescope to raw_reward(result).
template <typename ActionSource>
TracedEpisode simulate_episode_traced(const Level& level, ActionSource&& source,
                                      int max_steps = kDefaultMaxSteps) {
  TracedEpisode out;
  int pos = 0;
  int max_tile = 0;
  int steps = 0;
  bool goal = false;
  while (steps < max_steps) {
    const Action a = source(level, pos);
    ++steps;
    TraceStep step{pos, a, 0.0};
    if (!MoveRules::allowed(level, pos, a)) {
      out.trace.push_back(step);
      continue;
    }
    pos += MoveRules::distance(a);
    if (pos > max_tile) {
      step.reward = static_cast<double>(pos - max_tile) / kGoalTile;
      max_tile = pos;
    }
    if (level.tiles[pos].spiked) {
      out.trace.push_back(step);
      break;
    }
    if (pos == kGoalTile) {
      goal = true;
      step.reward += 1.0;
      out.trace.push_back(step);
      break;
    }
    out.trace.push_back(step);
  }
  out.result = make_result(goal, max_tile, steps);
  return out;
}

template <typename ActionSource>
EpisodeResult simulate_episode(const Level& level, ActionSource&& source,
                               int max_steps = kDefaultMaxSteps) {
  return simulate_episode_traced(level, std::forward<ActionSource>(source), max_steps).result;
}

/// Replays a fixed action list; once exhausted the source keeps walking.
inline EpisodeResult replay_actions(const Level& level, const std::vector<Action>& actions,
                                    int max_steps = kDefaultMaxSteps) {
  std::size_t next = 0;
  return simulate_episode(
      level,
      [&](const Level&, int) { return next < actions.size() ? actions[next++] : Action::kWalk; },
      max_steps);
}

struct Route {
  std::vector<Action> actions;
  int target = 0;

  int jumps() const {
    return static_cast<int>(std::count(actions.begin(), actions.end(), Action::kJump));
  }
};

namespace detail {

struct Reach {
  static constexpr int kUnreached = -1;
  std::array<int, kLevelLength> jumps;  // fewest jumps to stand on tile i safely
  std::array<Action, kLevelLength> via;

  explicit Reach(const Level& level) {
    jumps.fill(kUnreached);
    jumps[0] = 0;
    for (int i = 0; i < kLevelLength; ++i) {
      if (jumps[i] == kUnreached) continue;
      for (Action a : {Action::kWalk, Action::kJump}) {
        if (!MoveRules::safe(level, i, a)) continue;
        const int to = i + MoveRules::distance(a);
        const int cost = jumps[i] + (a == Action::kJump ? 1 : 0);
        // Equal-cost arrivals prefer the walk.
        if (jumps[to] == kUnreached || cost < jumps[to] ||
            (cost == jumps[to] && a == Action::kWalk)) {
          jumps[to] = cost;
          via[to] = a;
        }
      }
    }
  }

  bool reached(int tile) const { return jumps[tile] != kUnreached; }

  Route route_to(int tile) const {
    Route r;
    r.target = tile;
    for (int t = tile; t > 0;) {
      r.actions.push_back(via[t]);
      t -= MoveRules::distance(via[t]);
    }
    std::reverse(r.actions.begin(), r.actions.end());
    return r;
  }
};

}  // namespace detail

/// Reachability over the forward move graph. The witness uses the fewest
/// jumps (jumps are the only risky maneuver), so a flat spike-free level is
/// solved by 47 walks.
inline std::optional<Route> solve(const Level& level) {
  detail::Reach reach(level);
  if (!reach.reached(kGoalTile)) return std::nullopt;
  return reach.route_to(kGoalTile);
}

inline bool is_solvable(const Level& level) { return solve(level).has_value(); }

/// Fewest-jump route to the deepest tile that can be stood on safely.
inline Route deepest_safe_route(const Level& level) {
  detail::Reach reach(level);
  int deepest = 0;
  for (int i = 0; i < kLevelLength; ++i) {
    if (reach.reached(i)) deepest = i;
  }
  return reach.route_to(deepest);
}

/// Tiles a player can occupy at some point of an attempt, including the
/// spiked tile that ends it. Used to validate reported outcomes.
inline std::array<bool, kLevelLength> reachable_tiles(const Level& level) {
  detail::Reach reach(level);
  std::array<bool, kLevelLength> out{};
  for (int i = 0; i < kLevelLength; ++i) {
    if (!reach.reached(i)) continue;
    out[i] = true;
    for (Action a : {Action::kWalk, Action::kJump}) {
      if (MoveRules::allowed(level, i, a)) out[i + MoveRules::distance(a)] = true;
    }
  }
  return out;
}

// ---- JSON ----------------------------------------------------------------

inline void to_json(nlohmann::json& j, const LevelParams& p) {
  j = nlohmann::json{{"spike_density", p.spike_density}, {"height_probs", p.height_probs}};
}

inline void from_json(const nlohmann::json& j, LevelParams& p) {
  j.at("spike_density").get_to(p.spike_density);
  j.at("height_probs").get_to(p.height_probs);
}

inline void to_json(nlohmann::json& j, const EpisodeResult& r) {
  j = nlohmann::json{{"reached_goal", r.reached_goal},
                     {"max_tile", r.max_tile},
                     {"steps", r.steps},
                     {"raw_reward", r.raw_reward}};
}

inline void from_json(const nlohmann::json& j, EpisodeResult& r) {
  j.at("reached_goal").get_to(r.reached_goal);
  j.at("max_tile").get_to(r.max_tile);
  j.at("steps").get_to(r.steps);
  j.at("raw_reward").get_to(r.raw_reward);
}

/// Level descriptor shared with the session service and browser client.
/// The seed is a decimal string so 64-bit values survive JavaScript.
inline nlohmann::json render_descriptor(const Level& level) {
  nlohmann::json tiles = nlohmann::json::array();
  for (const Tile& t : level.tiles) tiles.push_back({{"height", t.height}, {"spiked", t.spiked}});
  return {{"length", kLevelLength},
          {"start", Level::start()},
          {"goal", Level::goal()},
          {"seed", std::to_string(level.seed)},
          {"tiles", std::move(tiles)}};
}

inline Level parse_descriptor(const nlohmann::json& j) {
  try {
    const auto& tiles = j.at("tiles");
    if (!tiles.is_array() || tiles.size() != kLevelLength) {
      throw Error(ErrorCode::kFormat, "descriptor must have exactly 48 tiles");
    }
    if (j.at("start").get<int>() != 0 || j.at("goal").get<int>() != kGoalTile) {
      throw Error(ErrorCode::kFormat, "descriptor start/goal must be 0/47");
    }
    Level level;
    level.seed = std::stoull(j.at("seed").get<std::string>());
    for (int i = 0; i < kLevelLength; ++i) {
      const int h = tiles[i].at("height").get<int>();
      if (std::find(kTileHeights.begin(), kTileHeights.end(), h) == kTileHeights.end()) {
        throw Error(ErrorCode::kFormat, "tile height out of range");
      }
      level.tiles[i] = Tile{h, tiles[i].at("spiked").get<bool>()};
    }
    if (level.tiles[0].spiked || level.tiles[kGoalTile].spiked) {
      throw Error(ErrorCode::kFormat, "start and goal tiles cannot be spiked");
    }
    return level;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("bad level descriptor: ") + e.what());
  } catch (const std::logic_error& e) {  // stoull
    throw Error(ErrorCode::kFormat, std::string("bad level seed: ") + e.what());
  }
}

}  // namespace perm

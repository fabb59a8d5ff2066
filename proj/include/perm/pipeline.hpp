#pragma once

// Stage 1 -> PERM fit -> Stage 2 teaching, evaluation on held-out levels,
// curriculum comparison, and ability-trajectory reporting.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "perm/checkpoint.hpp"
#include "perm/corpus.hpp"
#include "perm/error.hpp"
#include "perm/jumper.hpp"
#include "perm/model.hpp"
#include "perm/random.hpp"
#include "perm/session.hpp"
#include "perm/students.hpp"

namespace perm {

// ---- fitting ----------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ElboBreakdown& b) {
  j = nlohmann::json{{"recon_r", b.recon_r},
                     {"recon_lambda", b.recon_lambda},
                     {"kl_a", b.kl_a_term},
                     {"kl_d", b.kl_d_term},
                     {"total", b.total}};
}

inline void to_json(nlohmann::json& j, const EpochTrace& t) {
  j = nlohmann::json{{"epoch", t.epoch}, {"kl_weight", t.kl_weight}, {"elbo", t.elbo}};
}

struct FitOutputs {
  std::string checkpoint_path;  // empty: not persisted
  std::string trace_path;
};

/// Trains on the corpus (with its frozen normalizer) and optionally writes
/// the checkpoint and the per-epoch trace as JSON.
inline TrainResult train_perm_from_corpus(const Corpus& corpus, const TrainConfig& config,
                                          const FitOutputs& outputs = {}) {
  if (!corpus.normalizer.usable()) throw Error(ErrorCode::kInvalidArgument, "corpus has no fitted normalizer");
  const auto samples = corpus.samples();
  auto result = train(samples, config, corpus.normalizer);
  if (!outputs.checkpoint_path.empty()) save_checkpoint(result.model, outputs.checkpoint_path);
  if (!outputs.trace_path.empty()) {
    std::ofstream out(outputs.trace_path, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot open " + outputs.trace_path + " for writing");
    out << nlohmann::json(result.trace).dump(1) << '\n';
  }
  return result;
}

// ---- stage 2 --------------------------------------------------------------

/// Session mode: trial, N adaptive levels, test, with attempt caps.
inline SessionLog stage2_teach(std::shared_ptr<const PermModel> model, Student& student, Condition condition,
                               std::uint64_t seed, const ProtocolConfig& protocol = {},
                               const std::string& session_id = {}) {
  if (!model || !model->trained()) throw Error(ErrorCode::kNotTrained, "stage 2 needs a trained model");
  SessionMachine machine(condition, std::move(model), seed, protocol, session_id, student.describe());
  run_simulated_session(machine, student);
  return machine.log();
}

struct RlStep {
  LevelParams requested;
  LevelParams params;
  std::uint64_t level_seed = 0;
  double ability_projection = 0.0;
  EpisodeResult result;
};

/// RL mode: one attempt per level, continuously. The first level is drawn
/// uniformly; afterwards PERM infers ability from the last K interactions.
/// `none` consumes no attempts.
inline std::vector<RlStep> teach_rl(const PermModel& model, Student& student, Condition condition, int attempts,
                                    std::uint64_t seed, GenerationMode mode = GenerationMode::kMean) {
  if (!model.trained()) throw Error(ErrorCode::kNotTrained, "stage 2 needs a trained model");
  if (attempts < 0) throw Error(ErrorCode::kInvalidArgument, "attempt budget must be >= 0");
  std::vector<RlStep> out;
  if (condition == Condition::kNone) return out;
  out.reserve(static_cast<std::size_t>(attempts));
  Rng rng(derive_seed(seed, 0x57a6e2));
  std::vector<ResponseSample> history;
  const auto window = static_cast<std::size_t>(model.config().window);
  for (int t = 0; t < attempts; ++t) {
    RlStep step;
    const auto ability = model.infer_ability(history);
    step.ability_projection = model.project(ability.mean);
    if (condition == Condition::kPerm && t > 0) {
      step.requested = model.generate_next_level_params(ability, rng, mode);
    } else {
      step.requested = random_curriculum_next(rng);
    }
    const auto guarded = guarded_level(step.requested, rng.next_u64());
    step.params = guarded.params;
    step.level_seed = guarded.level.seed;
    step.result = student.attempt(guarded.level, rng, true).result;
    history.push_back({guarded.params, normalize(step.result.raw_reward, model.normalizer())});
    if (history.size() > window) history.erase(history.begin());
    out.push_back(step);
  }
  return out;
}

// ---- evaluation -----------------------------------------------------------

/// Held-out levels: domain-randomized parameters through the solvability
/// guard, on a seed stream disjoint from every training stream.
inline std::vector<Level> make_eval_levels(int count, std::uint64_t seed) {
  if (count <= 0) throw Error(ErrorCode::kInvalidArgument, "eval level count must be positive");
  Rng rng(derive_seed(seed, 0xe7a1));
  std::vector<Level> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(guarded_level(random_curriculum_next(rng), rng.next_u64()).level);
  return out;
}

struct LevelOutcome {
  bool completed = false;
  int attempts = 0;    // attempts used (cap when never completed)
  int best_tile = 0;   // deepest tile over all attempts
  int total_steps = 0;
};

/// Integer sums keep aggregation exact and independent of record order.
struct EvalMetrics {
  std::uint64_t seed = 0;
  int levels = 0;
  int completed = 0;
  int attempts_to_complete = 0;  // summed over completed levels
  int depth_tiles = 0;
  int attempts = 0;
  int steps = 0;

  double completion_rate() const { return levels ? static_cast<double>(completed) / levels : 0.0; }
  std::optional<double> mean_attempts_to_complete() const {
    if (!completed) return std::nullopt;
    return static_cast<double>(attempts_to_complete) / completed;
  }
  double mean_max_depth() const {
    return levels ? static_cast<double>(depth_tiles) / (static_cast<double>(levels) * kGoalTile) : 0.0;
  }
  double mean_steps_per_attempt() const { return attempts ? static_cast<double>(steps) / attempts : 0.0; }

  void add(const LevelOutcome& o) {
    ++levels;
    if (o.completed) {
      ++completed;
      attempts_to_complete += o.attempts;
    }
    depth_tiles += o.best_tile;
    attempts += o.attempts;
    steps += o.total_steps;
  }

  void merge(const EvalMetrics& other) {
    levels += other.levels;
    completed += other.completed;
    attempts_to_complete += other.attempts_to_complete;
    depth_tiles += other.depth_tiles;
    attempts += other.attempts;
    steps += other.steps;
  }
};

inline void to_json(nlohmann::json& j, const EvalMetrics& m) {
  const auto atc = m.mean_attempts_to_complete();
  j = nlohmann::json{{"seed", std::to_string(m.seed)},
                     {"levels", m.levels},
                     {"completed", m.completed},
                     {"completion_rate", m.completion_rate()},
                     {"mean_attempts_to_complete", atc ? nlohmann::json(*atc) : nlohmann::json(nullptr)},
                     {"mean_max_depth", m.mean_max_depth()},
                     {"mean_steps_per_attempt", m.mean_steps_per_attempt()},
                     {"attempts", m.attempts},
                     {"steps", m.steps},
                     {"depth_tiles", m.depth_tiles},
                     {"attempts_to_complete", m.attempts_to_complete}};
}

struct MetricsReport {
  std::string label;
  std::vector<EvalMetrics> per_seed;

  /// Pooled over seeds; with equal level counts per seed the rates equal the
  /// per-seed means.
  EvalMetrics total() const {
    EvalMetrics t;
    for (const auto& row : per_seed) t.merge(row);
    return t;
  }
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"label", r.label}, {"total", r.total()}, {"per_seed", r.per_seed}};
}

inline EvalMetrics summarize(const std::vector<LevelOutcome>& outcomes, std::uint64_t seed = 0) {
  EvalMetrics m;
  m.seed = seed;
  for (const auto& o : outcomes) m.add(o);
  return m;
}

/// Up to `cap` attempts per level, stopping at the first goal; no learning.
/// Attempt k on level i uses rng seed derive(seed, i, k).
inline std::vector<LevelOutcome> run_eval(Student& student, const std::vector<Level>& levels, int cap,
                                          std::uint64_t seed) {
  if (levels.empty()) throw Error(ErrorCode::kInvalidArgument, "eval level set is empty");
  if (cap <= 0) throw Error(ErrorCode::kInvalidArgument, "attempts cap must be positive");
  std::vector<LevelOutcome> out;
  out.reserve(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    LevelOutcome o;
    for (int k = 0; k < cap && !o.completed; ++k) {
      Rng rng(derive_seed(seed, 0xe7a1, i, static_cast<std::uint64_t>(k)));
      const auto r = student.attempt(levels[i], rng, false).result;
      ++o.attempts;
      o.best_tile = std::max(o.best_tile, r.max_tile);
      o.total_steps += r.steps;
      o.completed = r.reached_goal;
    }
    out.push_back(o);
  }
  return out;
}

inline MetricsReport evaluate(Student& student, const std::vector<Level>& levels, int cap, std::uint64_t seed = 0,
                              const std::string& label = {}) {
  MetricsReport report;
  report.label = label.empty() ? student.describe() : label;
  report.per_seed.push_back(summarize(run_eval(student, levels, cap, seed), seed));
  return report;
}

// ---- curriculum comparison ------------------------------------------------

struct RunConfig {
  int stage1_episodes = 15000;
  std::vector<std::uint64_t> seeds{0};
  Condition condition = Condition::kPerm;
  ProtocolConfig protocol;  // levels per session, attempts cap
  int training_attempts = 2000;  // RL-mode budget per trained condition
  int eval_levels = 20;
  StudentSpec stage1_student = LearnerSpec{};
  LearnerConfig learner;  // fresh stage-2 students
  GenerationMode generation = GenerationMode::kMean;

  void validate() const {
    protocol.validate();
    if (stage1_episodes < 2 || training_attempts < 0 || eval_levels <= 0 || seeds.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "run config counts must be positive and seeds nonempty");
    }
  }
};

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
inline double sign_test_p(int wins, int losses) {
  const int n = wins + losses;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

struct SignTest {
  int wins = 0;
  int losses = 0;
  int ties = 0;
  double p_value = 1.0;
};

inline void to_json(nlohmann::json& j, const SignTest& s) {
  j = nlohmann::json{{"wins", s.wins}, {"losses", s.losses}, {"ties", s.ties}, {"p_value", s.p_value}};
}

template <typename Metric>
SignTest paired_sign_test(const MetricsReport& a, const MetricsReport& b, Metric metric) {
  SignTest s;
  for (std::size_t i = 0; i < std::min(a.per_seed.size(), b.per_seed.size()); ++i) {
    const double x = metric(a.per_seed[i]);
    const double y = metric(b.per_seed[i]);
    if (x > y) {
      ++s.wins;
    } else if (x < y) {
      ++s.losses;
    } else {
      ++s.ties;
    }
  }
  s.p_value = sign_test_p(s.wins, s.losses);
  return s;
}

struct CurriculumComparison {
  std::map<std::string, MetricsReport> by_condition;  // perm, random, none
  std::map<std::string, int> training_attempts;      // per seed, per condition
  SignTest completion;  // perm vs random
  SignTest depth;

  /// Directional check: pooled means, or both one-sided sign tests at 0.05.
  bool perm_not_worse() const {
    const auto p = by_condition.at("perm").total();
    const auto r = by_condition.at("random").total();
    const bool means = p.completion_rate() >= r.completion_rate() && p.mean_max_depth() >= r.mean_max_depth();
    const bool signs = completion.p_value < 0.05 && depth.p_value < 0.05;
    return means || signs;
  }
};

inline void to_json(nlohmann::json& j, const CurriculumComparison& c) {
  j = nlohmann::json{{"conditions", c.by_condition},
                     {"training_attempts", c.training_attempts},
                     {"sign_test_completion", c.completion},
                     {"sign_test_depth", c.depth},
                     {"perm_not_worse", c.perm_not_worse()}};
}

/// Trains fresh learners under perm and random with the same attempt budget
/// (none gets no training) and evaluates all three on shared held-out levels.
/// `model_for_seed(seed)` supplies the PERM teacher.
template <typename ModelForSeed>
  requires std::invocable<ModelForSeed&, std::uint64_t>
CurriculumComparison compare_curricula(const RunConfig& run, ModelForSeed&& model_for_seed) {
  run.validate();
  CurriculumComparison out;
  for (Condition c : {Condition::kPerm, Condition::kRandom, Condition::kNone}) {
    out.by_condition[to_string(c)].label = to_string(c);
    out.training_attempts[to_string(c)] = c == Condition::kNone ? 0 : run.training_attempts;
  }
  for (std::uint64_t seed : run.seeds) {
    const PermModel& model = model_for_seed(seed);
    const auto levels = make_eval_levels(run.eval_levels, derive_seed(seed, 0x4e1d));
    for (Condition c : {Condition::kPerm, Condition::kRandom, Condition::kNone}) {
      LearningStudent student(run.learner);
      // Same teaching stream seed for both trained conditions.
      const auto steps = teach_rl(model, student, c, run.training_attempts, derive_seed(seed, 0x7eac), run.generation);
      if (c != Condition::kNone && static_cast<int>(steps.size()) != run.training_attempts) {
        throw Error(ErrorCode::kNumerical, "training budget not consumed");
      }
      auto metrics = summarize(run_eval(student, levels, run.protocol.attempts_cap, derive_seed(seed, 0xe7a1)), seed);
      out.by_condition[to_string(c)].per_seed.push_back(metrics);
    }
  }
  const auto& p = out.by_condition.at("perm");
  const auto& r = out.by_condition.at("random");
  out.completion = paired_sign_test(p, r, [](const EvalMetrics& m) { return m.completion_rate(); });
  out.depth = paired_sign_test(p, r, [](const EvalMetrics& m) { return m.mean_max_depth(); });
  return out;
}

/// Full pipeline per seed: stage-1 corpus from `run.stage1_student`, PERM fit,
/// then compare_curricula.
inline CurriculumComparison compare_curricula(const RunConfig& run, const TrainConfig& train_config) {
  std::map<std::uint64_t, PermModel> models;
  return compare_curricula(run, [&](std::uint64_t seed) -> const PermModel& {
    auto it = models.find(seed);
    if (it == models.end()) {
      models.clear();  // one teacher alive at a time
      const auto corpus = stage1_collect(run.stage1_student, run.stage1_episodes, derive_seed(seed, 0x51));
      TrainConfig cfg = train_config;
      cfg.seed = derive_seed(seed, 0x7a1);
      it = models.emplace(seed, train_perm_from_corpus(corpus, cfg).model).first;
    }
    return it->second;
  });
}

/// Per-seed CSV: seed, condition, metrics.
inline std::string comparison_csv(const CurriculumComparison& c) {
  std::ostringstream os;
  os << "seed,condition,levels,completed,completion_rate,mean_attempts_to_complete,mean_max_depth,"
        "mean_steps_per_attempt\n";
  for (const auto& [name, report] : c.by_condition) {
    for (const auto& m : report.per_seed) {
      const auto atc = m.mean_attempts_to_complete();
      os << m.seed << ',' << name << ',' << m.levels << ',' << m.completed << ',' << m.completion_rate() << ','
         << (atc ? std::to_string(*atc) : std::string{}) << ',' << m.mean_max_depth() << ','
         << m.mean_steps_per_attempt() << '\n';
    }
  }
  return os.str();
}

// ---- ability trajectories -------------------------------------------------

/// Final-test standing: completed beats not completed, then fewer attempts,
/// then the deeper best attempt.
inline double test_score(const SessionLog& log) {
  const auto* test = log.test();
  if (!test || test->attempts.empty()) return -1.0;
  const double cap = log.protocol.attempts_cap;
  if (test->completed) return 2.0 + (cap - static_cast<double>(test->attempts.size())) / cap;
  return test->best_raw_reward();
}

struct TrajectoryRow {
  int level_index = 0;
  double mean_projection = 0.0;
  int sessions = 0;
};

struct TrajectoryGroup {
  std::string name;  // high, average, poor
  std::vector<std::size_t> members;  // positions in the input
  std::vector<TrajectoryRow> rows;
};

struct TrajectoryReport {
  std::vector<TrajectoryGroup> groups;  // nonempty groups only

  const TrajectoryGroup* group(const std::string& name) const {
    for (const auto& g : groups) {
      if (g.name == name) return &g;
    }
    return nullptr;
  }
};

inline void to_json(nlohmann::json& j, const TrajectoryRow& r) {
  j = nlohmann::json{{"level_index", r.level_index}, {"mean_projection", r.mean_projection}, {"sessions", r.sessions}};
}

inline void to_json(nlohmann::json& j, const TrajectoryGroup& g) {
  j = nlohmann::json{{"group", g.name}, {"members", g.members}, {"rows", g.rows}};
}

inline void to_json(nlohmann::json& j, const TrajectoryReport& r) { j = nlohmann::json{{"groups", r.groups}}; }

/// Top quarter / middle half / bottom quarter by test_score (each outer group
/// holds round(n/4) sessions, so a single session lands in "average"), then
/// the mean ability projection per level index within each group.
inline TrajectoryReport ability_trajectory_report(const std::vector<SessionLog>& logs) {
  if (logs.empty()) throw Error(ErrorCode::kInvalidArgument, "no session logs");
  const std::size_t n = logs.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return test_score(logs[a]) > test_score(logs[b]); });
  const auto quarter = static_cast<std::size_t>(std::llround(static_cast<double>(n) / 4.0));
  TrajectoryReport report;
  auto build = [&](const char* name, std::size_t lo, std::size_t hi) {
    if (lo >= hi) return;
    TrajectoryGroup g;
    g.name = name;
    std::map<int, std::pair<double, int>> acc;
    for (std::size_t k = lo; k < hi; ++k) {
      g.members.push_back(order[k]);
      for (const auto& level : logs[order[k]].levels) {
        if (!level.ability_projection) continue;
        auto& [sum, count] = acc[level.index];
        sum += *level.ability_projection;
        ++count;
      }
    }
    std::sort(g.members.begin(), g.members.end());
    for (const auto& [index, sc] : acc) g.rows.push_back({index, sc.first / sc.second, sc.second});
    report.groups.push_back(std::move(g));
  };
  build("high", 0, quarter);
  build("average", quarter, n - quarter);
  build("poor", n - quarter, n);
  return report;
}

inline std::string trajectory_csv(const TrajectoryReport& r) {
  std::ostringstream os;
  os << "group,level_index,mean_projection,sessions\n";
  for (const auto& g : r.groups) {
    for (const auto& row : g.rows) os << g.name << ',' << row.level_index << ',' << row.mean_projection << ',' << row.sessions << '\n';
  }
  return os.str();
}

}  // namespace perm

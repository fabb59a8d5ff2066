#pragma once

// Stage-1 interaction data: records, JSONL persistence, the solvability guard
// used whenever levels are generated, and domain-randomized collection.

#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "perm/error.hpp"
#include "perm/irt.hpp"
#include "perm/jumper.hpp"
#include "perm/model.hpp"
#include "perm/random.hpp"
#include "perm/students.hpp"

namespace perm {

struct InteractionRecord {
  std::string student_id;
  std::int64_t index = 0;  // per-student interaction counter t
  LevelParams params;      // parameters that actually generated the level
  std::uint64_t level_seed = 0;
  double raw_reward = 0.0;
  double response = 0.0;   // normalize(raw_reward) under the corpus normalizer
  bool reached_goal = false;
  int max_tile = 0;
  int steps = 0;
  std::int64_t timestamp = 0;  // logical clock: position in the collection run

  bool operator==(const InteractionRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const InteractionRecord& r) {
  j = nlohmann::json{{"student_id", r.student_id},
                     {"t", r.index},
                     {"params", r.params},
                     {"level_seed", std::to_string(r.level_seed)},
                     {"raw_reward", r.raw_reward},
                     {"response", r.response},
                     {"reached_goal", r.reached_goal},
                     {"max_tile", r.max_tile},
                     {"steps", r.steps},
                     {"timestamp", r.timestamp}};
}

inline void from_json(const nlohmann::json& j, InteractionRecord& r) {
  j.at("student_id").get_to(r.student_id);
  j.at("t").get_to(r.index);
  j.at("params").get_to(r.params);
  r.level_seed = std::stoull(j.at("level_seed").get<std::string>());
  j.at("raw_reward").get_to(r.raw_reward);
  j.at("response").get_to(r.response);
  j.at("reached_goal").get_to(r.reached_goal);
  j.at("max_tile").get_to(r.max_tile);
  j.at("steps").get_to(r.steps);
  j.at("timestamp").get_to(r.timestamp);
}

struct Corpus {
  std::vector<InteractionRecord> records;
  Normalizer normalizer;

  std::vector<ResponseSample> samples() const {
    std::vector<ResponseSample> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back({r.params, r.response});
    return out;
  }

  std::vector<double> raw_rewards() const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.raw_reward);
    return out;
  }
};

/// Fits the normalizer on all raw rewards and rewrites every response.
inline void attach_normalizer(Corpus& corpus) {
  corpus.normalizer = fit_normalizer(corpus.raw_rewards());
  for (auto& r : corpus.records) r.response = normalize(r.raw_reward, corpus.normalizer);
}

inline Corpus merge_corpora(const std::vector<Corpus>& parts) {
  Corpus out;
  for (const auto& c : parts) out.records.insert(out.records.end(), c.records.begin(), c.records.end());
  attach_normalizer(out);
  return out;
}

/// One JSON record per line.
inline void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const auto& r : corpus.records) out << nlohmann::json(r).dump() << '\n';
}

inline void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path + " for writing");
  write_corpus(corpus, out);
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

/// Reads records and refits the normalizer; stored responses must agree with
/// the refit to 1e-9.
inline Corpus read_corpus(std::istream& in, const std::string& name = "corpus") {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      corpus.records.push_back(nlohmann::json::parse(line).get<InteractionRecord>());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kFormat, name + ":" + std::to_string(line_no) + ": " + e.what());
    }
    validate(corpus.records.back().params);
  }
  const auto stored = corpus.records;
  attach_normalizer(corpus);
  for (std::size_t i = 0; i < stored.size(); ++i) {
    if (std::abs(stored[i].response - corpus.records[i].response) > 1e-9) {
      throw Error(ErrorCode::kFormat, name + ": record " + std::to_string(i + 1) +
                                          " response disagrees with corpus normalizer");
    }
  }
  return corpus;
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return read_corpus(in, path);
}

// ---- solvability guard ----------------------------------------------------

struct GuardedLevel {
  Level level;
  LevelParams params;  // effective parameters after any softening
  int attempts = 0;    // generation attempts used
};

inline constexpr int kGuardSeedsPerStep = 10;
inline constexpr double kGuardDensityStep = 0.1;
inline constexpr double kGuardFlattenStep = 0.25;

/// Generates a solvable level: up to 10 seeds per setting; then spike density
/// is lowered by 0.1; once density is 0, heights are blended toward all-flat
/// in steps of 0.25 (all-flat with no spikes is always solvable).
inline GuardedLevel guarded_level(const LevelParams& requested, std::uint64_t seed) {
  validate(requested);
  LevelParams p = requested;
  GuardedLevel out;
  for (int round = 0;; ++round) {
    for (int k = 0; k < kGuardSeedsPerStep; ++k) {
      const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(k));
      ++out.attempts;
      Level level = generate_level(p, s);
      if (is_solvable(level)) {
        out.level = level;
        out.params = p;
        return out;
      }
    }
    if (p.spike_density > 0.0) {
      p.spike_density = std::max(0.0, p.spike_density - kGuardDensityStep);
      // Snap tiny remainders so the sequence terminates at exactly 0.
      if (p.spike_density < 1e-12) p.spike_density = 0.0;
    } else {
      const std::array<double, 4> flat{0.0, 1.0, 0.0, 0.0};
      double sum = 0.0;
      for (int h = 0; h < 4; ++h) {
        p.height_probs[h] = (1.0 - kGuardFlattenStep) * p.height_probs[h] + kGuardFlattenStep * flat[h];
        sum += p.height_probs[h];
      }
      for (double& h : p.height_probs) h /= sum;
      if (p.height_probs[1] > 1.0 - 1e-9) p.height_probs = flat;
    }
  }
}

// ---- students -------------------------------------------------------------

struct ScriptedSpec {
  double skill = 0.0;
};
struct LearnerSpec {
  LearnerConfig config;
};
using StudentSpec = std::variant<ScriptedSpec, LearnerSpec>;

/// "scripted:<skill>" or "learner".
inline StudentSpec parse_student_spec(const std::string& text) {
  if (text == "learner") return LearnerSpec{};
  const std::string prefix = "scripted:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      std::size_t used = 0;
      const std::string tail = text.substr(prefix.size());
      const double skill = std::stod(tail, &used);
      if (used == tail.size() && std::isfinite(skill)) return ScriptedSpec{skill};
    } catch (const std::exception&) {
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "student must be 'scripted:<skill>' or 'learner', got '" + text + "'");
}

inline std::string describe(const StudentSpec& spec) {
  if (const auto* s = std::get_if<ScriptedSpec>(&spec)) {
    std::ostringstream os;
    os << "scripted:" << s->skill;
    return os.str();
  }
  return "learner";
}

inline std::unique_ptr<Student> make_student(const StudentSpec& spec) {
  if (const auto* s = std::get_if<ScriptedSpec>(&spec)) return std::make_unique<ScriptedStudent>(s->skill);
  return std::make_unique<LearningStudent>(std::get<LearnerSpec>(spec).config);
}

// ---- stage 1 ---------------------------------------------------------------

/// Domain-randomized collection: one attempt per level, learning students
/// update after every attempt. Responses are left at 0 until a normalizer is
/// attached.
inline std::vector<InteractionRecord> collect_interactions(Student& student, const std::string& student_id,
                                                           int episodes, std::uint64_t seed,
                                                           std::int64_t clock_start = 0) {
  if (episodes < 0) throw Error(ErrorCode::kInvalidArgument, "episode count must be >= 0");
  Rng rng(derive_seed(seed, 0xc011ec7));
  std::vector<InteractionRecord> out;
  out.reserve(episodes);
  for (int t = 0; t < episodes; ++t) {
    const LevelParams requested = random_curriculum_next(rng);
    const auto guarded = guarded_level(requested, rng.next_u64());
    const auto ep = student.attempt(guarded.level, rng, true);
    InteractionRecord rec;
    rec.student_id = student_id;
    rec.index = t;
    rec.params = guarded.params;
    rec.level_seed = guarded.level.seed;
    rec.raw_reward = ep.result.raw_reward;
    rec.reached_goal = ep.result.reached_goal;
    rec.max_tile = ep.result.max_tile;
    rec.steps = ep.result.steps;
    rec.timestamp = clock_start + t;
    out.push_back(std::move(rec));
  }
  return out;
}

/// Collects `episodes` interactions from a fresh student and attaches the
/// corpus normalizer; fewer than two usable rewards is an error.
inline Corpus stage1_collect(const StudentSpec& spec, int episodes, std::uint64_t seed,
                             const std::string& student_id = {}) {
  auto student = make_student(spec);
  Corpus corpus;
  corpus.records = collect_interactions(*student, student_id.empty() ? describe(spec) : student_id,
                                        episodes, seed);
  attach_normalizer(corpus);
  return corpus;
}

}  // namespace perm

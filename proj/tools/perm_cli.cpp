// perm: command-line front end for collection, fitting, teaching and evaluation.
//
//   perm collect    --episodes N --student scripted:1.5 [--student learner ...] --out corpus.jsonl
//   perm train-perm --corpus corpus.jsonl [--config train.json] --out model.ckpt [--trace trace.json]
//   perm teach      --model model.ckpt --condition perm --seeds 1,2 --student scripted:0 --out sessions.jsonl
//   perm evaluate   --student learner [--model m --condition perm --train-attempts 2000] --levels 20
//   perm compare    --seeds 0,1,2 [--config train.json] [--csv out.csv]
//   perm report     --sessions sessions.jsonl [--csv out.csv]
//   perm replay     --sessions sessions.jsonl
//
// --json prints one machine-readable document on stdout.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI/CLI.hpp>
#include <nlohmann/json.hpp>

#include "perm/checkpoint.hpp"
#include "perm/corpus.hpp"
#include "perm/pipeline.hpp"
#include "perm/session.hpp"

namespace {

using namespace perm;
using nlohmann::json;

bool g_json = false;

void emit(const json& doc, const std::string& text) {
  if (g_json) {
    std::cout << doc.dump(2) << '\n';
  } else {
    std::cout << text;
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

// Defaults patched with whatever keys the file sets.
TrainConfig load_train_config(const std::string& path) {
  json base = TrainConfig{};
  if (!path.empty()) {
    try {
      base.merge_patch(json::parse(read_file(path)));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kFormat, path + ": " + e.what());
    }
  }
  try {
    auto c = base.get<TrainConfig>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, path + ": " + e.what());
  }
}

std::vector<SessionLog> read_sessions(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<SessionLog> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line).get<SessionLog>());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kFormat, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string fmt(double x) {
  std::ostringstream ss;
  ss.precision(4);
  ss << x;
  return ss.str();
}

std::string metrics_line(const std::string& label, const EvalMetrics& m) {
  return label + ": completion " + fmt(m.completion_rate()) + ", depth " + fmt(m.mean_max_depth()) +
         ", attempts-to-complete " +
         (m.mean_attempts_to_complete() ? fmt(*m.mean_attempts_to_complete()) : std::string("n/a")) + "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"PERM teacher: collect, fit, teach, evaluate"};
  app.require_subcommand(1);
  app.add_flag("--json", g_json, "Machine-readable JSON on stdout");

  // collect
  auto* collect = app.add_subcommand("collect", "Stage-1 domain-randomized collection");
  int episodes = 0;
  std::vector<std::string> students;
  std::uint64_t seed = 0;
  std::string out_path;
  collect->add_option("--episodes", episodes, "Episodes per student")->required()->check(CLI::PositiveNumber);
  collect->add_option("--student", students, "scripted:<skill> or learner (repeatable)")->required();
  collect->add_option("--seed", seed, "Base seed");
  collect->add_option("--out", out_path, "Corpus JSONL")->required();

  // train-perm
  auto* fit = app.add_subcommand("train-perm", "Fit PERM on a corpus");
  std::vector<std::string> corpus_paths;
  std::string config_path, trace_path;
  std::optional<std::uint64_t> fit_seed;
  fit->add_option("--corpus", corpus_paths, "Corpus JSONL (repeatable; merged)")->required()->check(CLI::ExistingFile);
  fit->add_option("--config", config_path, "TrainConfig JSON (partial allowed)")->check(CLI::ExistingFile);
  fit->add_option("--seed", fit_seed, "Overrides config seed");
  fit->add_option("--out", out_path, "Checkpoint path")->required();
  fit->add_option("--trace", trace_path, "Per-epoch ELBO trace JSON");

  // teach
  auto* teach = app.add_subcommand("teach", "Stage-2 simulated sessions");
  std::string model_path, condition_text = "perm", student_text = "scripted:0";
  std::vector<std::uint64_t> seeds{0};
  int training_levels = 10, attempts_cap = 15;
  teach->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  teach->add_option("--condition", condition_text, "perm | random | none");
  teach->add_option("--seeds", seeds, "Session seeds")->delimiter(',');
  teach->add_option("--student", student_text, "scripted:<skill> or learner");
  teach->add_option("--training-levels", training_levels);
  teach->add_option("--attempts-cap", attempts_cap);
  teach->add_option("--out", out_path, "SessionLog JSONL");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a student on held-out levels");
  int levels = 20, train_attempts = 0;
  eval->add_option("--student", student_text, "scripted:<skill> or learner");
  eval->add_option("--model", model_path, "Checkpoint (needed with --train-attempts)")->check(CLI::ExistingFile);
  eval->add_option("--condition", condition_text, "Curriculum for --train-attempts");
  eval->add_option("--train-attempts", train_attempts, "RL-mode teaching before evaluation");
  eval->add_option("--levels", levels, "Held-out level count")->check(CLI::PositiveNumber);
  eval->add_option("--attempts-cap", attempts_cap);
  eval->add_option("--seed", seed);

  // compare
  auto* compare = app.add_subcommand("compare", "PERM vs random vs none for fresh learners");
  RunConfig run_cfg;
  std::string csv_path;
  compare->add_option("--seeds", run_cfg.seeds, "Run seeds")->delimiter(',');
  compare->add_option("--episodes", run_cfg.stage1_episodes, "Stage-1 episodes per seed");
  compare->add_option("--attempts", run_cfg.training_attempts, "Teaching attempts per condition");
  compare->add_option("--eval-levels", run_cfg.eval_levels);
  compare->add_option("--attempts-cap", run_cfg.protocol.attempts_cap);
  compare->add_option("--config", config_path, "TrainConfig JSON")->check(CLI::ExistingFile);
  compare->add_option("--csv", csv_path, "Per-seed CSV");

  // report
  auto* report = app.add_subcommand("report", "Ability trajectories grouped by test score");
  std::string sessions_path;
  report->add_option("--sessions", sessions_path, "SessionLog JSONL")->required()->check(CLI::ExistingFile);
  report->add_option("--csv", csv_path, "Trajectory CSV");

  // replay
  auto* replay = app.add_subcommand("replay", "Re-verify session logs");
  replay->add_option("--sessions", sessions_path, "SessionLog JSONL")->required()->check(CLI::ExistingFile);
  std::string replay_student;
  replay->add_option("--student", replay_student,
                     "Student for seeded attempts (default: parsed from each log's display name)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (*collect) {
    std::vector<Corpus> parts;
    for (std::size_t i = 0; i < students.size(); ++i) {
      const auto spec = parse_student_spec(students[i]);
      parts.push_back(stage1_collect(spec, episodes, derive_seed(seed, i), "s" + std::to_string(i) + ":" + describe(spec)));
    }
    const Corpus corpus = merge_corpora(parts);
    write_corpus(corpus, out_path);
    emit({{"records", corpus.records.size()}, {"normalizer", corpus.normalizer}, {"out", out_path}},
         "wrote " + std::to_string(corpus.records.size()) + " records to " + out_path + "\n");
  } else if (*fit) {
    std::vector<Corpus> parts;
    for (const auto& p : corpus_paths) parts.push_back(read_corpus(p));
    const Corpus corpus = parts.size() == 1 ? parts.front() : merge_corpora(parts);
    TrainConfig cfg = load_train_config(config_path);
    if (fit_seed) cfg.seed = *fit_seed;
    const auto result = train_perm_from_corpus(corpus, cfg, FitOutputs{out_path, trace_path});
    const auto& last = result.trace.back().elbo;
    emit({{"checkpoint", out_path}, {"epochs", result.trace.size()}, {"final_elbo", last}},
         "trained " + std::to_string(result.trace.size()) + " epochs, final ELBO " + fmt(last.total) + " -> " +
             out_path + "\n");
  } else if (*teach) {
    auto model = std::make_shared<const PermModel>(load_checkpoint(model_path));
    const Condition condition = parse_condition(condition_text);
    ProtocolConfig protocol{training_levels, attempts_cap};
    std::ostringstream jsonl;
    json summary = json::array();
    std::string text;
    for (std::uint64_t s : seeds) {
      auto student = make_student(parse_student_spec(student_text));
      const auto log = stage2_teach(model, *student, condition, s, protocol, "sim-" + std::to_string(s));
      jsonl << json(log).dump() << '\n';
      const auto* test = log.test();
      summary.push_back({{"seed", std::to_string(s)},
                         {"training_levels", log.training_level_count()},
                         {"test_completed", test && test->completed},
                         {"test_attempts", test ? test->attempts.size() : 0}});
      text += "seed " + std::to_string(s) + ": " + std::to_string(log.training_level_count()) +
              " training levels, test " + (test && test->completed ? "completed" : "not completed") + "\n";
    }
    if (!out_path.empty()) write_file(out_path, jsonl.str());
    emit({{"sessions", summary}}, text);
  } else if (*eval) {
    auto student = make_student(parse_student_spec(student_text));
    if (train_attempts > 0) {
      if (model_path.empty()) throw Error(ErrorCode::kInvalidArgument, "--train-attempts needs --model");
      teach_rl(load_checkpoint(model_path), *student, parse_condition(condition_text), train_attempts,
               derive_seed(seed, 0x7eac));
    }
    const auto lv = make_eval_levels(levels, derive_seed(seed, 0x4e1d));
    const auto rep = evaluate(*student, lv, attempts_cap, seed);
    emit(rep, metrics_line(rep.label, rep.total()));
  } else if (*compare) {
    const auto cmp = compare_curricula(run_cfg, load_train_config(config_path));
    if (!csv_path.empty()) write_file(csv_path, comparison_csv(cmp));
    std::string text;
    for (const auto& [label, rep] : cmp.by_condition) text += metrics_line(label, rep.total());
    text += "sign test p (completion, depth): " + fmt(cmp.completion.p_value) + ", " + fmt(cmp.depth.p_value) +
            "\nperm not worse than random: " + (cmp.perm_not_worse() ? "yes" : "no") + "\n";
    emit(cmp, text);
  } else if (*report) {
    const auto rep = ability_trajectory_report(read_sessions(sessions_path));
    if (!csv_path.empty()) write_file(csv_path, trajectory_csv(rep));
    std::string text;
    for (const auto& g : rep.groups) text += g.name + ": " + std::to_string(g.members.size()) + " sessions\n";
    emit(rep, text.empty() ? "no sessions\n" : text);
  } else if (*replay) {
    const auto logs = read_sessions(sessions_path);
    json rows = json::array();
    std::string text;
    bool all_ok = true;
    for (const auto& log : logs) {
      std::unique_ptr<Student> student;
      if (!replay_student.empty()) {
        student = make_student(parse_student_spec(replay_student));
      } else {
        try {
          student = make_student(parse_student_spec(log.display_name));
        } catch (const Error&) {
          // human session: only trajectories with actions are replayed
        }
      }
      const auto check = replay_session(log, student.get());
      all_ok = all_ok && check.ok;
      rows.push_back({{"session_id", log.session_id}, {"ok", check.ok}, {"first_mismatch", check.first_mismatch}});
      text += log.session_id + ": " + (check.ok ? "ok" : "MISMATCH " + check.first_mismatch) + "\n";
    }
    emit({{"sessions", rows}, {"ok", all_ok}}, text);
    return all_ok ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const perm::Error& e) {
    std::cerr << "perm: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "perm: internal error: " << e.what() << '\n';
    return 3;
  }
}

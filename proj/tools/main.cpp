// Command-line front end: pretrain | train | eval | select | catchrate |
// gradcheck. All subcommands resolve one config, derive every random stream
// from the single --seed, and write their outputs plus a manifest into
// --out-dir.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "brts/brts.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kArtifactVersion = "1.0.0";

struct JsonKeyPrinter {
  json& out;
  void operator()(const char* name, const std::string& v) const { out[name] = v; }
  void operator()(const char* name, bool v) const { out[name] = v; }
  void operator()(const char* name, int v) const { out[name] = v; }
  void operator()(const char* name, double v) const { out[name] = v; }
  void operator()(const char* name, std::uint64_t v) const { out[name] = v; }
};

json config_json(brts::TrainConfig cfg) {
  json out = json::object();
  brts::detail::for_each_key(cfg, JsonKeyPrinter{out});
  return out;
}

// Written with status "running" before any work starts and finalized with the
// actual directory contents afterwards.
class Manifest {
 public:
  Manifest(fs::path dir, const std::string& command, const brts::TrainConfig& cfg)
      : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    doc_["artifact_version"] = kArtifactVersion;
    doc_["command"] = command;
    doc_["status"] = "running";
    doc_["seed"] = cfg.seed;
    doc_["threads"] = cfg.threads;
    doc_["config"] = config_json(cfg);
    doc_["files"] = json::array();
    write();
  }

  json& gates() { return doc_["gates"]; }

  void finalize() {
    doc_["status"] = "complete";
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir_))
      if (entry.is_regular_file()) files.push_back(entry.path().filename().string());
    std::sort(files.begin(), files.end());
    doc_["files"] = files;
    write();
  }

 private:
  void write() const {
    std::ofstream out(dir_ / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir_.string());
    out << doc_.dump(2) << "\n";
  }

  fs::path dir_;
  json doc_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string eval_report_text(const brts::EvalReport& r) {
  std::ostringstream out;
  out << "k " << r.k << "\n"
      << "tasks " << r.task_count << "\n"
      << "mean " << brts::fmt_g17(r.mean) << "\n"
      << "best " << brts::fmt_g17(r.best_at_k) << "\n"
      << "majority " << brts::fmt_g17(r.majority_at_k) << "\n";
  for (const auto& [difficulty, d] : r.per_difficulty)
    out << "difficulty " << difficulty << " tasks " << d.tasks << " mean "
        << brts::fmt_g17(d.mean) << " best " << brts::fmt_g17(d.best) << " majority "
        << brts::fmt_g17(d.majority) << "\n";
  return out.str();
}

std::string answer_text(const brts::Vocabulary& vocab,
                        const std::optional<brts::TokenSeq>& answer) {
  if (!answer.has_value()) return "-";
  std::string s;
  for (const brts::Token t : *answer) s += std::to_string(vocab.digit_value(t));
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"best-of-n teacher-selection distillation lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "run";
  std::uint64_t seed_flag = 0;
  bool seed_set = false;
  int threads = 1;
  app.add_option("--config", config_path, "config file (key = value per line)");
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--seed", seed_flag, "master seed (overrides the config)")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_option("--threads", threads, "worker thread cap; never changes results")
      ->check(CLI::PositiveNumber);

  auto* cmd_pretrain =
      app.add_subcommand("pretrain", "produce teacher and weak-student checkpoints");

  auto* cmd_train = app.add_subcommand("train", "run the full training loop");

  auto* cmd_eval = app.add_subcommand("eval", "mean / best@k / majority@k on a task set");
  std::string eval_checkpoint, eval_tasks_path;
  int eval_k = 0, eval_num_tasks = 0;
  cmd_eval->add_option("--checkpoint", eval_checkpoint, "policy checkpoint")->required();
  cmd_eval->add_option("--tasks", eval_tasks_path, "task-set file");
  cmd_eval->add_option("--num-tasks", eval_num_tasks,
                       "generate this many tasks instead of reading --tasks");
  cmd_eval->add_option("--k", eval_k, "samples per task (default: config eval_k)");

  auto* cmd_select = app.add_subcommand("select", "demonstrate the selection rule on one task");
  std::string sel_student, sel_teacher;
  std::uint64_t sel_task_seed = 0;
  int sel_n = 0, sel_difficulty = 0;
  bool sel_no_tier2 = false, sel_perturb = false;
  cmd_select->add_option("--student", sel_student, "student checkpoint")->required();
  cmd_select->add_option("--teacher", sel_teacher, "teacher checkpoint")->required();
  cmd_select->add_option("--task-seed", sel_task_seed, "task generation seed");
  cmd_select->add_option("--difficulty", sel_difficulty, "task difficulty (default: config)");
  cmd_select->add_option("--n", sel_n, "Tier-1 pool size (default: config candidates)");
  cmd_select->add_flag("--no-tier2", sel_no_tier2, "disable the Tier-2 recovery attempt");
  cmd_select->add_flag("--perturb-one", sel_perturb, "perturb the last Tier-1 candidate");

  auto* cmd_catchrate = app.add_subcommand("catchrate", "best-of-n catch-rate curves");
  std::string cr_checkpoint, cr_mode = "fixed_prompt";
  int cr_n_max = 4, cr_num_tasks = 512;
  double cr_p_hat = -1.0;
  cmd_catchrate->add_option("--checkpoint", cr_checkpoint, "teacher checkpoint");
  cmd_catchrate->add_option("--n-max", cr_n_max, "largest pool size")->check(CLI::PositiveNumber);
  cmd_catchrate->add_option("--mode", cr_mode, "fixed_prompt | iid_resample | perturb_one");
  cmd_catchrate->add_option("--num-tasks", cr_num_tasks, "task-set size")
      ->check(CLI::PositiveNumber);
  cmd_catchrate->add_option("--p-hat", cr_p_hat,
                            "print the analytic baseline for this rate instead of sampling");

  auto* cmd_gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of the loss gradients");
  int gc_cases = 100;
  cmd_gradcheck->add_option("--cases", gc_cases, "randomized cases per loss branch")
      ->check(CLI::PositiveNumber);

  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();
  CLI11_PARSE(app, argc, argv);

  try {
    brts::TrainConfig cfg =
        config_path.empty() ? brts::TrainConfig{} : brts::load_config(config_path);
    if (seed_set) cfg.seed = seed_flag;
    cfg.threads = threads;
    brts::validate_config(cfg);
    const fs::path out(out_dir);
    const brts::Vocabulary vocab(cfg.vocab_size);

    if (*cmd_pretrain) {
      Manifest manifest(out, "pretrain", cfg);
      const brts::PretrainResult teacher = brts::pretrain_teacher(vocab, cfg, cfg.seed);
      brts::save_policy(teacher.params, out / "teacher");
      const brts::PretrainResult student =
          brts::init_student(vocab, cfg, brts::derive_seed(cfg.seed, 0x57addull));
      brts::save_policy(student.params, out / "student_init");
      manifest.gates()["teacher_accuracy"] = teacher.accuracy;
      manifest.gates()["teacher_steps"] = teacher.steps_run;
      manifest.gates()["student_init_accuracy"] = student.accuracy;
      manifest.finalize();
      std::cout << "teacher greedy accuracy " << brts::fmt_g17(teacher.accuracy) << " after "
                << teacher.steps_run << " steps\n"
                << "student init greedy accuracy " << brts::fmt_g17(student.accuracy) << "\n"
                << "checkpoints: " << (out / "teacher").string() << ", "
                << (out / "student_init").string() << "\n";
    } else if (*cmd_train) {
      Manifest manifest(out, "train", cfg);
      const brts::TrainResult result = brts::train(cfg, out);
      manifest.gates()["teacher_accuracy"] = result.teacher_accuracy;
      manifest.gates()["student_init_accuracy"] = result.student_init_accuracy;
      manifest.gates()["final_eval_mean"] = result.final_eval.mean;
      manifest.gates()["final_eval_best"] = result.final_eval.best_at_k;
      manifest.gates()["final_eval_majority"] = result.final_eval.majority_at_k;
      manifest.finalize();
      std::cout << "trained " << cfg.steps << " steps (" << cfg.mode << "); final mean@"
                << cfg.eval_k << " " << brts::fmt_g17(result.final_eval.mean) << ", best "
                << brts::fmt_g17(result.final_eval.best_at_k) << ", majority "
                << brts::fmt_g17(result.final_eval.majority_at_k) << "\n"
                << "run directory: " << out.string() << "\n";
    } else if (*cmd_eval) {
      Manifest manifest(out, "eval", cfg);
      const brts::PolicyParams policy = brts::load_policy(eval_checkpoint);
      std::vector<brts::TaskInstance> tasks;
      if (!eval_tasks_path.empty())
        tasks = brts::load_tasks(vocab, eval_tasks_path);
      else if (eval_num_tasks > 0)
        tasks = brts::make_task_set(vocab, cfg, cfg.seed, brts::StreamTag::heldout_task,
                                    eval_num_tasks);
      else
        throw std::invalid_argument("eval: pass --tasks FILE or --num-tasks N");
      const int k = eval_k > 0 ? eval_k : cfg.eval_k;
      const brts::EvalReport report = brts::evaluate(
          policy, vocab, tasks, k, {cfg.eval_temperature, cfg.eval_top_p}, cfg.max_len,
          brts::derive_seed(cfg.seed, brts::StreamTag::eval), cfg.threads);
      write_text(out / "eval.txt", eval_report_text(report));
      manifest.finalize();
      std::cout << eval_report_text(report);
    } else if (*cmd_select) {
      Manifest manifest(out, "select", cfg);
      const brts::PolicyParams student = brts::load_policy(sel_student);
      const brts::PolicyParams teacher = brts::load_policy(sel_teacher);
      const int difficulty = sel_difficulty > 0 ? sel_difficulty : cfg.difficulty_min;
      const int n = sel_n > 0 ? sel_n : cfg.candidates;
      const brts::TaskInstance task = brts::generate_task(vocab, sel_task_seed, difficulty);
      const brts::SamplingConfig sampling{cfg.teacher_temperature, cfg.teacher_top_p};
      const auto pool = brts::generate_pool(teacher, vocab, task, n, sel_perturb, cfg.top_k,
                                            sampling, cfg.max_len, cfg.seed);
      brts::RngStream tier2_rng(brts::derive_seed(cfg.seed, brts::StreamTag::tier2, task.id));
      const brts::SelectionOutcome outcome =
          brts::select(student, teacher, vocab, task, pool, !sel_no_tier2, cfg.top_k, sampling,
                       cfg.max_len, tier2_rng);

      std::ostringstream text;
      text << "task " << brts::format_task_line(task) << "\n";
      for (std::size_t i = 0; i < pool.size(); ++i)
        text << "candidate " << i << " source " << brts::to_string(pool[i].source) << " correct "
             << (pool[i].correct ? 1 : 0) << " overlap "
             << brts::fmt_g17(
                    brts::overlap_score(student, task.prompt, pool[i], cfg.top_k))
             << " len " << pool[i].tokens.size() << " answer "
             << answer_text(vocab, pool[i].extracted_answer) << "\n";
      text << "chosen tier " << outcome.tier << " source " << brts::to_string(outcome.chosen.source)
           << " correct " << (outcome.chosen.correct ? 1 : 0) << " overlap "
           << brts::fmt_g17(outcome.overlap) << " answer "
           << answer_text(vocab, outcome.chosen.extracted_answer) << "\n"
           << "pool_correct " << outcome.pool_correct_count << " of " << outcome.pool_size
           << "\n";
      write_text(out / "selection.txt", text.str());
      manifest.finalize();
      std::cout << text.str();
    } else if (*cmd_catchrate) {
      Manifest manifest(out, "catchrate", cfg);
      std::ostringstream table;
      std::ostringstream display;
      if (cr_p_hat >= 0.0) {
        if (cr_p_hat > 1.0) throw std::invalid_argument("catchrate: --p-hat must be in [0, 1]");
        table << "# n iid_baseline\n";
        display << "# n iid_baseline\n";
        for (int n = 1; n <= cr_n_max; ++n) {
          const double b = brts::iid_baseline(cr_p_hat, n);
          table << n << " " << brts::fmt_g17(b) << "\n";
          char rounded[32];
          std::snprintf(rounded, sizeof rounded, "%.4f", b);
          display << n << " " << rounded << "\n";
        }
      } else {
        if (cr_checkpoint.empty())
          throw std::invalid_argument("catchrate: pass --checkpoint or --p-hat");
        const brts::PolicyParams teacher = brts::load_policy(cr_checkpoint);
        const auto tasks = brts::make_task_set(vocab, cfg, cfg.seed,
                                               brts::StreamTag::heldout_task, cr_num_tasks);
        const brts::CatchRateCurve curve = brts::catch_rate_analysis(
            teacher, vocab, tasks, cr_n_max, brts::catch_mode_from_string(cr_mode),
            {cfg.teacher_temperature, cfg.teacher_top_p}, cfg.max_len,
            brts::derive_seed(cfg.seed, brts::StreamTag::catch_rate), cfg.threads);
        table << brts::format_catch_table(curve);
        display << table.str();
      }
      write_text(out / ("catchrate_" + (cr_p_hat >= 0.0 ? std::string("analytic") : cr_mode) +
                        ".txt"),
                 table.str());
      manifest.finalize();
      std::cout << display.str();
    } else if (*cmd_gradcheck) {
      Manifest manifest(out, "gradcheck", cfg);
      const brts::GradCheckReport report = brts::run_gradcheck(cfg.seed, gc_cases);
      std::ostringstream text;
      text << "cases " << report.cases << "\nfailures " << report.failures << "\nmax_rel_err "
           << brts::fmt_g17(report.max_rel_err) << "\n";
      for (const auto& note : report.failure_notes) text << "failure " << note << "\n";
      write_text(out / "gradcheck.txt", text.str());
      manifest.gates()["failures"] = report.failures;
      manifest.gates()["max_rel_err"] = report.max_rel_err;
      manifest.finalize();
      std::cout << text.str();
      if (report.failures > 0) {
        std::cerr << "error: " << report.failures << " gradient case(s) exceeded the 1e-5 gate\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

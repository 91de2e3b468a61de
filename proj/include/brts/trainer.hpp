#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "brts/config.hpp"
#include "brts/evaluator.hpp"
#include "brts/losses.hpp"
#include "brts/parallel.hpp"
#include "brts/policy.hpp"
#include "brts/rollout.hpp"
#include "brts/selector.hpp"
#include "brts/vocab_tasks.hpp"

namespace brts {

// Plain gradient descent on the logit table. Rows are created on demand.
inline void apply_update(PolicyParams& params, const GradAccumulator& grad, double lr) {
  if (lr == 0.0) return;
  for (const auto& [key, g] : grad.grads) {
    auto& row = params.ensure_row(key);
    for (std::size_t v = 0; v < g.size(); ++v) row[v] -= lr * g[v];
  }
}

// One training step's bookkeeping. Wall time is measured; everything else is
// a pure function of (params, batch, config, step_seed).
struct StepRecord {
  int step = 0;
  LossBreakdown loss;  // batch means
  double tier1_frac = 0.0, tier2_frac = 0.0, tier3_frac = 0.0;
  std::vector<int> tiers;  // per-task tiers, empty when the teacher branch is off
  double mean_len_student = 0.0, mean_len_teacher = 0.0;
  double wall_ms = 0.0;
  std::uint64_t step_seed = 0;
};

namespace detail {

struct TaskWork {
  LossBreakdown breakdown;
  GradAccumulator grad;
  int tier = 0;
  double student_len = 0.0;
  double teacher_len = 0.0;
};

// Shared core of the two step flavors: per-task rollouts, optional selection,
// losses, then one batch-mean gradient-descent update. Per-task work may run
// in parallel; the reduction walks tasks in fixed order so the update is
// independent of the thread count.
inline StepRecord run_step(PolicyParams& student, const PolicyParams& teacher,
                           const Vocabulary& vocab, std::span<const TaskInstance> batch,
                           const TrainConfig& cfg, std::uint64_t step_seed, bool teacher_branch) {
  if (batch.empty()) throw std::invalid_argument("training step: batch must be nonempty");
  const auto t0 = std::chrono::steady_clock::now();

  const SamplingConfig student_sampling{cfg.student_temperature, cfg.student_top_p};
  const SamplingConfig teacher_sampling{cfg.teacher_temperature, cfg.teacher_top_p};

  std::vector<TaskWork> work(batch.size());
  parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
    const TaskInstance& task = batch[i];
    TaskWork& w = work[i];

    BranchLoss stu;
    stu.grad = GradAccumulator(student.vocab_size);
    double len_sum = 0.0;
    for (int r = 0; r < cfg.student_rollouts; ++r) {
      RngStream rng(derive_seed(step_seed, StreamTag::student_rollout, task.id,
                                static_cast<std::uint64_t>(r)));
      const Trajectory y_hat = generate(student, vocab, task, task.prompt,
                                        {SourceKind::student, -1}, cfg.top_k, student_sampling,
                                        cfg.max_len, rng);
      len_sum += static_cast<double>(y_hat.tokens.size());
      const BranchLoss one = loss_stu_ctx(student, teacher, task.prompt, y_hat, cfg.top_k);
      stu.value += one.value / cfg.student_rollouts;
      stu.grad.merge(one.grad, 1.0 / cfg.student_rollouts);
      stu.per_position.insert(stu.per_position.end(), one.per_position.begin(),
                              one.per_position.end());
    }
    w.student_len = len_sum / cfg.student_rollouts;

    if (teacher_branch) {
      const auto pool = generate_pool(teacher, vocab, task, cfg.candidates, cfg.perturb_one,
                                      cfg.top_k, teacher_sampling, cfg.max_len, step_seed);
      RngStream tier2_rng(derive_seed(step_seed, StreamTag::tier2, task.id));
      const SelectionOutcome outcome =
          select(student, teacher, vocab, task, pool, cfg.tier2_enabled, cfg.top_k,
                 teacher_sampling, cfg.max_len, tier2_rng);
      const BranchLoss tea =
          loss_tea_ctx(student, teacher, task.prompt, outcome.chosen, cfg.top_k);
      w.tier = outcome.tier;
      w.teacher_len = static_cast<double>(outcome.chosen.tokens.size());
      TotalLoss total = loss_total(stu, &tea, cfg.lambda);
      w.breakdown = std::move(total.breakdown);
      w.grad = std::move(total.grad);
    } else {
      TotalLoss total = loss_total(stu, nullptr, cfg.lambda);
      w.breakdown = std::move(total.breakdown);
      w.grad = std::move(total.grad);
    }
  });

  StepRecord record;
  record.step_seed = step_seed;
  record.loss.lambda = cfg.lambda;
  GradAccumulator batch_grad(student.vocab_size);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  for (const TaskWork& w : work) {
    batch_grad.merge(w.grad, 1.0);
    record.loss.stu_ctx += w.breakdown.stu_ctx;
    record.loss.tea_ctx += w.breakdown.tea_ctx;
    record.loss.total += w.breakdown.total;
    record.mean_len_student += w.student_len;
    record.mean_len_teacher += w.teacher_len;
    if (teacher_branch) record.tiers.push_back(w.tier);
  }
  batch_grad.scale(inv_batch);
  record.loss.stu_ctx *= inv_batch;
  record.loss.tea_ctx *= inv_batch;
  record.loss.total *= inv_batch;
  record.mean_len_student *= inv_batch;
  record.mean_len_teacher *= inv_batch;
  if (teacher_branch) {
    int counts[4] = {0, 0, 0, 0};
    for (const int t : record.tiers) ++counts[t];
    record.tier1_frac = counts[1] * inv_batch;
    record.tier2_frac = counts[2] * inv_batch;
    record.tier3_frac = counts[3] * inv_batch;
  }

  apply_update(student, batch_grad, cfg.learning_rate);
  record.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return record;
}

}  // namespace detail

// Full training step: student rollout (student-context branch) plus one
// curated teacher trajectory (teacher-context branch, weighted by lambda).
inline StepRecord brts_step(PolicyParams& student, const PolicyParams& teacher,
                            const Vocabulary& vocab, std::span<const TaskInstance> batch,
                            const TrainConfig& cfg, std::uint64_t step_seed) {
  return detail::run_step(student, teacher, vocab, batch, cfg, step_seed,
                          cfg.teacher_rollouts == 1);
}

// Student-rollouts-only baseline: the loss is the equally weighted mean of the
// student-context branch over cfg.student_rollouts rollouts per task.
inline StepRecord opd_baseline_step(PolicyParams& student, const PolicyParams& teacher,
                                    const Vocabulary& vocab, std::span<const TaskInstance> batch,
                                    const TrainConfig& cfg, std::uint64_t step_seed) {
  return detail::run_step(student, teacher, vocab, batch, cfg, step_seed, false);
}

// --- policy preparation ----------------------------------------------------

// Greedy accuracy: near-zero temperature makes sampling pick the argmax at
// every position.
inline double greedy_accuracy(const PolicyParams& policy, const Vocabulary& vocab,
                              std::span<const TaskInstance> tasks, int max_len,
                              std::uint64_t seed, int threads = 1) {
  return evaluate(policy, vocab, tasks, 1, SamplingConfig{1e-9, 1.0}, max_len, seed, threads)
      .mean;
}

inline std::vector<TaskInstance> make_task_set(const Vocabulary& vocab, const TrainConfig& cfg,
                                               std::uint64_t seed, StreamTag tag, int count) {
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t task_seed = derive_seed(seed, tag, static_cast<std::uint64_t>(i));
    RngStream pick(derive_seed(task_seed, 0x00dfull));
    const int difficulty =
        cfg.difficulty_min +
        static_cast<int>(pick.next_below(
            static_cast<std::uint64_t>(cfg.difficulty_max - cfg.difficulty_min + 1)));
    tasks.push_back(generate_task(vocab, task_seed, difficulty));
  }
  return tasks;
}

namespace detail {

// Demonstration continuations for supervised pretraining, as (issuing prompt,
// continuation) pairs. Plain and hinted prompts are continued with
// ANSWER_MARK + answer + EOS. The perturbed prompt restates the answer before
// boxing it; with a window of 3 the operand would otherwise have scrolled out
// of context by the time the boxed digit is emitted.
inline std::vector<std::pair<const TokenSeq*, TokenSeq>> demonstrations(
    const TaskInstance& task, bool include_perturbed) {
  std::vector<std::pair<const TokenSeq*, TokenSeq>> out;
  TokenSeq boxed;
  boxed.push_back(Vocabulary::answer_mark);
  boxed.insert(boxed.end(), task.ground_truth.begin(), task.ground_truth.end());
  boxed.push_back(Vocabulary::eos);
  out.emplace_back(&task.prompt, boxed);
  out.emplace_back(&task.hint_prompt, boxed);
  if (include_perturbed) {
    TokenSeq restated = task.ground_truth;
    restated.insert(restated.end(), boxed.begin(), boxed.end());
    out.emplace_back(&task.perturbed_prompt, std::move(restated));
  }
  return out;
}

// One step of token-mean maximum likelihood on a batch of fresh tasks:
// grad = softmax(context) - onehot(target) at every continuation position.
inline void mle_step(PolicyParams& params, const Vocabulary& vocab, const TrainConfig& cfg,
                     std::uint64_t step_seed, double lr) {
  GradAccumulator grad(params.vocab_size);
  std::vector<std::pair<ContextKey, Token>> targets;
  for (int i = 0; i < cfg.pretrain_batch; ++i) {
    const std::uint64_t task_seed =
        derive_seed(step_seed, StreamTag::pretrain_task, static_cast<std::uint64_t>(i));
    RngStream pick(derive_seed(task_seed, 0x00dfull));
    const int difficulty =
        cfg.difficulty_min +
        static_cast<int>(pick.next_below(
            static_cast<std::uint64_t>(cfg.difficulty_max - cfg.difficulty_min + 1)));
    const TaskInstance task = generate_task(vocab, task_seed, difficulty);
    for (const auto& [prompt, continuation] :
         demonstrations(task, cfg.pretrain_include_perturbed)) {
      TokenSeq prefix = *prompt;
      for (const Token target : continuation) {
        targets.emplace_back(params.context_key(prefix), target);
        prefix.push_back(target);
      }
    }
  }
  const double inv_positions = 1.0 / static_cast<double>(targets.size());
  for (const auto& [key, target] : targets) {
    const std::vector<double>* row = params.find_row(key);
    // softmax of the current row, inline to reuse the packed key
    std::vector<double> g(static_cast<std::size_t>(params.vocab_size));
    double max_logit = 0.0;
    if (row) max_logit = *std::max_element(row->begin(), row->end());
    double sum = 0.0;
    for (std::size_t v = 0; v < g.size(); ++v) {
      g[v] = std::exp((row ? (*row)[v] : 0.0) - max_logit);
      sum += g[v];
    }
    for (auto& v : g) v /= sum;
    g[static_cast<std::size_t>(target)] -= 1.0;
    grad.add(key, g, inv_positions);
  }
  apply_update(params, grad, lr);
}

}  // namespace detail

struct PretrainResult {
  PolicyParams params;
  double accuracy = 0.0;  // greedy accuracy on the gate task set
  int steps_run = 0;
};

// Supervised maximum likelihood for the full configured budget, then the
// greedy-accuracy gate on a held-out gate set. The budget is not cut short at
// the gate: greedy accuracy saturates long before the distribution itself is
// confident enough to be a useful sampling and distillation target.
inline PretrainResult pretrain_teacher(const Vocabulary& vocab, const TrainConfig& cfg,
                                       std::uint64_t seed) {
  PretrainResult result;
  result.params = PolicyParams(cfg.vocab_size, cfg.context_window, Role::teacher);
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    detail::mle_step(result.params, vocab, cfg,
                     derive_seed(seed, StreamTag::step, static_cast<std::uint64_t>(step)),
                     cfg.pretrain_learning_rate);
    result.steps_run = step + 1;
  }
  const auto gate_tasks =
      make_task_set(vocab, cfg, seed, StreamTag::gate_task, cfg.pretrain_gate_tasks);
  result.accuracy = greedy_accuracy(result.params, vocab, gate_tasks, cfg.max_len,
                                    derive_seed(seed, StreamTag::eval), cfg.threads);
  if (result.accuracy < cfg.pretrain_target_accuracy)
    throw std::runtime_error(
        "teacher pretraining missed the accuracy gate: " + fmt_g17(result.accuracy) + " < " +
        fmt_g17(cfg.pretrain_target_accuracy) + " after " +
        std::to_string(cfg.pretrain_steps) + " steps");
  return result;
}

// Weak student: the teacher protocol truncated to a few steps, plus Gaussian
// logit noise. The noise scale doubles until the greedy accuracy drops under
// the configured ceiling.
inline PretrainResult init_student(const Vocabulary& vocab, const TrainConfig& cfg,
                                   std::uint64_t seed) {
  PolicyParams base(cfg.vocab_size, cfg.context_window, Role::student);
  for (int step = 0; step < cfg.student_init_steps; ++step)
    detail::mle_step(base, vocab, cfg,
                     derive_seed(seed, StreamTag::step, static_cast<std::uint64_t>(step)),
                     cfg.pretrain_learning_rate);
  const auto gate_tasks =
      make_task_set(vocab, cfg, seed, StreamTag::gate_task, cfg.pretrain_gate_tasks);

  double noise = cfg.student_init_noise;
  for (int attempt = 0; attempt < 8; ++attempt) {
    PretrainResult result;
    result.params = base;
    result.steps_run = cfg.student_init_steps;
    RngStream rng(derive_seed(seed, StreamTag::student_noise, static_cast<std::uint64_t>(attempt)));
    for (auto& [key, row] : result.params.logits)
      for (double& v : row) v += noise * rng.next_gaussian();
    result.accuracy = greedy_accuracy(result.params, vocab, gate_tasks, cfg.max_len,
                                      derive_seed(seed, StreamTag::eval), cfg.threads);
    if (result.accuracy <= cfg.student_init_max_accuracy) return result;
    noise *= 2.0;
  }
  throw std::runtime_error("student initialization stayed above the accuracy ceiling " +
                           fmt_g17(cfg.student_init_max_accuracy));
}

// --- run loop ----------------------------------------------------------------

struct TrainResult {
  std::filesystem::path run_dir;
  EvalReport final_eval;
  double teacher_accuracy = 0.0;
  double student_init_accuracy = 0.0;
  std::vector<std::string> files;  // names written under run_dir
};

namespace detail {

inline std::string step_log_line(const StepRecord& r, const EvalReport* eval) {
  std::ostringstream out;
  out << "step=" << r.step;
  if (r.step > 0) {
    out << " stu_ctx=" << fmt_g17(r.loss.stu_ctx) << " tea_ctx=" << fmt_g17(r.loss.tea_ctx)
        << " total=" << fmt_g17(r.loss.total) << " lambda=" << fmt_g17(r.loss.lambda)
        << " tier1_frac=" << fmt_g17(r.tier1_frac) << " tier2_frac=" << fmt_g17(r.tier2_frac)
        << " tier3_frac=" << fmt_g17(r.tier3_frac)
        << " mean_len_student=" << fmt_g17(r.mean_len_student)
        << " mean_len_teacher=" << fmt_g17(r.mean_len_teacher);
  }
  if (eval != nullptr)
    out << " eval_mean=" << fmt_g17(eval->mean) << " eval_best=" << fmt_g17(eval->best_at_k)
        << " eval_majority=" << fmt_g17(eval->majority_at_k);
  return out.str();
}

}  // namespace detail

// Runs cfg.steps training steps with periodic evaluation and checkpointing,
// writing the run log, the eval series, the held-out task set, and the
// resolved config under run_dir. Wall-clock timings go to a separate file so
// every other artifact is byte-reproducible for a given (config, seed) at any
// thread count.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& run_dir) {
  validate_config(cfg);
  std::error_code ec;
  std::filesystem::create_directories(run_dir, ec);
  const std::filesystem::path log_path = run_dir / "run_log.txt";
  std::ofstream log(log_path);
  if (ec || !log) throw std::runtime_error("cannot write run directory: " + run_dir.string());
  std::ofstream timing(run_dir / "timing.txt");
  std::ofstream eval_series(run_dir / "eval_series.txt");
  eval_series << "# step mean best majority\n";

  TrainResult result;
  result.run_dir = run_dir;

  const Vocabulary vocab(cfg.vocab_size);
  PolicyParams teacher, student;
  if (!cfg.teacher_checkpoint.empty()) {
    teacher = load_policy(cfg.teacher_checkpoint);
    const auto gate_tasks =
        make_task_set(vocab, cfg, cfg.seed, StreamTag::gate_task, cfg.pretrain_gate_tasks);
    result.teacher_accuracy = greedy_accuracy(teacher, vocab, gate_tasks, cfg.max_len,
                                              derive_seed(cfg.seed, StreamTag::eval),
                                              cfg.threads);
  } else {
    PretrainResult pre = pretrain_teacher(vocab, cfg, cfg.seed);
    teacher = std::move(pre.params);
    result.teacher_accuracy = pre.accuracy;
  }
  if (!cfg.student_checkpoint.empty()) {
    student = load_policy(cfg.student_checkpoint);
    const auto gate_tasks =
        make_task_set(vocab, cfg, cfg.seed, StreamTag::gate_task, cfg.pretrain_gate_tasks);
    result.student_init_accuracy = greedy_accuracy(student, vocab, gate_tasks, cfg.max_len,
                                                   derive_seed(cfg.seed, StreamTag::eval),
                                                   cfg.threads);
  } else {
    PretrainResult init = init_student(vocab, cfg, derive_seed(cfg.seed, 0x57addull));
    student = std::move(init.params);
    result.student_init_accuracy = init.accuracy;
  }
  student.role = Role::student;

  const auto heldout =
      make_task_set(vocab, cfg, cfg.seed, StreamTag::heldout_task, cfg.eval_tasks);
  save_tasks((run_dir / "eval_tasks.txt").string(), heldout);
  {
    std::ofstream cfg_out(run_dir / "config_resolved.txt");
    cfg_out << format_config(cfg);
  }
  save_policy(teacher, run_dir / "teacher");
  result.files = {"run_log.txt", "timing.txt", "eval_series.txt", "eval_tasks.txt",
                  "config_resolved.txt", "teacher"};

  const SamplingConfig eval_sampling{cfg.eval_temperature, cfg.eval_top_p};
  const auto run_eval = [&](int step) {
    const EvalReport report =
        evaluate(student, vocab, heldout, cfg.eval_k, eval_sampling, cfg.max_len,
                 derive_seed(cfg.seed, StreamTag::eval, static_cast<std::uint64_t>(step)),
                 cfg.threads);
    eval_series << step << " " << fmt_g17(report.mean) << " " << fmt_g17(report.best_at_k) << " "
                << fmt_g17(report.majority_at_k) << "\n";
    return report;
  };
  const auto checkpoint = [&](int step) {
    const std::string name = "student_step" + std::to_string(step);
    save_policy(student, run_dir / name);
    result.files.push_back(name);
  };

  EvalReport eval0 = run_eval(0);
  StepRecord initial;
  initial.step = 0;
  log << detail::step_log_line(initial, &eval0) << "\n";
  checkpoint(0);
  result.final_eval = eval0;

  for (int step = 1; step <= cfg.steps; ++step) {
    const std::uint64_t step_seed =
        derive_seed(cfg.seed, StreamTag::step, static_cast<std::uint64_t>(step));
    const auto batch = make_task_set(
        vocab, cfg, derive_seed(cfg.seed, StreamTag::train_task, static_cast<std::uint64_t>(step)),
        StreamTag::train_task, cfg.batch_size);
    StepRecord record = cfg.mode == "baseline"
                            ? opd_baseline_step(student, teacher, vocab, batch, cfg, step_seed)
                            : brts_step(student, teacher, vocab, batch, cfg, step_seed);
    record.step = step;
    timing << "step=" << step << " wall_ms=" << fmt_g17(record.wall_ms) << "\n";

    const bool eval_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps;
    if (eval_now) {
      const EvalReport report = run_eval(step);
      log << detail::step_log_line(record, &report) << "\n";
      result.final_eval = report;
    } else {
      log << detail::step_log_line(record, nullptr) << "\n";
    }
    const bool checkpoint_now =
        (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps;
    if (checkpoint_now) checkpoint(step);
  }
  return result;
}

}  // namespace brts

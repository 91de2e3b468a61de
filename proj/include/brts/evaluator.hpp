#pragma once

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "brts/parallel.hpp"
#include "brts/policy.hpp"
#include "brts/rollout.hpp"
#include "brts/vocab_tasks.hpp"

namespace brts {

struct PerTaskMetrics {
  double mean = 0.0;
  double best = 0.0;
  double majority = 0.0;
};

// mean: fraction of samples whose answer equals the ground truth.
// best: 1 if any sample is correct.
// majority: 1 if the ground truth is the strict plurality among extracted
// answers; absent answers are excluded from the vote and ties count as
// incorrect.
inline PerTaskMetrics per_task_metrics(std::span<const std::optional<TokenSeq>> answers,
                                       const TokenSeq& ground_truth) {
  if (answers.empty()) throw std::invalid_argument("per_task_metrics: no samples");
  int correct = 0;
  std::map<TokenSeq, int> votes;
  for (const auto& a : answers) {
    if (!a.has_value()) continue;
    ++votes[*a];
    if (*a == ground_truth) ++correct;
  }
  PerTaskMetrics m;
  m.mean = static_cast<double>(correct) / static_cast<double>(answers.size());
  m.best = correct > 0 ? 1.0 : 0.0;
  const auto gt_it = votes.find(ground_truth);
  if (gt_it != votes.end()) {
    bool strict = true;
    for (const auto& [answer, count] : votes)
      if (answer != ground_truth && count >= gt_it->second) strict = false;
    m.majority = strict ? 1.0 : 0.0;
  }
  return m;
}

struct DifficultyStats {
  double mean = 0.0, best = 0.0, majority = 0.0;
  int tasks = 0;
};

struct EvalReport {
  double mean = 0.0;
  double best_at_k = 0.0;
  double majority_at_k = 0.0;
  int k = 0;
  int task_count = 0;
  std::map<int, DifficultyStats> per_difficulty;
};

// Samples k solutions per task and averages the per-task metrics. Streams are
// derived per (task slot, sample), so the report is a pure function of
// (policy, tasks, k, seed).
inline EvalReport evaluate(const PolicyParams& policy, const Vocabulary& vocab,
                           std::span<const TaskInstance> tasks, int k,
                           const SamplingConfig& sampling, int max_len, std::uint64_t seed,
                           int threads = 1) {
  if (k < 1) throw std::invalid_argument("evaluate: k must be >= 1");
  if (tasks.empty()) throw std::invalid_argument("evaluate: task set must be nonempty");

  std::vector<PerTaskMetrics> metrics(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t slot) {
    const TaskInstance& task = tasks[slot];
    std::vector<std::optional<TokenSeq>> answers;
    answers.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      RngStream rng(derive_seed(seed, StreamTag::eval, static_cast<std::uint64_t>(slot),
                                static_cast<std::uint64_t>(i)));
      answers.push_back(generate(policy, vocab, task, task.prompt, {SourceKind::student, -1}, 1,
                                 sampling, max_len, rng)
                            .extracted_answer);
    }
    metrics[slot] = per_task_metrics(answers, task.ground_truth);
  });

  EvalReport report;
  report.k = k;
  report.task_count = static_cast<int>(tasks.size());
  for (std::size_t slot = 0; slot < tasks.size(); ++slot) {
    report.mean += metrics[slot].mean;
    report.best_at_k += metrics[slot].best;
    report.majority_at_k += metrics[slot].majority;
    auto& d = report.per_difficulty[tasks[slot].difficulty];
    d.mean += metrics[slot].mean;
    d.best += metrics[slot].best;
    d.majority += metrics[slot].majority;
    ++d.tasks;
  }
  const double n = static_cast<double>(tasks.size());
  report.mean /= n;
  report.best_at_k /= n;
  report.majority_at_k /= n;
  for (auto& [difficulty, d] : report.per_difficulty) {
    d.mean /= d.tasks;
    d.best /= d.tasks;
    d.majority /= d.tasks;
  }
  return report;
}

}  // namespace brts

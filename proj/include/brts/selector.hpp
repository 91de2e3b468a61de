#pragma once

#include <cmath>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "brts/parallel.hpp"
#include "brts/policy.hpp"
#include "brts/rollout.hpp"
#include "brts/vocab_tasks.hpp"

namespace brts {

// Fraction of the trajectory's tokens that fall inside the student's top-K
// candidate set, with the student's temperature-1 distribution evaluated at
// each prefix of the candidate trajectory under the plain task prompt.
inline double overlap_score(const PolicyParams& student, std::span<const Token> prompt,
                            const Trajectory& y, int top_k) {
  if (y.tokens.empty()) throw std::invalid_argument("overlap_score: empty trajectory");
  TokenSeq prefix(prompt.begin(), prompt.end());
  int hits = 0;
  for (const Token tok : y.tokens) {
    const auto cand = top_k_set(next_dist(student, prefix, 1.0), top_k);
    for (const Token c : cand)
      if (c == tok) {
        ++hits;
        break;
      }
    prefix.push_back(tok);
  }
  return static_cast<double>(hits) / static_cast<double>(y.tokens.size());
}

// Result of curating one auxiliary trajectory for a task.
//   tier 1: correct Tier-1 candidate with the highest student overlap
//   tier 2: hint-guided recovery rollout that graded correct
//   tier 3: best-overlap Tier-1 candidate despite being incorrect
struct SelectionOutcome {
  Trajectory chosen;
  int tier = 0;
  double overlap = 0.0;
  int pool_correct_count = 0;
  int pool_size = 0;
};

// Correctness first, student alignment second. Ties in overlap go to the
// lowest candidate index. Exactly one Tier-2 attempt is made per failed pool.
inline SelectionOutcome select(const PolicyParams& student, const PolicyParams& teacher,
                               const Vocabulary& vocab, const TaskInstance& task,
                               const std::vector<Trajectory>& pool, bool tier2_enabled,
                               int top_k, const SamplingConfig& tier2_sampling, int max_len,
                               RngStream& tier2_rng) {
  if (pool.empty()) throw std::invalid_argument("select: pool must be nonempty");

  std::vector<double> overlaps;
  overlaps.reserve(pool.size());
  for (const auto& y : pool) overlaps.push_back(overlap_score(student, task.prompt, y, top_k));

  SelectionOutcome outcome;
  outcome.pool_size = static_cast<int>(pool.size());
  for (const auto& y : pool) outcome.pool_correct_count += y.correct ? 1 : 0;

  int best_correct = -1, best_any = -1;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (best_any < 0 || overlaps[i] > overlaps[static_cast<std::size_t>(best_any)])
      best_any = static_cast<int>(i);
    if (pool[i].correct &&
        (best_correct < 0 || overlaps[i] > overlaps[static_cast<std::size_t>(best_correct)]))
      best_correct = static_cast<int>(i);
  }

  if (best_correct >= 0) {
    outcome.tier = 1;
    outcome.chosen = pool[static_cast<std::size_t>(best_correct)];
    outcome.overlap = overlaps[static_cast<std::size_t>(best_correct)];
    return outcome;
  }

  if (tier2_enabled) {
    Trajectory guided = generate(teacher, vocab, task, task.hint_prompt,
                                 {SourceKind::teacher_tier2, -1}, top_k, tier2_sampling,
                                 max_len, tier2_rng);
    if (guided.correct) {
      outcome.tier = 2;
      outcome.overlap = overlap_score(student, task.prompt, guided, top_k);
      outcome.chosen = std::move(guided);
      return outcome;
    }
  }

  outcome.tier = 3;
  outcome.chosen = pool[static_cast<std::size_t>(best_any)];
  outcome.chosen.source.kind = SourceKind::teacher_tier3_fallback;
  outcome.overlap = overlaps[static_cast<std::size_t>(best_any)];
  return outcome;
}

// Fractions of outcomes per tier; the three fractions sum to 1.
struct TierFractions {
  double tier1 = 0.0, tier2 = 0.0, tier3 = 0.0;
};

inline TierFractions tier_composition(std::span<const SelectionOutcome> outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("tier_composition: empty input");
  int counts[4] = {0, 0, 0, 0};
  for (const auto& o : outcomes) {
    if (o.tier < 1 || o.tier > 3) throw std::invalid_argument("tier_composition: bad tier");
    ++counts[o.tier];
  }
  const double n = static_cast<double>(outcomes.size());
  return {counts[1] / n, counts[2] / n, counts[3] / n};
}

// --- best-of-n catch-rate analysis ----------------------------------------

// Probability that at least one of n independent draws at success rate p_hat
// succeeds.
inline double iid_baseline(double p_hat, int n) {
  return 1.0 - std::pow(1.0 - p_hat, static_cast<double>(n));
}

struct CatchRateCurve {
  std::vector<int> n_values;
  std::vector<double> observed;
  std::vector<double> iid_baseline;
};

// fixed_prompt: all n samples condition on the same prompt.
// iid_resample: each sample is drawn from a freshly regenerated task of the
//               same difficulty and graded against that task, giving a Monte
//               Carlo stand-in for fully independent draws.
// perturb_one:  like fixed_prompt, but the second sample (index 1) uses the
//               perturbed prompt so it already participates at n = 2.
enum class CatchMode { fixed_prompt, iid_resample, perturb_one };

inline std::string to_string(CatchMode m) {
  switch (m) {
    case CatchMode::fixed_prompt: return "fixed_prompt";
    case CatchMode::iid_resample: return "iid_resample";
    case CatchMode::perturb_one: return "perturb_one";
  }
  return "?";
}

inline CatchMode catch_mode_from_string(const std::string& s) {
  if (s == "fixed_prompt") return CatchMode::fixed_prompt;
  if (s == "iid_resample") return CatchMode::iid_resample;
  if (s == "perturb_one") return CatchMode::perturb_one;
  throw std::invalid_argument("unknown catch-rate mode: '" + s + "'");
}

// For each n in 1..n_max, the fraction of tasks with at least one correct
// rollout among the first n samples, plus the analytic baseline derived from
// the observed n = 1 rate. Streams are derived per (task slot, sample index),
// so the curve is independent of the parallelism degree.
inline CatchRateCurve catch_rate_analysis(const PolicyParams& teacher, const Vocabulary& vocab,
                                          std::span<const TaskInstance> tasks, int n_max,
                                          CatchMode mode, const SamplingConfig& sampling,
                                          int max_len, std::uint64_t seed, int threads = 1) {
  if (n_max < 1) throw std::invalid_argument("catch_rate_analysis: n_max must be >= 1");
  if (tasks.empty()) throw std::invalid_argument("catch_rate_analysis: task set must be nonempty");

  std::vector<std::vector<char>> correct(tasks.size(),
                                         std::vector<char>(static_cast<std::size_t>(n_max), 0));
  parallel_for(tasks.size(), threads, [&](std::size_t slot) {
    const TaskInstance& task = tasks[slot];
    for (int i = 0; i < n_max; ++i) {
      RngStream rng(derive_seed(seed, StreamTag::catch_rate, static_cast<std::uint64_t>(slot),
                                static_cast<std::uint64_t>(i)));
      bool ok = false;
      if (mode == CatchMode::iid_resample) {
        const TaskInstance fresh =
            generate_task(vocab, derive_seed(seed, StreamTag::catch_task,
                                             static_cast<std::uint64_t>(slot),
                                             static_cast<std::uint64_t>(i)),
                          task.difficulty);
        ok = generate(teacher, vocab, fresh, fresh.prompt, {SourceKind::teacher_tier1, i}, 1,
                      sampling, max_len, rng)
                 .correct;
      } else {
        const bool perturbed = mode == CatchMode::perturb_one && i == 1;
        const auto& prompt = perturbed ? task.perturbed_prompt : task.prompt;
        ok = generate(teacher, vocab, task, prompt, {SourceKind::teacher_tier1, i}, 1, sampling,
                      max_len, rng)
                 .correct;
      }
      correct[slot][static_cast<std::size_t>(i)] = ok ? 1 : 0;
    }
  });

  CatchRateCurve curve;
  for (int n = 1; n <= n_max; ++n) {
    int caught = 0;
    for (const auto& flags : correct) {
      bool any = false;
      for (int i = 0; i < n; ++i) any = any || flags[static_cast<std::size_t>(i)];
      caught += any ? 1 : 0;
    }
    curve.n_values.push_back(n);
    curve.observed.push_back(static_cast<double>(caught) / static_cast<double>(tasks.size()));
  }
  const double p_hat = curve.observed.front();
  for (int n = 1; n <= n_max; ++n) curve.iid_baseline.push_back(iid_baseline(p_hat, n));
  return curve;
}

// Plot-data table: one "n observed baseline" row per n.
inline std::string format_catch_table(const CatchRateCurve& curve) {
  std::ostringstream out;
  out << "# n observed iid_baseline\n";
  for (std::size_t i = 0; i < curve.n_values.size(); ++i)
    out << curve.n_values[i] << " " << fmt_g17(curve.observed[i]) << " "
        << fmt_g17(curve.iid_baseline[i]) << "\n";
  return out.str();
}

}  // namespace brts

#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "brts/losses.hpp"
#include "brts/policy.hpp"
#include "brts/rng.hpp"
#include "brts/rollout.hpp"

namespace brts {

// Central-finite-difference verification of the analytic loss gradients on
// randomized (params, trajectory) cases. The check only evaluates loss
// values, never the analytic gradient path, so it stays an independent
// reference for it.
struct GradCheckReport {
  int cases = 0;
  int failures = 0;
  double max_rel_err = 0.0;
  std::vector<std::string> failure_notes;
};

namespace detail {

inline void randomize_row(std::vector<double>& row, RngStream& rng) {
  for (double& v : row) v = 4.0 * rng.next_double() - 2.0;
}

// Fills the row, redrawing until every pair of logits is separated by much
// more than the finite-difference step. The top-K candidate set is discrete,
// so the losses are differentiable only away from ties; a near-tie would flip
// set membership under the probe and invalidate the comparison.
inline void randomize_row_tie_free(std::vector<double>& row, RngStream& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    randomize_row(row, rng);
    std::vector<double> sorted = row;
    std::sort(sorted.begin(), sorted.end());
    double min_gap = 1.0;
    for (std::size_t i = 1; i < sorted.size(); ++i)
      min_gap = std::min(min_gap, sorted[i] - sorted[i - 1]);
    if (min_gap > 1e-3) return;
  }
}

// Relative error with a unit floor, so coordinates with near-zero gradient are
// compared on an absolute scale.
inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

}  // namespace detail

// Runs `cases` randomized checks per loss branch over vocab sizes 3..20 with
// step 1e-6 and gate 1e-5. Every logit coordinate of every context visited by
// the loss is perturbed both ways.
inline GradCheckReport run_gradcheck(std::uint64_t seed, int cases) {
  constexpr double kStep = 1e-6;
  constexpr double kGate = 1e-5;
  GradCheckReport report;

  for (int branch = 0; branch < 2; ++branch) {
    const bool student_branch = branch == 0;
    for (int c = 0; c < cases; ++c) {
      RngStream rng(derive_seed(seed, static_cast<std::uint64_t>(branch),
                                static_cast<std::uint64_t>(c)));
      const int vocab = 3 + static_cast<int>(rng.next_below(18));  // 3..20
      const int window = 1 + static_cast<int>(rng.next_below(3));
      PolicyParams student(vocab, window, Role::student);
      PolicyParams teacher(vocab, window, Role::teacher);
      const int top_k = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(vocab)));

      TokenSeq prompt{Vocabulary::bos};
      const int prompt_extra = static_cast<int>(rng.next_below(3));
      for (int i = 0; i < prompt_extra; ++i)
        prompt.push_back(static_cast<Token>(rng.next_below(static_cast<std::uint64_t>(vocab))));

      Trajectory y;
      y.source = {student_branch ? SourceKind::student : SourceKind::teacher_tier1, 0};
      const int len = 1 + static_cast<int>(rng.next_below(4));
      for (int t = 0; t < len; ++t)
        y.tokens.push_back(static_cast<Token>(rng.next_below(static_cast<std::uint64_t>(vocab))));

      // materialize both policies on every visited context
      TokenSeq prefix = prompt;
      for (const Token t : y.tokens) {
        detail::randomize_row_tie_free(student.ensure_row(student.context_key(prefix)), rng);
        detail::randomize_row(teacher.ensure_row(teacher.context_key(prefix)), rng);
        prefix.push_back(t);
      }

      const auto loss_of = [&](const PolicyParams& s) {
        return student_branch ? loss_stu_ctx(s, teacher, prompt, y, top_k).value
                              : loss_tea_ctx(s, teacher, prompt, y, top_k).value;
      };
      const BranchLoss analytic = student_branch
                                      ? loss_stu_ctx(student, teacher, prompt, y, top_k)
                                      : loss_tea_ctx(student, teacher, prompt, y, top_k);

      ++report.cases;
      bool failed = false;
      for (const auto& [key, g] : analytic.grad.grads) {
        for (int v = 0; v < vocab; ++v) {
          PolicyParams plus = student;
          PolicyParams minus = student;
          plus.ensure_row(key)[static_cast<std::size_t>(v)] += kStep;
          minus.ensure_row(key)[static_cast<std::size_t>(v)] -= kStep;
          const double numeric = (loss_of(plus) - loss_of(minus)) / (2.0 * kStep);
          const double err = detail::rel_err(g[static_cast<std::size_t>(v)], numeric);
          report.max_rel_err = std::max(report.max_rel_err, err);
          if (err > kGate && !failed) {
            failed = true;
            std::ostringstream note;
            note << (student_branch ? "stu_ctx" : "tea_ctx") << " case " << c << " vocab "
                 << vocab << " coord " << v << ": analytic "
                 << g[static_cast<std::size_t>(v)] << " vs numeric " << numeric;
            report.failure_notes.push_back(note.str());
          }
        }
      }
      if (failed) ++report.failures;
    }
  }
  return report;
}

}  // namespace brts

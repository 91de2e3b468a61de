#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "brts/policy.hpp"
#include "brts/rollout.hpp"

namespace brts {

// Sparse map from student context key to accumulated logit gradients.
// Accumulation is additive, so merge order across keys does not matter.
struct GradAccumulator {
  int vocab_size = 0;
  std::map<ContextKey, std::vector<double>> grads;

  explicit GradAccumulator(int vocab = 0) : vocab_size(vocab) {}

  void add(ContextKey key, std::span<const double> g, double scale) {
    auto it = grads.find(key);
    if (it == grads.end())
      it = grads.emplace(key, std::vector<double>(static_cast<std::size_t>(vocab_size), 0.0))
               .first;
    for (std::size_t v = 0; v < g.size(); ++v) it->second[v] += scale * g[v];
  }

  void merge(const GradAccumulator& other, double scale) {
    for (const auto& [key, g] : other.grads) add(key, g, scale);
  }

  void scale(double s) {
    for (auto& [key, g] : grads)
      for (double& v : g) v *= s;
  }
};

// KL(p || q) = sum_v p_v (log p_v - log q_v), with 0 log(0/.) = 0.
inline double kl_exact(const NextTokenDist& p, const NextTokenDist& q) {
  if (p.probs.size() != q.probs.size()) throw std::invalid_argument("kl_exact: size mismatch");
  double kl = 0.0;
  for (std::size_t v = 0; v < p.probs.size(); ++v)
    kl += p.probs[v] * (p.log_probs[v] - q.log_probs[v]);
  return kl;
}

// KL between the distributions coarsened onto the candidate set: candidate
// tokens keep their own mass and everything else is merged into one aggregated
// tail outcome. Recovers kl_exact when the candidates cover the vocabulary and
// never exceeds it (merging outcomes cannot increase KL).
inline double kl_topk(const NextTokenDist& p, const NextTokenDist& q,
                      std::span<const Token> candidates) {
  if (p.probs.size() != q.probs.size()) throw std::invalid_argument("kl_topk: size mismatch");
  if (candidates.empty()) throw std::invalid_argument("kl_topk: candidate set must be nonempty");
  std::vector<char> in_set(p.probs.size(), 0);
  for (const Token v : candidates) {
    if (v < 0 || static_cast<std::size_t>(v) >= p.probs.size())
      throw std::invalid_argument("kl_topk: candidate id out of range");
    if (in_set[static_cast<std::size_t>(v)])
      throw std::invalid_argument("kl_topk: duplicate candidate id");
    in_set[static_cast<std::size_t>(v)] = 1;
  }

  double kl = 0.0;
  double p_tail = 0.0, q_tail = 0.0;
  for (std::size_t v = 0; v < p.probs.size(); ++v) {
    if (in_set[v]) {
      kl += p.probs[v] * (p.log_probs[v] - q.log_probs[v]);
    } else {
      p_tail += p.probs[v];
      q_tail += q.probs[v];
    }
  }
  if (p_tail > 0.0) kl += p_tail * (std::log(p_tail) - std::log(q_tail));
  return kl;
}

// One loss branch: token-mean value, per-position terms, and the gradient
// with respect to the student's logit table.
struct BranchLoss {
  double value = 0.0;
  std::vector<double> per_position;
  GradAccumulator grad;
};

// Student-context branch: KL(pi_S || pi_T) on the student rollout's prefixes,
// restricted to the student's top-K candidates at each prefix. The sampled
// trajectory and the candidate sets are constants of the differentiation;
// only the student logits at visited contexts receive gradient.
inline BranchLoss loss_stu_ctx(const PolicyParams& student, const PolicyParams& teacher,
                               std::span<const Token> prompt, const Trajectory& y_hat,
                               int top_k) {
  if (y_hat.source.kind != SourceKind::student)
    throw std::invalid_argument("loss_stu_ctx: trajectory must be a student rollout");
  if (y_hat.tokens.empty()) throw std::invalid_argument("loss_stu_ctx: empty trajectory");

  const std::size_t len = y_hat.tokens.size();
  const double inv_len = 1.0 / static_cast<double>(len);
  BranchLoss out;
  out.grad = GradAccumulator(student.vocab_size);

  TokenSeq prefix(prompt.begin(), prompt.end());
  for (std::size_t t = 0; t < len; ++t) {
    const NextTokenDist ps = next_dist(student, prefix, 1.0);
    const NextTokenDist pt = next_dist(teacher, prefix, 1.0);
    const std::vector<Token> cand = top_k_set(ps, top_k);

    const double term = kl_topk(ps, pt, cand);
    out.per_position.push_back(term);
    out.value += term * inv_len;

    std::vector<char> in_set(ps.probs.size(), 0);
    for (const Token v : cand) in_set[static_cast<std::size_t>(v)] = 1;
    double p_tail = 0.0, q_tail = 0.0;
    for (std::size_t v = 0; v < ps.probs.size(); ++v)
      if (!in_set[v]) {
        p_tail += ps.probs[v];
        q_tail += pt.probs[v];
      }

    // dKL/dp per coordinate; additive constants vanish through the softmax
    // Jacobian, so the "+1" terms are dropped.
    std::vector<double> dkl_dp(ps.probs.size());
    const double tail_term = p_tail > 0.0 ? std::log(p_tail) - std::log(q_tail) : 0.0;
    for (std::size_t v = 0; v < ps.probs.size(); ++v)
      dkl_dp[v] = in_set[v] ? ps.log_probs[v] - pt.log_probs[v] : tail_term;

    out.grad.add(student.context_key(prefix), softmax_vjp(ps.probs, dkl_dp), inv_len);
    prefix.push_back(y_hat.tokens[t]);
  }
  return out;
}

// Teacher-context branch: KL(pi_T || pi_S) on the selected trajectory's
// prefixes under the plain task prompt, restricted to the teacher's top-K
// candidates. The teacher is frozen, so the student gradient is the
// cross-entropy form p_S - p_T with the tail handled as one merged outcome.
inline BranchLoss loss_tea_ctx(const PolicyParams& student, const PolicyParams& teacher,
                               std::span<const Token> prompt, const Trajectory& y_prime,
                               int top_k) {
  if (y_prime.tokens.empty()) throw std::invalid_argument("loss_tea_ctx: empty trajectory");

  const std::size_t len = y_prime.tokens.size();
  const double inv_len = 1.0 / static_cast<double>(len);
  BranchLoss out;
  out.grad = GradAccumulator(student.vocab_size);

  TokenSeq prefix(prompt.begin(), prompt.end());
  for (std::size_t t = 0; t < len; ++t) {
    const NextTokenDist pt = next_dist(teacher, prefix, 1.0);
    const NextTokenDist ps = next_dist(student, prefix, 1.0);
    const std::vector<Token> cand = top_k_set(pt, top_k);

    const double term = kl_topk(pt, ps, cand);
    out.per_position.push_back(term);
    out.value += term * inv_len;

    std::vector<char> in_set(pt.probs.size(), 0);
    for (const Token v : cand) in_set[static_cast<std::size_t>(v)] = 1;
    double p_tail_teacher = 0.0, p_tail_student = 0.0;
    for (std::size_t v = 0; v < pt.probs.size(); ++v)
      if (!in_set[v]) {
        p_tail_teacher += pt.probs[v];
        p_tail_student += ps.probs[v];
      }

    std::vector<double> g(pt.probs.size());
    const double tail_ratio = p_tail_student > 0.0 ? p_tail_teacher / p_tail_student : 0.0;
    for (std::size_t v = 0; v < pt.probs.size(); ++v)
      g[v] = in_set[v] ? ps.probs[v] - pt.probs[v] : ps.probs[v] * (1.0 - tail_ratio);

    out.grad.add(student.context_key(prefix), g, inv_len);
    prefix.push_back(y_prime.tokens[t]);
  }
  return out;
}

// Combined objective. `lambda` always scales the teacher-context branch; the
// total and the merged gradient use the same arithmetic as the update path.
struct LossBreakdown {
  double stu_ctx = 0.0;
  double tea_ctx = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  std::vector<double> per_position_stu;
  std::vector<double> per_position_tea;
};

struct TotalLoss {
  LossBreakdown breakdown;
  GradAccumulator grad;
};

inline TotalLoss loss_total(const BranchLoss& stu, const BranchLoss* tea, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("loss_total: lambda must be > 0");
  TotalLoss out;
  out.breakdown.lambda = lambda;
  out.breakdown.stu_ctx = stu.value;
  out.breakdown.per_position_stu = stu.per_position;
  out.grad = stu.grad;
  if (tea != nullptr) {
    out.breakdown.tea_ctx = tea->value;
    out.breakdown.per_position_tea = tea->per_position;
    out.breakdown.total = stu.value + lambda * tea->value;
    out.grad.merge(tea->grad, lambda);
  } else {
    out.breakdown.total = stu.value;
  }
  return out;
}

}  // namespace brts

#pragma once

// Hand-built policies and independent oracles shared by the unit and
// acceptance suites. Nothing here touches the analytic-gradient or selection
// code paths it is used to verify.

#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "brts/policy.hpp"
#include "brts/vocab_tasks.hpp"

namespace brts::testing {

// A difficulty-1 teacher written directly into the logit table (window 3).
// Plain prompts are answered with the digit right away; perturbed prompts
// restate the digit and then box it; hinted prompts box the digit they see in
// context. Operand values listed in wrong_plain / wrong_perturbed are
// redirected to a deterministic wrong digit, which makes per-prompt accuracy
// fully controllable.
struct CraftedTeacherSpec {
  std::set<int> wrong_plain;
  std::set<int> wrong_perturbed;
  bool hint_follows = true;
  double bump = 12.0;
};

inline PolicyParams crafted_teacher(const Vocabulary& vocab, const CraftedTeacherSpec& spec) {
  PolicyParams params(vocab.size, 3, Role::teacher);
  const auto set_row = [&](std::initializer_list<Token> ctx, Token target) {
    params.ensure_row(params.context_key(std::vector<Token>(ctx)))[
        static_cast<std::size_t>(target)] = spec.bump;
  };
  constexpr Token BOS = Vocabulary::bos;
  constexpr Token EOS = Vocabulary::eos;
  constexpr Token AM = Vocabulary::answer_mark;
  constexpr Token H = Vocabulary::hint_mark;
  constexpr Token P = Vocabulary::perturb_mark;

  for (int a = 0; a <= 9; ++a) {
    const int t = spec.wrong_plain.count(a) ? (a + 3) % 10 : a;
    set_row({BOS, vocab.digit(a), AM}, vocab.digit(t));
    set_row({vocab.digit(a), AM, vocab.digit(t)}, EOS);

    const int tp = spec.wrong_perturbed.count(a) ? (a + 7) % 10 : a;
    set_row({vocab.digit(a), AM, P}, vocab.digit(tp));
    set_row({AM, P, vocab.digit(tp)}, AM);
    set_row({P, vocab.digit(tp), AM}, vocab.digit(tp));
    set_row({vocab.digit(tp), AM, vocab.digit(tp)}, EOS);
  }
  for (int g = 0; g <= 9; ++g) {
    const int h = spec.hint_follows ? g : (g + 3) % 10;
    set_row({AM, H, vocab.digit(g)}, AM);
    set_row({H, vocab.digit(g), AM}, vocab.digit(h));
    set_row({vocab.digit(g), AM, vocab.digit(h)}, EOS);
  }
  return params;
}

inline PolicyParams memorized_teacher(const Vocabulary& vocab) {
  return crafted_teacher(vocab, {});
}

// Independent route for the task answer: split the prompt into plus-separated
// groups, multiply each group out in 64-bit integers, reduce once at the end.
inline int expression_oracle(const Vocabulary& vocab, std::span<const Token> prompt) {
  if (prompt.size() < 3 || prompt.front() != Vocabulary::bos ||
      prompt.back() != Vocabulary::answer_mark)
    throw std::invalid_argument("oracle: unexpected prompt shape");
  unsigned long long sum = 0;
  unsigned long long group = 1;
  bool expect_operand = true;
  for (std::size_t i = 1; i + 1 < prompt.size(); ++i) {
    const Token tok = prompt[i];
    if (expect_operand) {
      group *= static_cast<unsigned long long>(vocab.digit_value(tok));
      expect_operand = false;
    } else if (tok == Vocabulary::op_mul) {
      expect_operand = true;
    } else if (tok == Vocabulary::op_add) {
      sum += group;
      group = 1;
      expect_operand = true;
    } else {
      throw std::invalid_argument("oracle: expected an operator");
    }
  }
  sum += group;
  return static_cast<int>(sum % 10);
}

// Distribution with prescribed probabilities, built through the policy's own
// softmax by storing log-probabilities as logits.
inline NextTokenDist dist_from_probs(const std::vector<double>& probs) {
  PolicyParams params(static_cast<int>(probs.size()), 1, Role::student);
  auto& row = params.ensure_row(0);
  for (std::size_t v = 0; v < probs.size(); ++v) row[v] = std::log(probs[v]);
  return next_dist(params, std::vector<Token>{0}, 1.0);
}

}  // namespace brts::testing

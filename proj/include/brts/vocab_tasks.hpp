#pragma once

#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "brts/rng.hpp"
#include "brts/text.hpp"

namespace brts {

using Token = int;
using TokenSeq = std::vector<Token>;

// Fixed token-id layout. Ids below reserved_count have hard-wired meanings;
// ids at or above it are free. BOS is id 0 and doubles as the context pad
// token for policies.
struct Vocabulary {
  static constexpr Token bos = 0;
  static constexpr Token eos = 1;
  static constexpr Token answer_mark = 2;
  static constexpr Token hint_mark = 3;
  static constexpr Token perturb_mark = 4;
  static constexpr Token op_add = 5;
  static constexpr Token op_mul = 6;
  static constexpr Token digit_base = 7;
  static constexpr int reserved_count = 17;  // 5 marks + 2 operators + 10 digits

  int size = 20;

  explicit Vocabulary(int size_arg = 20) : size(size_arg) {
    if (size < reserved_count + 1)
      throw std::invalid_argument("vocabulary size must be >= " +
                                  std::to_string(reserved_count + 1) +
                                  " (reserved ids plus one free token)");
  }

  Token digit(int value) const {
    if (value < 0 || value > 9) throw std::invalid_argument("digit value out of range");
    return digit_base + value;
  }
  bool is_digit(Token t) const { return t >= digit_base && t < digit_base + 10; }
  int digit_value(Token t) const {
    if (!is_digit(t)) throw std::invalid_argument("token is not a digit");
    return t - digit_base;
  }
};

// A single modular-arithmetic prompt with its exact answer. `prompt` ends with
// ANSWER_MARK; `hint_prompt` additionally exposes the answer in-context;
// `perturbed_prompt` changes surface form without changing the answer.
struct TaskInstance {
  std::uint64_t id = 0;
  TokenSeq prompt;
  TokenSeq ground_truth;
  TokenSeq hint_prompt;
  TokenSeq perturbed_prompt;
  int difficulty = 1;
};

namespace detail {
inline std::uint64_t content_id(const TokenSeq& prompt, const TokenSeq& gt, int difficulty) {
  std::uint64_t h = derive_seed(0x7a5b5u, static_cast<std::uint64_t>(difficulty));
  for (Token t : prompt) h = derive_seed(h, static_cast<std::uint64_t>(t));
  h = derive_seed(h, 0xd1d1u);
  for (Token t : gt) h = derive_seed(h, static_cast<std::uint64_t>(t));
  return h;
}
}  // namespace detail

// Builds the derived fields from prompt + answer. Shared by the generator and
// the task-file loader so a loaded task is identical to the generated one.
inline TaskInstance assemble_task(const Vocabulary& vocab, TokenSeq prompt, TokenSeq ground_truth,
                                  int difficulty) {
  if (prompt.empty() || prompt.front() != Vocabulary::bos)
    throw std::invalid_argument("task prompt must begin with BOS");
  if (ground_truth.empty()) throw std::invalid_argument("task ground truth must be nonempty");
  for (Token t : ground_truth)
    if (!vocab.is_digit(t)) throw std::invalid_argument("task ground truth must be digit tokens");
  TaskInstance task;
  task.difficulty = difficulty;
  task.prompt = std::move(prompt);
  task.ground_truth = std::move(ground_truth);
  task.hint_prompt = task.prompt;
  task.hint_prompt.push_back(Vocabulary::hint_mark);
  task.hint_prompt.insert(task.hint_prompt.end(), task.ground_truth.begin(),
                          task.ground_truth.end());
  task.perturbed_prompt = task.prompt;
  task.perturbed_prompt.push_back(Vocabulary::perturb_mark);
  task.id = detail::content_id(task.prompt, task.ground_truth, task.difficulty);
  return task;
}

// Evaluates `difficulty` single-digit operands joined by + and x, with x
// binding tighter than +, everything mod 10.
inline int eval_expression_mod10(std::span<const int> operands, std::span<const int> ops_mul) {
  int total = 0;
  int prod = operands[0];
  for (std::size_t i = 1; i < operands.size(); ++i) {
    if (ops_mul[i - 1]) {
      prod = (prod * operands[i]) % 10;
    } else {
      total = (total + prod) % 10;
      prod = operands[i];
    }
  }
  return (total + prod) % 10;
}

// Deterministic in (seed, difficulty). Prompt layout:
//   BOS, operand, (operator, operand)*, ANSWER_MARK   -> 2*difficulty + 1 tokens
inline TaskInstance generate_task(const Vocabulary& vocab, std::uint64_t seed, int difficulty) {
  if (difficulty < 1) throw std::invalid_argument("generate_task: difficulty must be >= 1");
  RngStream rng(derive_seed(seed, StreamTag::task_gen, static_cast<std::uint64_t>(difficulty)));

  std::vector<int> operands(static_cast<std::size_t>(difficulty));
  std::vector<int> ops_mul(static_cast<std::size_t>(difficulty > 0 ? difficulty - 1 : 0));
  for (auto& v : operands) v = static_cast<int>(rng.next_below(10));
  for (auto& m : ops_mul) m = static_cast<int>(rng.next_below(2));

  TokenSeq prompt;
  prompt.reserve(2 * static_cast<std::size_t>(difficulty) + 1);
  prompt.push_back(Vocabulary::bos);
  prompt.push_back(vocab.digit(operands[0]));
  for (std::size_t i = 1; i < operands.size(); ++i) {
    prompt.push_back(ops_mul[i - 1] ? Vocabulary::op_mul : Vocabulary::op_add);
    prompt.push_back(vocab.digit(operands[i]));
  }
  prompt.push_back(Vocabulary::answer_mark);

  const int value = eval_expression_mod10(operands, ops_mul);
  return assemble_task(vocab, std::move(prompt), {vocab.digit(value)}, difficulty);
}

// Digit run immediately after the last ANSWER_MARK, stopped by the first
// non-digit. Absent when no marker is followed by at least one digit.
inline std::optional<TokenSeq> extract_answer(const Vocabulary& vocab, std::span<const Token> y) {
  std::ptrdiff_t last_mark = -1;
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(y.size()); ++i)
    if (y[static_cast<std::size_t>(i)] == Vocabulary::answer_mark) last_mark = i;
  if (last_mark < 0) return std::nullopt;
  TokenSeq digits;
  for (std::size_t i = static_cast<std::size_t>(last_mark) + 1; i < y.size(); ++i) {
    if (!vocab.is_digit(y[i])) break;
    digits.push_back(y[i]);
  }
  if (digits.empty()) return std::nullopt;
  return digits;
}

// True iff the extracted answer matches the ground truth token-for-token.
// An absent answer grades incorrect.
inline bool grade(const Vocabulary& vocab, std::span<const Token> y, const TaskInstance& task) {
  const auto answer = extract_answer(vocab, y);
  return answer.has_value() && *answer == task.ground_truth;
}

// --- task-set file format ------------------------------------------------
// One task per line: "<prompt ids> | <ground-truth ids> | <difficulty>",
// ids space-separated. Hint and perturbed prompts are derived on load.

inline std::string format_task_line(const TaskInstance& task) {
  std::ostringstream out;
  for (std::size_t i = 0; i < task.prompt.size(); ++i) out << (i ? " " : "") << task.prompt[i];
  out << " | ";
  for (std::size_t i = 0; i < task.ground_truth.size(); ++i)
    out << (i ? " " : "") << task.ground_truth[i];
  out << " | " << task.difficulty;
  return out.str();
}

inline TaskInstance parse_task_line(const Vocabulary& vocab, const std::string& line) {
  const auto p1 = line.find('|');
  const auto p2 = line.find('|', p1 == std::string::npos ? p1 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos)
    throw std::invalid_argument("malformed task line: '" + line + "'");
  auto parse_ids = [&](const std::string& field) {
    TokenSeq ids;
    std::istringstream in(field);
    std::string tok;
    while (in >> tok) {
      const long long v = parse_int(tok);
      if (v < 0 || v >= vocab.size)
        throw std::invalid_argument("task token id out of range: " + tok);
      ids.push_back(static_cast<Token>(v));
    }
    return ids;
  };
  const TokenSeq prompt = parse_ids(line.substr(0, p1));
  const TokenSeq gt = parse_ids(line.substr(p1 + 1, p2 - p1 - 1));
  const long long difficulty = parse_int(trim(line.substr(p2 + 1)));
  if (difficulty < 1) throw std::invalid_argument("task difficulty must be >= 1");
  return assemble_task(vocab, prompt, gt, static_cast<int>(difficulty));
}

inline void save_tasks(const std::string& path, std::span<const TaskInstance> tasks) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write task file: " + path);
  for (const auto& task : tasks) out << format_task_line(task) << "\n";
}

inline std::vector<TaskInstance> load_tasks(const Vocabulary& vocab, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read task file: " + path);
  std::vector<TaskInstance> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    tasks.push_back(parse_task_line(vocab, line));
  }
  return tasks;
}

}  // namespace brts

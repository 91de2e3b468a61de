#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "brts/text.hpp"

namespace brts {

// All run settings in one flat struct. Every key has a default; the config
// file parser rejects unknown keys. `threads` is a CLI concern, not a config
// key, and never changes results.
struct TrainConfig {
  std::string mode = "brts";  // brts | baseline
  int steps = 200;
  int batch_size = 32;
  double learning_rate = 0.05;
  double lambda = 10.0;
  int top_k = 16;
  int candidates = 2;  // Tier-1 pool size N
  bool tier2_enabled = true;
  bool perturb_one = false;
  int student_rollouts = 1;
  int teacher_rollouts = 1;  // 0 disables the teacher branch
  int vocab_size = 20;
  int context_window = 3;
  int difficulty_min = 1;
  int difficulty_max = 1;
  double student_temperature = 1.0;
  double student_top_p = 1.0;
  double teacher_temperature = 0.7;
  double teacher_top_p = 0.95;
  double eval_temperature = 0.7;
  double eval_top_p = 0.95;
  int max_len = 32;
  std::uint64_t seed = 0;
  int eval_every = 10;
  int eval_k = 4;
  int eval_tasks = 200;
  int checkpoint_every = 50;
  int pretrain_steps = 400;
  int pretrain_batch = 64;
  double pretrain_learning_rate = 5.0;
  double pretrain_target_accuracy = 0.9;
  int pretrain_gate_tasks = 200;
  bool pretrain_include_perturbed = true;
  int student_init_steps = 10;
  double student_init_noise = 1.5;
  double student_init_max_accuracy = 0.4;
  std::string teacher_checkpoint;  // empty: pretrain in-run
  std::string student_checkpoint;  // empty: initialize in-run

  int threads = 1;  // set from the CLI flag only
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

template <typename Fn>
void for_each_key(TrainConfig& c, Fn&& fn) {
  fn("mode", c.mode);
  fn("steps", c.steps);
  fn("batch_size", c.batch_size);
  fn("learning_rate", c.learning_rate);
  fn("lambda", c.lambda);
  fn("top_k", c.top_k);
  fn("candidates", c.candidates);
  fn("tier2_enabled", c.tier2_enabled);
  fn("perturb_one", c.perturb_one);
  fn("student_rollouts", c.student_rollouts);
  fn("teacher_rollouts", c.teacher_rollouts);
  fn("vocab_size", c.vocab_size);
  fn("context_window", c.context_window);
  fn("difficulty_min", c.difficulty_min);
  fn("difficulty_max", c.difficulty_max);
  fn("student_temperature", c.student_temperature);
  fn("student_top_p", c.student_top_p);
  fn("teacher_temperature", c.teacher_temperature);
  fn("teacher_top_p", c.teacher_top_p);
  fn("eval_temperature", c.eval_temperature);
  fn("eval_top_p", c.eval_top_p);
  fn("max_len", c.max_len);
  fn("seed", c.seed);
  fn("eval_every", c.eval_every);
  fn("eval_k", c.eval_k);
  fn("eval_tasks", c.eval_tasks);
  fn("checkpoint_every", c.checkpoint_every);
  fn("pretrain_steps", c.pretrain_steps);
  fn("pretrain_batch", c.pretrain_batch);
  fn("pretrain_learning_rate", c.pretrain_learning_rate);
  fn("pretrain_target_accuracy", c.pretrain_target_accuracy);
  fn("pretrain_gate_tasks", c.pretrain_gate_tasks);
  fn("pretrain_include_perturbed", c.pretrain_include_perturbed);
  fn("student_init_steps", c.student_init_steps);
  fn("student_init_noise", c.student_init_noise);
  fn("student_init_max_accuracy", c.student_init_max_accuracy);
  fn("teacher_checkpoint", c.teacher_checkpoint);
  fn("student_checkpoint", c.student_checkpoint);
}

struct KeySetter {
  const std::string& key;
  const std::string& value;
  bool* found;
  void operator()(const char* name, std::string& field) const {
    if (key == name) { field = value; *found = true; }
  }
  void operator()(const char* name, bool& field) const {
    if (key == name) { field = parse_bool(value); *found = true; }
  }
  void operator()(const char* name, int& field) const {
    if (key == name) { field = static_cast<int>(parse_int(value)); *found = true; }
  }
  void operator()(const char* name, double& field) const {
    if (key == name) { field = parse_double(value); *found = true; }
  }
  void operator()(const char* name, std::uint64_t& field) const {
    if (key == name) { field = parse_u64(value); *found = true; }
  }
};

struct KeyPrinter {
  std::ostringstream& out;
  void operator()(const char* name, const std::string& field) const {
    out << name << " = " << field << "\n";
  }
  void operator()(const char* name, bool field) const {
    out << name << " = " << (field ? "true" : "false") << "\n";
  }
  void operator()(const char* name, int field) const { out << name << " = " << field << "\n"; }
  void operator()(const char* name, double field) const {
    out << name << " = " << fmt_g17(field) << "\n";
  }
  void operator()(const char* name, std::uint64_t field) const {
    out << name << " = " << field << "\n";
  }
};

}  // namespace detail

inline void validate_config(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (c.mode != "brts" && c.mode != "baseline") fail("mode must be brts or baseline");
  if (c.steps < 0) fail("steps must be >= 0");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.learning_rate < 0) fail("learning_rate must be >= 0");
  if (!(c.lambda > 0)) fail("lambda must be > 0");
  if (c.top_k < 1 || c.top_k > c.vocab_size) fail("top_k must be in [1, vocab_size]");
  if (c.student_rollouts < 1) fail("student_rollouts must be >= 1");
  if (c.teacher_rollouts != 0 && c.teacher_rollouts != 1) fail("teacher_rollouts must be 0 or 1");
  if (c.mode == "brts" && c.teacher_rollouts == 1) {
    if (c.candidates < 1) fail("candidates must be >= 1 when the teacher branch is enabled");
    if (c.student_rollouts != 1) fail("brts mode uses exactly 1 student rollout");
  }
  if (c.difficulty_min < 1 || c.difficulty_max < c.difficulty_min)
    fail("difficulty range must satisfy 1 <= difficulty_min <= difficulty_max");
  for (const auto& [name, t] :
       {std::pair<const char*, double>{"student_temperature", c.student_temperature},
        {"teacher_temperature", c.teacher_temperature},
        {"eval_temperature", c.eval_temperature}})
    if (!(t > 0)) fail(std::string(name) + " must be > 0");
  for (const auto& [name, p] : {std::pair<const char*, double>{"student_top_p", c.student_top_p},
                                {"teacher_top_p", c.teacher_top_p},
                                {"eval_top_p", c.eval_top_p}})
    if (!(p > 0) || p > 1) fail(std::string(name) + " must be in (0, 1]");
  if (c.max_len < 1) fail("max_len must be >= 1");
  if (c.eval_k < 1) fail("eval_k must be >= 1");
  if (c.eval_tasks < 1) fail("eval_tasks must be >= 1");
  if (c.pretrain_steps < 0) fail("pretrain_steps must be >= 0");
  if (c.pretrain_batch < 1) fail("pretrain_batch must be >= 1");
  if (c.pretrain_gate_tasks < 1) fail("pretrain_gate_tasks must be >= 1");
  if (c.student_init_steps < 0) fail("student_init_steps must be >= 0");
}

inline TrainConfig parse_config(std::istream& in) {
  TrainConfig config;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    bool found = false;
    detail::for_each_key(config, detail::KeySetter{key, value, &found});
    if (!found)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
  }
  validate_config(config);
  return config;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  return parse_config(in);
}

// Resolved config in the same key = value syntax the parser accepts.
inline std::string format_config(TrainConfig config) {
  std::ostringstream out;
  detail::for_each_key(config, detail::KeyPrinter{out});
  return out.str();
}

}  // namespace brts

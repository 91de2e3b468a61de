#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "brts/policy.hpp"
#include "brts/rng.hpp"
#include "brts/vocab_tasks.hpp"

namespace brts {

// Sampling knobs. Records and losses always use the untempered distribution;
// temperature and top_p shape only the draw itself.
struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
};

// Per-position snapshot of the issuing policy's top-K candidates at
// temperature 1, kept for logging and diagnostics.
struct TopKRecord {
  int position = 0;
  std::vector<Token> candidate_ids;
  std::vector<double> candidate_logprobs;
};

enum class SourceKind { student, teacher_tier1, teacher_tier2, teacher_tier3_fallback };

struct TrajectorySource {
  SourceKind kind = SourceKind::student;
  int candidate_index = -1;  // Tier-1 pool position, -1 otherwise
};

inline std::string to_string(const TrajectorySource& s) {
  switch (s.kind) {
    case SourceKind::student: return "student";
    case SourceKind::teacher_tier1:
      return "teacher_tier1(" + std::to_string(s.candidate_index) + ")";
    case SourceKind::teacher_tier2: return "teacher_tier2";
    case SourceKind::teacher_tier3_fallback:
      return "teacher_tier3_fallback(" + std::to_string(s.candidate_index) + ")";
  }
  return "?";
}

// Generated continuation of a prompt, graded at construction time. `tokens`
// excludes the prompt and ends at EOS or at the length cap.
struct Trajectory {
  std::uint64_t task_id = 0;
  TokenSeq tokens;
  std::vector<TopKRecord> records;
  TrajectorySource source;
  bool correct = false;
  std::optional<TokenSeq> extracted_answer;
};

inline TokenSeq sequence(std::span<const Token> prompt, const Trajectory& y) {
  TokenSeq full(prompt.begin(), prompt.end());
  full.insert(full.end(), y.tokens.begin(), y.tokens.end());
  return full;
}

// Structured one-line record of a trajectory for logs and reports.
inline std::string format_trajectory_line(const Trajectory& y, double overlap) {
  std::ostringstream out;
  out << "source=" << to_string(y.source) << " correct=" << (y.correct ? 1 : 0)
      << " overlap=" << fmt_g17(overlap) << " tokens=";
  for (std::size_t i = 0; i < y.tokens.size(); ++i) out << (i ? " " : "") << y.tokens[i];
  return out.str();
}

// Autoregressive sampling until EOS or max_len tokens. Grading uses the
// issuing prompt, so hint- and perturb-conditioned rollouts are judged on the
// sequence they actually produced.
inline Trajectory generate(const PolicyParams& params, const Vocabulary& vocab,
                           const TaskInstance& task, std::span<const Token> prompt,
                           TrajectorySource source, int record_top_k,
                           const SamplingConfig& sampling, int max_len, RngStream& rng) {
  if (max_len < 1) throw std::invalid_argument("generate: max_len must be >= 1");
  Trajectory y;
  y.task_id = task.id;
  y.source = source;

  TokenSeq prefix(prompt.begin(), prompt.end());
  for (int t = 0; t < max_len; ++t) {
    const NextTokenDist sampled = next_dist(params, prefix, sampling.temperature);
    const NextTokenDist& plain =
        sampling.temperature == 1.0 ? sampled : next_dist(params, prefix, 1.0);

    TopKRecord record;
    record.position = t;
    record.candidate_ids = top_k_set(plain, record_top_k);
    record.candidate_logprobs.reserve(record.candidate_ids.size());
    for (const Token v : record.candidate_ids)
      record.candidate_logprobs.push_back(plain.log_probs[static_cast<std::size_t>(v)]);
    y.records.push_back(std::move(record));

    const Token tok = sample_token(sampled, sampling.top_p, rng);
    y.tokens.push_back(tok);
    prefix.push_back(tok);
    if (tok == Vocabulary::eos) break;
  }

  y.extracted_answer = extract_answer(vocab, prefix);
  y.correct = grade(vocab, prefix, task);
  return y;
}

// N independent Tier-1 candidates. Each candidate draws from its own stream
// derived from (pool_seed, task id, candidate index), so the pool does not
// depend on generation order or scheduling. With perturb_one, the last
// candidate is conditioned on the perturbed prompt instead.
inline std::vector<Trajectory> generate_pool(const PolicyParams& teacher, const Vocabulary& vocab,
                                             const TaskInstance& task, int pool_size,
                                             bool perturb_one, int record_top_k,
                                             const SamplingConfig& sampling, int max_len,
                                             std::uint64_t pool_seed) {
  if (pool_size < 1) throw std::invalid_argument("generate_pool: pool size must be >= 1");
  std::vector<Trajectory> pool;
  pool.reserve(static_cast<std::size_t>(pool_size));
  for (int i = 0; i < pool_size; ++i) {
    RngStream rng(derive_seed(pool_seed, StreamTag::teacher_pool, task.id,
                              static_cast<std::uint64_t>(i)));
    const bool perturbed = perturb_one && pool_size >= 2 && i == pool_size - 1;
    const auto& prompt = perturbed ? task.perturbed_prompt : task.prompt;
    pool.push_back(generate(teacher, vocab, task, prompt,
                            {SourceKind::teacher_tier1, i}, record_top_k, sampling, max_len,
                            rng));
  }
  return pool;
}

}  // namespace brts

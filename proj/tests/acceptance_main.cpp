// Acceptance suite: ten independently checkable criteria covering gradient
// correctness, the truncated-KL bounds, the selection rule, catch-rate
// statistics, tier-2 coverage, the end-to-end training direction, determinism,
// and the evaluation metric inequalities. Prints one line per criterion and
// exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "brts/brts.hpp"
#include "support/crafted.hpp"

using namespace brts;
namespace fs = std::filesystem;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing file " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

NextTokenDist random_dist(RngStream& rng, int vocab) {
  std::vector<double> probs(static_cast<std::size_t>(vocab));
  double sum = 0.0;
  for (double& p : probs) {
    p = 0.02 + rng.next_double();
    sum += p;
  }
  for (double& p : probs) p /= sum;
  return testing::dist_from_probs(probs);
}

// A random subset of the ten digit values.
std::set<int> random_digit_subset(RngStream& rng, int count) {
  std::vector<int> digits(10);
  std::iota(digits.begin(), digits.end(), 0);
  for (int i = 9; i > 0; --i)
    std::swap(digits[static_cast<std::size_t>(i)],
              digits[static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)))]);
  return std::set<int>(digits.begin(), digits.begin() + count);
}

std::vector<TaskInstance> difficulty1_tasks(const Vocabulary& vocab, std::uint64_t seed,
                                            int count) {
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    tasks.push_back(generate_task(
        vocab, derive_seed(seed, std::uint64_t{0xacce}, static_cast<std::uint64_t>(i)), 1));
  return tasks;
}

// --- criterion bodies ------------------------------------------------------

bool criterion_gradients(std::string& detail) {
  Timer timer;
  const GradCheckReport report = run_gradcheck(20240811, 100);
  const double elapsed = timer.seconds();
  std::ostringstream out;
  out << report.cases << " cases, max rel err " << report.max_rel_err << ", " << elapsed << "s";
  detail = out.str();
  if (!report.failure_notes.empty()) detail += "; first: " + report.failure_notes.front();
  return report.failures == 0 && elapsed < 10.0;
}

bool criterion_topk_bounds(std::string& detail) {
  RngStream rng(424242);
  double worst_full_gap = 0.0;
  double worst_violation = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int vocab = 2 + static_cast<int>(rng.next_below(19));
    const NextTokenDist p = random_dist(rng, vocab);
    const NextTokenDist q = random_dist(rng, vocab);
    const double exact = kl_exact(p, q);
    if (exact < -1e-12) return false;
    std::vector<Token> all(static_cast<std::size_t>(vocab));
    std::iota(all.begin(), all.end(), 0);
    worst_full_gap = std::max(worst_full_gap, std::abs(kl_topk(p, q, all) - exact));
    for (int k = 1; k <= vocab; ++k) {
      const double truncated = kl_topk(p, q, top_k_set(p, k));
      if (truncated < -1e-12) return false;
      worst_violation = std::max(worst_violation, truncated - exact);
    }
  }
  std::ostringstream out;
  out << "full-coverage gap " << worst_full_gap << ", max bound violation " << worst_violation;
  detail = out.str();
  return worst_full_gap <= 1e-12 && worst_violation <= 1e-12;
}

bool criterion_selection_exhaustive(std::string& detail) {
  Timer timer;
  const Vocabulary vocab;
  const PolicyParams student(vocab.size, 3, Role::student);  // uniform: top-1 is token 0
  const TaskInstance task = generate_task(vocab, 99, 1);
  const SamplingConfig low_temp{0.05, 1.0};
  const PolicyParams hint_good = testing::crafted_teacher(vocab, {.hint_follows = true});
  const PolicyParams hint_bad = testing::crafted_teacher(vocab, {.hint_follows = false});
  int cases = 0;

  for (int n = 1; n <= 4; ++n) {
    std::vector<int> zero_counts(static_cast<std::size_t>(n));
    std::iota(zero_counts.begin(), zero_counts.end(), 1);  // distinct overlaps i/5
    do {
      for (int pattern = 0; pattern < (1 << n); ++pattern) {
        for (int regime = 0; regime < 3; ++regime) {
          std::vector<Trajectory> pool;
          std::vector<double> overlaps;
          int correct_count = 0;
          for (int i = 0; i < n; ++i) {
            Trajectory y;
            y.source = {SourceKind::teacher_tier1, i};
            y.correct = (pattern >> i) & 1;
            correct_count += y.correct ? 1 : 0;
            for (int t = 0; t < 5; ++t)
              y.tokens.push_back(t < zero_counts[static_cast<std::size_t>(i)]
                                     ? 0
                                     : Vocabulary::reserved_count);
            pool.push_back(std::move(y));
            overlaps.push_back(zero_counts[static_cast<std::size_t>(i)] / 5.0);
          }
          const bool tier2_enabled = regime > 0;
          const bool tier2_succeeds = regime == 1;
          const PolicyParams& teacher = tier2_succeeds ? hint_good : hint_bad;
          RngStream tier2_rng(derive_seed(7, static_cast<std::uint64_t>(cases)));
          const SelectionOutcome got = select(student, teacher, vocab, task, pool, tier2_enabled,
                                              1, low_temp, 16, tier2_rng);
          ++cases;

          // reference decision straight from the stated contract
          int ref_tier;
          int ref_index = -1;
          if (correct_count > 0) {
            ref_tier = 1;
            for (int i = 0; i < n; ++i)
              if (pool[static_cast<std::size_t>(i)].correct &&
                  (ref_index < 0 || overlaps[static_cast<std::size_t>(i)] >
                                        overlaps[static_cast<std::size_t>(ref_index)]))
                ref_index = i;
          } else if (tier2_enabled && tier2_succeeds) {
            ref_tier = 2;
          } else {
            ref_tier = 3;
            for (int i = 0; i < n; ++i)
              if (ref_index < 0 || overlaps[static_cast<std::size_t>(i)] >
                                       overlaps[static_cast<std::size_t>(ref_index)])
                ref_index = i;
          }

          if (got.tier != ref_tier) {
            detail = "tier mismatch at case " + std::to_string(cases);
            return false;
          }
          if (ref_tier == 2) {
            if (!got.chosen.correct || got.chosen.source.kind != SourceKind::teacher_tier2) {
              detail = "bad tier-2 outcome at case " + std::to_string(cases);
              return false;
            }
          } else {
            const auto& expected = pool[static_cast<std::size_t>(ref_index)];
            if (got.chosen.tokens != expected.tokens ||
                got.chosen.source.candidate_index != ref_index ||
                got.overlap != overlaps[static_cast<std::size_t>(ref_index)]) {
              detail = "bad tier-" + std::to_string(ref_tier) + " choice at case " +
                       std::to_string(cases);
              return false;
            }
            if (ref_tier == 3 && got.chosen.source.kind != SourceKind::teacher_tier3_fallback) {
              detail = "tier-3 source not relabeled at case " + std::to_string(cases);
              return false;
            }
          }
        }
      }
    } while (std::next_permutation(zero_counts.begin(), zero_counts.end()));
  }
  const double elapsed = timer.seconds();
  std::ostringstream out;
  out << cases << " cases, " << elapsed << "s";
  detail = out.str();
  return elapsed < 5.0;
}

bool criterion_analytic_catchrate(std::string& detail) {
  const double b2 = iid_baseline(0.4336, 2);
  const double b3 = iid_baseline(0.4336, 3);
  const double b4 = iid_baseline(0.4336, 4);
  std::ostringstream out;
  out << "baseline(2)=" << b2 << " baseline(3)=" << b3 << " baseline(4)=" << b4;
  detail = out.str();
  return std::abs(b2 - 0.6792) < 5e-5 && std::abs(b3 - 0.8183) < 5e-5 &&
         std::abs(b4 - 0.8971) < 5e-5;
}

bool criterion_monte_carlo_iid(std::string& detail) {
  const Vocabulary vocab;
  RngStream pick(1234);
  const PolicyParams teacher =
      testing::crafted_teacher(vocab, {.wrong_plain = random_digit_subset(pick, 5)});
  const auto tasks = difficulty1_tasks(vocab, 5150, 2000);
  const CatchRateCurve curve = catch_rate_analysis(
      teacher, vocab, tasks, 4, CatchMode::iid_resample, {0.05, 1.0}, 16, 777, 4);
  double worst_sigmas = 0.0;
  for (std::size_t i = 0; i < curve.n_values.size(); ++i) {
    const double b = curve.iid_baseline[i];
    const double sigma = std::sqrt(std::max(b * (1.0 - b) / 2000.0, 1e-12));
    worst_sigmas = std::max(worst_sigmas, std::abs(curve.observed[i] - b) / sigma);
  }
  std::ostringstream out;
  out << "p_hat " << curve.observed.front() << ", worst deviation " << worst_sigmas << " sigma";
  detail = out.str();
  return worst_sigmas <= 3.0;
}

bool criterion_correlation_gap(std::string& detail) {
  const Vocabulary vocab;
  const SamplingConfig low_temp{0.05, 1.0};
  int below_baseline = 0, perturb_at_least = 0, in_band = 0;
  const int runs = 20;
  for (int run = 0; run < runs; ++run) {
    RngStream pick(derive_seed(31337, static_cast<std::uint64_t>(run)));
    testing::CraftedTeacherSpec spec;
    spec.wrong_plain = random_digit_subset(pick, 5 + static_cast<int>(pick.next_below(2)));
    spec.wrong_perturbed = random_digit_subset(pick, 5 + static_cast<int>(pick.next_below(2)));
    const PolicyParams teacher = testing::crafted_teacher(vocab, spec);
    const auto tasks =
        difficulty1_tasks(vocab, derive_seed(888, static_cast<std::uint64_t>(run)), 256);

    const CatchRateCurve fixed =
        catch_rate_analysis(teacher, vocab, tasks, 2, CatchMode::fixed_prompt, low_temp, 16,
                            derive_seed(4242, static_cast<std::uint64_t>(run)), 4);
    const CatchRateCurve perturbed =
        catch_rate_analysis(teacher, vocab, tasks, 2, CatchMode::perturb_one, low_temp, 16,
                            derive_seed(4242, static_cast<std::uint64_t>(run)), 4);

    const double p_hat = fixed.observed.front();
    if (p_hat >= 0.3 && p_hat <= 0.6) ++in_band;
    if (fixed.observed[1] < fixed.iid_baseline[1]) ++below_baseline;
    if (perturbed.observed[1] >= fixed.observed[1]) ++perturb_at_least;
  }
  std::ostringstream out;
  out << "accuracy in band " << in_band << "/20, below baseline " << below_baseline
      << "/20, perturb >= fixed " << perturb_at_least << "/20";
  detail = out.str();
  return in_band == runs && below_baseline >= 19 && perturb_at_least >= 16;
}

bool criterion_tier2_coverage(std::string& detail) {
  const Vocabulary vocab;
  const SamplingConfig low_temp{0.05, 1.0};
  double sum_off = 0.0, sum_on = 0.0;
  bool bands_ok = true;
  const int seeds = 5;
  for (int run = 0; run < seeds; ++run) {
    RngStream pick(derive_seed(999, static_cast<std::uint64_t>(run)));
    const PolicyParams teacher = testing::crafted_teacher(
        vocab,
        {.wrong_plain = random_digit_subset(pick, 5 + static_cast<int>(pick.next_below(2))),
         .hint_follows = true});
    const PolicyParams student(vocab.size, 3, Role::student);
    const auto tasks =
        difficulty1_tasks(vocab, derive_seed(111, static_cast<std::uint64_t>(run)), 200);

    int tier1_hits = 0, correct_off = 0, correct_on = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto pool = generate_pool(
          teacher, vocab, tasks[i], 1, false, 1, low_temp, 16,
          derive_seed(222, static_cast<std::uint64_t>(run), static_cast<std::uint64_t>(i)));
      tier1_hits += pool[0].correct ? 1 : 0;
      RngStream rng_off(
          derive_seed(333, static_cast<std::uint64_t>(run), static_cast<std::uint64_t>(i)));
      RngStream rng_on(
          derive_seed(333, static_cast<std::uint64_t>(run), static_cast<std::uint64_t>(i)));
      const SelectionOutcome off =
          select(student, teacher, vocab, tasks[i], pool, false, 1, low_temp, 16, rng_off);
      const SelectionOutcome on =
          select(student, teacher, vocab, tasks[i], pool, true, 1, low_temp, 16, rng_on);
      correct_off += off.chosen.correct ? 1 : 0;
      correct_on += on.chosen.correct ? 1 : 0;
    }
    const double single = static_cast<double>(tier1_hits) / static_cast<double>(tasks.size());
    bands_ok = bands_ok && single >= 0.3 && single <= 0.6;
    sum_off += static_cast<double>(correct_off) / static_cast<double>(tasks.size());
    sum_on += static_cast<double>(correct_on) / static_cast<double>(tasks.size());
  }
  std::ostringstream out;
  out << "mean correct auxiliary " << sum_off / seeds << " -> " << sum_on / seeds;
  detail = out.str();
  return bands_ok && sum_on / seeds > sum_off / seeds;
}

bool criterion_training_direction(std::string& detail) {
  Timer timer;
  const Vocabulary vocab;
  double brts_sum = 0.0, base_sum = 0.0;
  bool gates_ok = true;
  const int seeds = 5;
  for (int run = 1; run <= seeds; ++run) {
    const std::uint64_t seed = static_cast<std::uint64_t>(run);
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.steps = 200;
    cfg.batch_size = 32;
    cfg.threads = 4;

    const PretrainResult teacher = pretrain_teacher(vocab, cfg, seed);
    const PretrainResult student0 =
        init_student(vocab, cfg, derive_seed(seed, std::uint64_t{0x57add}));
    gates_ok = gates_ok && teacher.accuracy >= 0.9 && student0.accuracy <= 0.4;

    const auto heldout = make_task_set(vocab, cfg, seed, StreamTag::heldout_task, 200);
    const auto run_arm = [&](const TrainConfig& arm_cfg) {
      PolicyParams student = student0.params;
      for (int s = 1; s <= arm_cfg.steps; ++s) {
        const auto batch = make_task_set(
            vocab, arm_cfg,
            derive_seed(seed, StreamTag::train_task, static_cast<std::uint64_t>(s)),
            StreamTag::train_task, arm_cfg.batch_size);
        if (arm_cfg.mode == "baseline")
          opd_baseline_step(student, teacher.params, vocab, batch, arm_cfg,
                            derive_seed(seed, StreamTag::step, static_cast<std::uint64_t>(s)));
        else
          brts_step(student, teacher.params, vocab, batch, arm_cfg,
                    derive_seed(seed, StreamTag::step, static_cast<std::uint64_t>(s)));
      }
      return evaluate(student, vocab, heldout, 4, {0.7, 0.95}, cfg.max_len,
                      derive_seed(seed, StreamTag::eval, std::uint64_t{999}), cfg.threads)
          .mean;
    };

    const TrainConfig brts_cfg = cfg;  // defaults: 1 student + 1 teacher of N=2, lambda 10
    TrainConfig base_cfg = cfg;
    base_cfg.mode = "baseline";
    base_cfg.student_rollouts = 2;
    base_cfg.teacher_rollouts = 0;
    brts_sum += run_arm(brts_cfg);
    base_sum += run_arm(base_cfg);
  }
  const double elapsed = timer.seconds();
  std::ostringstream out;
  out << "mean@4 over seeds: " << brts_sum / seeds << " vs baseline " << base_sum / seeds << ", "
      << elapsed << "s";
  detail = out.str();
  return gates_ok && brts_sum / seeds >= base_sum / seeds && elapsed <= 300.0;
}

bool criterion_determinism(std::string& detail) {
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 8;
  cfg.eval_every = 2;
  cfg.checkpoint_every = 2;
  cfg.eval_tasks = 24;
  cfg.pretrain_steps = 150;
  cfg.seed = 7;

  const fs::path base = fs::temp_directory_path() / "brts_acceptance_det";
  fs::remove_all(base);
  TrainConfig threads1 = cfg;
  threads1.threads = 1;
  TrainConfig threads4 = cfg;
  threads4.threads = 4;
  train(threads1, base / "a");
  train(threads4, base / "b");
  train(threads4, base / "c");

  const std::vector<std::string> names{
      "run_log.txt", "eval_series.txt", "eval_tasks.txt", "config_resolved.txt",
      "teacher",     "student_step0",   "student_step2",  "student_step4"};
  for (const auto& name : names) {
    const std::string a = read_file(base / "a" / name);
    if (a != read_file(base / "b" / name) || a != read_file(base / "c" / name)) {
      detail = name + " differs across runs";
      return false;
    }
  }
  fs::remove_all(base);
  detail = std::to_string(names.size()) + " artifacts byte-identical across reruns and threads";
  return true;
}

bool criterion_metric_inequalities(std::string& detail) {
  const Vocabulary vocab;
  RngStream rng(6060);
  const auto tasks = difficulty1_tasks(vocab, 42, 30);
  for (int trial = 0; trial < 20; ++trial) {
    PolicyParams policy(vocab.size, 3, Role::student);
    const int rows = static_cast<int>(rng.next_below(50));
    for (int r = 0; r < rows; ++r) {
      ContextKey key = 0;
      for (int i = 0; i < 3; ++i)
        key = key * static_cast<ContextKey>(vocab.size) +
              static_cast<ContextKey>(rng.next_below(static_cast<std::uint64_t>(vocab.size)));
      for (double& v : policy.ensure_row(key)) v = 8.0 * rng.next_double() - 4.0;
    }
    for (const int k : {1, 3, 4}) {
      const EvalReport r = evaluate(policy, vocab, tasks, k, {0.7, 0.95}, 12, rng.next_u64(), 2);
      if (r.mean > r.best_at_k || r.majority_at_k > r.best_at_k) {
        detail = "inequality violated at k=" + std::to_string(k);
        return false;
      }
      if (k == 1 && (r.mean != r.best_at_k || r.mean != r.majority_at_k)) {
        detail = "k=1 metrics did not collapse";
        return false;
      }
    }
  }
  detail = "20 policies x k in {1,3,4}";
  return true;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<bool(std::string&)> body;
  };
  const std::vector<Criterion> criteria{
      {"gradient correctness vs central finite differences", criterion_gradients},
      {"top-K divergence exactness and data-processing bounds", criterion_topk_bounds},
      {"exhaustive selection-rule contract", criterion_selection_exhaustive},
      {"analytic i.i.d. catch-rate coordinates", criterion_analytic_catchrate},
      {"Monte Carlo i.i.d. agreement within 3 sigma", criterion_monte_carlo_iid},
      {"correlation gap and perturbation decorrelation", criterion_correlation_gap},
      {"tier-2 coverage gain", criterion_tier2_coverage},
      {"end-to-end training direction", criterion_training_direction},
      {"run determinism across threads and reruns", criterion_determinism},
      {"evaluation metric inequalities", criterion_metric_inequalities},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    std::string detail;
    bool ok = false;
    try {
      ok = criteria[i].body(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] %zu. %s (%s)\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].name,
                detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
  }
  if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
  return failures;
}

#pragma once

#include <cmath>
#include <cstdint>

namespace brts {

// Fixed 64-bit mixer (splitmix64 finalizer). All randomness in the project
// flows through this generator so that streams are bit-identical across
// platforms, runs, and thread schedules; the C++ standard distributions are
// deliberately not used because their output is implementation-defined.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Labels for independent stream families. Values are part of the determinism
// contract: changing them changes every derived stream.
enum class StreamTag : std::uint64_t {
  task_gen = 1,
  student_rollout = 2,
  teacher_pool = 3,
  tier2 = 4,
  eval = 5,
  catch_rate = 6,
  catch_task = 7,
  pretrain_task = 8,
  gate_task = 9,
  student_noise = 10,
  train_task = 11,
  step = 12,
  heldout_task = 13,
};

namespace detail {
inline std::uint64_t absorb(std::uint64_t state, std::uint64_t id) {
  return mix64(state + 0x9e3779b97f4a7c15ull * (id + 1));
}
inline std::uint64_t to_id(std::uint64_t v) { return v; }
inline std::uint64_t to_id(StreamTag t) { return static_cast<std::uint64_t>(t); }
}  // namespace detail

// Derives an independent child seed from a parent seed and a list of ids
// (stream tags, task ids, candidate indices, ...). Permuting generation order
// of siblings never changes a child's stream.
template <typename... Ids>
std::uint64_t derive_seed(std::uint64_t seed, Ids... ids) {
  ((seed = detail::absorb(seed, detail::to_id(ids))), ...);
  return seed;
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound). bound must be positive.
  std::uint64_t next_below(std::uint64_t bound) { return next_u64() % bound; }

  // Standard normal via Box-Muller; one draw per call.
  double next_gaussian() {
    const double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace brts

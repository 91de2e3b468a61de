#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "brts/rng.hpp"
#include "brts/text.hpp"
#include "brts/vocab_tasks.hpp"

namespace brts {

enum class Role { student, teacher };

inline std::string to_string(Role r) { return r == Role::student ? "student" : "teacher"; }
inline Role role_from_string(const std::string& s) {
  if (s == "student") return Role::student;
  if (s == "teacher") return Role::teacher;
  throw std::invalid_argument("unknown policy role: '" + s + "'");
}

// A context key packs the last `context_window` tokens of a prefix (shorter
// prefixes are left-padded with BOS = 0) into one integer, base vocab_size.
using ContextKey = std::uint64_t;

// Tabular autoregressive softmax policy. Each context key maps to a logit
// vector of length vocab_size; keys that were never written behave as the
// all-zeros vector, i.e. a uniform next-token distribution.
struct PolicyParams {
  int vocab_size = 0;
  int context_window = 3;
  Role role = Role::student;
  std::map<ContextKey, std::vector<double>> logits;

  PolicyParams() = default;
  PolicyParams(int vocab, int window, Role r)
      : vocab_size(vocab), context_window(window), role(r) {
    if (vocab < 2) throw std::invalid_argument("policy vocab_size must be >= 2");
    if (window < 1) throw std::invalid_argument("policy context_window must be >= 1");
    // the packed key space must fit in 64 bits
    std::uint64_t span = 1;
    for (int i = 0; i < window; ++i) {
      if (span > std::numeric_limits<std::uint64_t>::max() / static_cast<std::uint64_t>(vocab))
        throw std::invalid_argument("vocab_size^context_window does not fit a 64-bit key");
      span *= static_cast<std::uint64_t>(vocab);
    }
  }

  ContextKey context_key(std::span<const Token> prefix) const {
    const std::size_t w = static_cast<std::size_t>(context_window);
    const std::size_t take = std::min(prefix.size(), w);
    ContextKey key = 0;  // implicit BOS padding: leading zeros
    for (std::size_t i = prefix.size() - take; i < prefix.size(); ++i) {
      const Token t = prefix[i];
      if (t < 0 || t >= vocab_size)
        throw std::invalid_argument("token id out of range for policy: " + std::to_string(t));
      key = key * static_cast<ContextKey>(vocab_size) + static_cast<ContextKey>(t);
    }
    return key;
  }

  std::vector<Token> unpack_key(ContextKey key) const {
    std::vector<Token> ctx(static_cast<std::size_t>(context_window));
    for (int i = context_window - 1; i >= 0; --i) {
      ctx[static_cast<std::size_t>(i)] =
          static_cast<Token>(key % static_cast<ContextKey>(vocab_size));
      key /= static_cast<ContextKey>(vocab_size);
    }
    return ctx;
  }

  const std::vector<double>* find_row(ContextKey key) const {
    const auto it = logits.find(key);
    return it == logits.end() ? nullptr : &it->second;
  }

  std::vector<double>& ensure_row(ContextKey key) {
    auto it = logits.find(key);
    if (it == logits.end())
      it = logits.emplace(key, std::vector<double>(static_cast<std::size_t>(vocab_size), 0.0))
               .first;
    return it->second;
  }
};

// Exact next-token distribution; probs are softmax outputs (all positive,
// summing to 1) and log_probs is the elementwise log of probs.
struct NextTokenDist {
  std::vector<double> probs;
  std::vector<double> log_probs;
};

// softmax(logits(context(prefix)) / temperature), max-subtracted. Probabilities
// are floored at the smallest normal double so logs stay finite even for
// extreme logit gaps.
inline NextTokenDist next_dist(const PolicyParams& params, std::span<const Token> prefix,
                               double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("next_dist: temperature must be > 0");
  const std::vector<double>* row = params.find_row(params.context_key(prefix));
  const std::size_t n = static_cast<std::size_t>(params.vocab_size);

  NextTokenDist dist;
  dist.probs.resize(n);
  dist.log_probs.resize(n);

  double max_logit = 0.0;
  if (row != nullptr)
    max_logit = *std::max_element(row->begin(), row->end());

  double sum = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double logit = row ? (*row)[v] : 0.0;
    const double e = std::exp((logit - max_logit) / temperature);
    dist.probs[v] = e;
    sum += e;
  }
  for (std::size_t v = 0; v < n; ++v) {
    dist.probs[v] = std::max(dist.probs[v] / sum, std::numeric_limits<double>::min());
    dist.log_probs[v] = std::log(dist.probs[v]);
  }
  return dist;
}

// The K highest-probability token ids, probability-descending, ties broken by
// ascending token id.
inline std::vector<Token> top_k_set(const NextTokenDist& dist, int k) {
  const int n = static_cast<int>(dist.probs.size());
  if (k < 1 || k > n) throw std::invalid_argument("top_k_set: K out of range");
  std::vector<Token> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Token a, Token b) {
    const double pa = dist.probs[static_cast<std::size_t>(a)];
    const double pb = dist.probs[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

// Nucleus sampling: sample from the smallest probability-descending prefix
// whose cumulative mass reaches top_p, renormalized. Ties in probability are
// broken by ascending id, so the nucleus is unique and the draw is a pure
// function of the rng stream.
inline Token sample_token(const NextTokenDist& dist, double top_p, RngStream& rng) {
  if (!(top_p > 0.0) || top_p > 1.0)
    throw std::invalid_argument("sample_token: top_p must be in (0, 1]");
  const int n = static_cast<int>(dist.probs.size());
  std::vector<Token> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Token a, Token b) {
    const double pa = dist.probs[static_cast<std::size_t>(a)];
    const double pb = dist.probs[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });

  std::size_t nucleus = 0;
  double mass = 0.0;
  while (nucleus < order.size()) {
    mass += dist.probs[static_cast<std::size_t>(order[nucleus])];
    ++nucleus;
    if (mass >= top_p) break;
  }

  const double target = rng.next_double() * mass;
  double cum = 0.0;
  for (std::size_t i = 0; i < nucleus; ++i) {
    cum += dist.probs[static_cast<std::size_t>(order[i])];
    if (target < cum) return order[i];
  }
  return order[nucleus - 1];
}

// Vector-Jacobian product through a softmax: J^T g with J = diag(p) - p p^T.
inline std::vector<double> softmax_vjp(std::span<const double> probs, std::span<const double> g) {
  if (probs.size() != g.size()) throw std::invalid_argument("softmax_vjp: size mismatch");
  double dot = 0.0;
  for (std::size_t v = 0; v < probs.size(); ++v) dot += probs[v] * g[v];
  std::vector<double> out(probs.size());
  for (std::size_t v = 0; v < probs.size(); ++v) out[v] = probs[v] * (g[v] - dot);
  return out;
}

// Gradient over the logits of prefix's context for a scalar with downstream
// gradient `grad_probs` over the temperature-1 probabilities. Callers
// accumulate per-context contributions additively.
inline std::vector<double> logit_grad_of_scalar(const PolicyParams& params,
                                                std::span<const Token> prefix,
                                                std::span<const double> grad_probs) {
  const NextTokenDist dist = next_dist(params, prefix, 1.0);
  return softmax_vjp(dist.probs, grad_probs);
}

// --- checkpoint format -----------------------------------------------------
// Header: "brts-policy 1 <vocab_size> <context_window> <role>"
// Body:   one line per context key, "<w key tokens> : <vocab_size logits>",
//         logits in round-trip decimal precision, keys in ascending order.

inline void save_policy(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << "brts-policy 1 " << params.vocab_size << " " << params.context_window << " "
      << to_string(params.role) << "\n";
  for (const auto& [key, row] : params.logits) {
    const auto ctx = params.unpack_key(key);
    for (std::size_t i = 0; i < ctx.size(); ++i) out << (i ? " " : "") << ctx[i];
    out << " :";
    for (const double v : row) out << " " << fmt_g17(v);
    out << "\n";
  }
}

inline PolicyParams load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
  std::string magic, role;
  int version = 0, vocab = 0, window = 0;
  if (!(in >> magic >> version >> vocab >> window >> role) || magic != "brts-policy" ||
      version != 1)
    throw std::runtime_error("bad checkpoint header: " + path.string());
  PolicyParams params(vocab, window, role_from_string(role));

  std::string line;
  std::getline(in, line);  // finish header line
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    std::vector<Token> ctx(static_cast<std::size_t>(window));
    for (auto& t : ctx) {
      if (!(ls >> t)) throw std::runtime_error("bad checkpoint row: " + line);
      if (t < 0 || t >= vocab) throw std::runtime_error("checkpoint token out of range: " + line);
    }
    std::string colon;
    if (!(ls >> colon) || colon != ":") throw std::runtime_error("bad checkpoint row: " + line);
    std::vector<double> row(static_cast<std::size_t>(vocab));
    std::string field;
    for (auto& v : row) {
      if (!(ls >> field)) throw std::runtime_error("short checkpoint row: " + line);
      v = parse_double(field);
      if (!std::isfinite(v)) throw std::runtime_error("non-finite logit in checkpoint: " + line);
    }
    params.logits[params.context_key(ctx)] = std::move(row);
  }
  return params;
}

}  // namespace brts

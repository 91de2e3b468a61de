#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "brts/policy.hpp"
#include "support/crafted.hpp"

using namespace brts;

namespace {

PolicyParams random_params(RngStream& rng, int vocab, int window) {
  PolicyParams params(vocab, window, Role::student);
  const int rows = 1 + static_cast<int>(rng.next_below(5));
  for (int r = 0; r < rows; ++r) {
    ContextKey key = 0;
    for (int i = 0; i < window; ++i)
      key = key * static_cast<ContextKey>(vocab) +
            static_cast<ContextKey>(rng.next_below(static_cast<std::uint64_t>(vocab)));
    for (double& v : params.ensure_row(key)) v = 6.0 * rng.next_double() - 3.0;
  }
  return params;
}

}  // namespace

TEST_CASE("unseen context gives the uniform distribution") {
  const PolicyParams params(8, 3, Role::student);
  const auto d = next_dist(params, TokenSeq{0, 5, 2}, 0.7);
  for (const double p : d.probs) REQUIRE(p == Catch::Approx(1.0 / 8).margin(1e-15));
}

TEST_CASE("softmax of [ln 2, 0] is [2/3, 1/3]") {
  PolicyParams params(2, 1, Role::student);
  params.ensure_row(params.context_key(TokenSeq{0})) = {std::log(2.0), 0.0};
  const auto d = next_dist(params, TokenSeq{0}, 1.0);
  REQUIRE(d.probs[0] == Catch::Approx(2.0 / 3).epsilon(1e-12));
  REQUIRE(d.probs[1] == Catch::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("near-zero temperature concentrates on the max logit") {
  PolicyParams params(5, 2, Role::student);
  params.ensure_row(params.context_key(TokenSeq{0, 1})) = {0.1, 0.9, 0.3, 0.2, 0.0};
  const auto d = next_dist(params, TokenSeq{0, 1}, 1e-9);
  REQUIRE(d.probs[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("probabilities sum to one and stay positive") {
  RngStream rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int vocab = 2 + static_cast<int>(rng.next_below(19));
    PolicyParams params = random_params(rng, vocab, 2);
    TokenSeq prefix{0, static_cast<Token>(rng.next_below(static_cast<std::uint64_t>(vocab)))};
    const double temp = 0.05 + 3.0 * rng.next_double();
    const auto d = next_dist(params, prefix, temp);
    double sum = 0.0;
    for (std::size_t v = 0; v < d.probs.size(); ++v) {
      REQUIRE(d.probs[v] > 0.0);
      REQUIRE(d.log_probs[v] == std::log(d.probs[v]));
      sum += d.probs[v];
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("next_dist validates its inputs") {
  const PolicyParams params(4, 2, Role::student);
  REQUIRE_THROWS_AS(next_dist(params, TokenSeq{0}, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(next_dist(params, TokenSeq{0}, -1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(next_dist(params, TokenSeq{0, 9}, 1.0), std::invalid_argument);
}

TEST_CASE("top_k_set orders by probability then id") {
  const auto d = testing::dist_from_probs({0.5, 0.2, 0.2, 0.1});
  REQUIRE(top_k_set(d, 4) == std::vector<Token>{0, 1, 2, 3});
  REQUIRE(top_k_set(d, 2) == std::vector<Token>{0, 1});
  REQUIRE(top_k_set(d, 1) == std::vector<Token>{0});
  REQUIRE_THROWS_AS(top_k_set(d, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(top_k_set(d, 5), std::invalid_argument);
}

TEST_CASE("top-K sets are prefixes of larger-K sets") {
  RngStream rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int vocab = 3 + static_cast<int>(rng.next_below(17));
    PolicyParams params = random_params(rng, vocab, 1);
    const auto d = next_dist(params, TokenSeq{0}, 1.0);
    const auto full = top_k_set(d, vocab);
    for (int k = 1; k < vocab; ++k) {
      const auto smaller = top_k_set(d, k);
      REQUIRE(std::equal(smaller.begin(), smaller.end(), full.begin()));
    }
  }
}

TEST_CASE("top_p = 1 reproduces a plain categorical draw") {
  const auto d = testing::dist_from_probs({0.1, 0.4, 0.25, 0.25});
  RngStream rng(3);
  RngStream oracle_rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Token got = sample_token(d, 1.0, rng);
    // independent walk over the same prob-descending order
    std::vector<Token> order{1, 2, 3, 0};
    double mass = 0.0;
    for (const Token t : order) mass += d.probs[static_cast<std::size_t>(t)];
    const double target = oracle_rng.next_double() * mass;
    double cum = 0.0;
    Token expected = order.back();
    for (const Token t : order) {
      cum += d.probs[static_cast<std::size_t>(t)];
      if (target < cum) {
        expected = t;
        break;
      }
    }
    REQUIRE(got == expected);
  }
}

TEST_CASE("a single dominant token fills the nucleus") {
  const auto d = testing::dist_from_probs({0.9, 0.05, 0.05});
  RngStream rng(8);
  for (int trial = 0; trial < 100; ++trial) REQUIRE(sample_token(d, 0.6, rng) == 0);
}

TEST_CASE("nucleus truncation keeps the lowest-id half of a uniform dist") {
  const auto d = testing::dist_from_probs({0.25, 0.25, 0.25, 0.25});
  RngStream rng(12);
  bool saw0 = false, saw1 = false;
  for (int trial = 0; trial < 1000; ++trial) {
    const Token t = sample_token(d, 0.5, rng);
    REQUIRE((t == 0 || t == 1));
    saw0 = saw0 || t == 0;
    saw1 = saw1 || t == 1;
  }
  REQUIRE(saw0);
  REQUIRE(saw1);
}

TEST_CASE("sampling is reproducible stream-for-stream") {
  const auto d = testing::dist_from_probs({0.3, 0.3, 0.2, 0.2});
  RngStream a(77), b(77);
  for (int trial = 0; trial < 1000; ++trial)
    REQUIRE(sample_token(d, 0.9, a) == sample_token(d, 0.9, b));
}

TEST_CASE("sample_token validates top_p") {
  const auto d = testing::dist_from_probs({0.5, 0.5});
  RngStream rng(1);
  REQUIRE_THROWS_AS(sample_token(d, 0.0, rng), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_token(d, 1.5, rng), std::invalid_argument);
}

TEST_CASE("logit gradient of a zero or constant downstream gradient vanishes") {
  RngStream rng(23);
  PolicyParams params = random_params(rng, 6, 2);
  const TokenSeq prefix{0, 3};
  const std::vector<double> zero(6, 0.0);
  for (const double g : logit_grad_of_scalar(params, prefix, zero)) REQUIRE(g == 0.0);
  const std::vector<double> constant(6, 2.5);
  for (const double g : logit_grad_of_scalar(params, prefix, constant))
    REQUIRE(std::abs(g) < 1e-15);
}

TEST_CASE("logit gradient matches finite differences of a linear scalar") {
  RngStream rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int vocab = 3 + static_cast<int>(rng.next_below(18));
    PolicyParams params = random_params(rng, vocab, 1);
    const TokenSeq prefix{static_cast<Token>(rng.next_below(static_cast<std::uint64_t>(vocab)))};
    std::vector<double> g(static_cast<std::size_t>(vocab));
    for (double& v : g) v = 2.0 * rng.next_double() - 1.0;

    const auto analytic = logit_grad_of_scalar(params, prefix, g);
    const ContextKey key = params.context_key(prefix);
    const double h = 1e-6;
    for (int v = 0; v < vocab; ++v) {
      auto scalar = [&](double delta) {
        PolicyParams copy = params;
        copy.ensure_row(key)[static_cast<std::size_t>(v)] += delta;
        const auto d = next_dist(copy, prefix, 1.0);
        double s = 0.0;
        for (std::size_t u = 0; u < d.probs.size(); ++u) s += d.probs[u] * g[u];
        return s;
      };
      const double numeric = (scalar(h) - scalar(-h)) / (2.0 * h);
      const double a = analytic[static_cast<std::size_t>(v)];
      REQUIRE(std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}) < 1e-5);
    }
  }
}

TEST_CASE("checkpoints round-trip bit-for-bit") {
  RngStream rng(41);
  PolicyParams params = random_params(rng, 11, 3);
  params.role = Role::teacher;
  const auto dir = std::filesystem::temp_directory_path();
  const auto path_a = dir / "brts_ckpt_a";
  const auto path_b = dir / "brts_ckpt_b";
  save_policy(params, path_a);
  const PolicyParams loaded = load_policy(path_a);
  REQUIRE(loaded.vocab_size == params.vocab_size);
  REQUIRE(loaded.context_window == params.context_window);
  REQUIRE(loaded.role == params.role);
  REQUIRE(loaded.logits == params.logits);
  save_policy(loaded, path_b);
  std::ifstream a(path_a), b(path_b);
  const std::string text_a((std::istreambuf_iterator<char>(a)), {});
  const std::string text_b((std::istreambuf_iterator<char>(b)), {});
  REQUIRE(text_a == text_b);
  std::filesystem::remove(path_a);
  std::filesystem::remove(path_b);
}

TEST_CASE("load_policy rejects damaged files") {
  const auto path = std::filesystem::temp_directory_path() / "brts_ckpt_bad";
  {
    std::ofstream out(path);
    out << "not-a-checkpoint 1 4 2 teacher\n";
  }
  REQUIRE_THROWS(load_policy(path));
  {
    std::ofstream out(path);
    out << "brts-policy 1 4 2 teacher\n0 1 : 0.5 0.5 0.5\n";  // short row
  }
  REQUIRE_THROWS(load_policy(path));
  std::filesystem::remove(path);
}

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "medbridge/core.hpp"

using namespace medbridge;

TEST_CASE("error carries its kind and the raw message") {
  try {
    fail(ErrKind::geometry, "crop 512x512 at (600,0) exceeds width 1024");
    FAIL("fail() returned");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::geometry);
    CHECK(e.raw() == "crop 512x512 at (600,0) exceeds width 1024");
    CHECK(std::string(e.what()).find("geometry") != std::string::npos);
    CHECK(std::string(e.what()).find("exceeds width") != std::string::npos);
  }
}

TEST_CASE("require only throws on a false condition") {
  CHECK_NOTHROW(require(true, ErrKind::config, "unused"));
  CHECK_THROWS_AS(require(false, ErrKind::config, "boom"), Error);
}

TEST_CASE("every error kind has a distinct name") {
  const ErrKind kinds[] = {ErrKind::usage,    ErrKind::config,   ErrKind::shape,
                           ErrKind::state,    ErrKind::precondition, ErrKind::geometry,
                           ErrKind::io,       ErrKind::parse,    ErrKind::data,
                           ErrKind::tokenize, ErrKind::numeric,  ErrKind::metrics,
                           ErrKind::checkpoint};
  std::set<std::string> names;
  for (ErrKind k : kinds) names.insert(err_kind_name(k));
  CHECK(names.size() == sizeof(kinds) / sizeof(kinds[0]));
}

TEST_CASE("fnv1a64 matches a direct transcription of the algorithm") {
  // Independent re-computation, byte by byte.
  auto naive = [](const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  };
  CHECK(fnv1a64(std::string()) == kFnvOffset);
  for (const std::string s : {"a", "ab", "edema", "the same bytes, longer string"})
    CHECK(fnv1a64(s) == naive(s));
  // Chaining continues the running hash rather than restarting it.
  CHECK(fnv1a64("cd", fnv1a64("ab")) == fnv1a64("abcd"));
}

TEST_CASE("mix_seed separates streams by tag and index") {
  CHECK(mix_seed(1, "adapter.A") == mix_seed(1, "adapter.A"));
  CHECK(mix_seed(1, "adapter.A") != mix_seed(1, "adapter.B"));
  CHECK(mix_seed(1, "adapter.A") != mix_seed(2, "adapter.A"));
  CHECK(mix_seed(1, "t", 0) != mix_seed(1, "t", 1));
  // splitmix64 on distinct small inputs must not collide.
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(splitmix64(i));
  CHECK(seen.size() == 1000);
}

TEST_CASE("rng streams are reproducible and distinct by seed") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_equal_c = false;
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t va = a.next_u64();
    all_equal = all_equal && va == b.next_u64();
    any_equal_c = any_equal_c || va == c.next_u64();
  }
  CHECK(all_equal);
  CHECK_FALSE(any_equal_c);
}

TEST_CASE("uniform stays in the half-open unit interval") {
  Rng rng(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  // With 20k draws the extremes should approach the ends.
  CHECK(lo < 0.001);
  CHECK(hi > 0.999);
}

TEST_CASE("below covers the whole range and respects the bound") {
  Rng rng(11);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 14000; ++i) {
    const std::uint64_t v = rng.below(7);
    REQUIRE(v < 7);
    ++counts[std::size_t(v)];
  }
  // Expected 2000 per bucket; 5 sigma is about 220.
  for (int c : counts) CHECK(std::abs(c - 2000) < 300);
}

TEST_CASE("normal matches the first two moments") {
  Rng rng(13);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
  CHECK(rng.normal(10.0, 0.0) == 10.0);
}

TEST_CASE("sample_without_replacement returns sorted distinct indices") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + std::size_t(rng.below(40));
    const std::size_t k = std::size_t(rng.below(n + 1));
    const auto idx = rng.sample_without_replacement(n, k);
    REQUIRE(idx.size() == k);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      REQUIRE(idx[i] < n);
      if (i) REQUIRE(idx[i] > idx[i - 1]);
    }
  }
  // Every index must be reachable, including the last one.
  bool saw_last = false;
  for (int trial = 0; trial < 200 && !saw_last; ++trial) {
    const auto idx = rng.sample_without_replacement(5, 2);
    saw_last = std::find(idx.begin(), idx.end(), std::size_t(4)) != idx.end();
  }
  CHECK(saw_last);
}

TEST_CASE("shuffle permutes without losing elements") {
  Rng rng(19);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[std::size_t(i)] = i;
  auto sorted = v;
  rng.shuffle(v);
  CHECK(v != sorted);  // 50! permutations; identity is effectively impossible
  auto back = v;
  std::sort(back.begin(), back.end());
  CHECK(back == sorted);
}

TEST_CASE("fill_normal is deterministic for a fixed seed") {
  Rng a(23), b(23);
  Mat m1(3, 4), m2(3, 4);
  fill_normal(a, m1, 0.5);
  fill_normal(b, m2, 0.5);
  CHECK(m1 == m2);
  Rng c(24);
  Mat m3(3, 4);
  fill_normal(c, m3, 0.5);
  CHECK(m1 != m3);
}

TEST_CASE("hash_matrix notices value and shape changes") {
  Mat m = Mat::Zero(2, 3);
  const std::uint64_t h0 = hash_matrix(m);
  CHECK(hash_matrix(m) == h0);
  Mat bumped = m;
  bumped(1, 2) = 1e-12;
  CHECK(hash_matrix(bumped) != h0);
  Mat reshaped = Mat::Zero(3, 2);
  CHECK(hash_matrix(reshaped) != h0);
  // Chained hashing distinguishes order.
  CHECK(hash_matrix(bumped, hash_matrix(m)) != hash_matrix(m, hash_matrix(bumped)));
}

TEST_CASE("hash_hex prints 16 lowercase hex digits") {
  const std::string s = hash_hex(0x0123456789abcdefull);
  CHECK(s == "0123456789abcdef");
  CHECK(hash_hex(0) == "0000000000000000");
}

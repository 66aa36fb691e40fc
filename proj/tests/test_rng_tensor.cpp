// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "diversenet/rng.hpp"
#include "diversenet/tensor.hpp"

using namespace diversenet;

TEST_CASE("rng is deterministic per seed and diverges across seeds") {
  Rng a(42), b(42), c(43);
  bool all_equal = true;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    if (x != b.next_u64()) FAIL("same-seed streams diverged");
    if (x != c.next_u64()) all_equal = false;
  }
  CHECK_FALSE(all_equal);
}

TEST_CASE("next_below stays in range and covers small supports") {
  Rng rng(7);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 200; ++i) {
    const auto v = rng.next_below(5);
    REQUIRE(v < 5);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
  CHECK_THROWS_AS(rng.next_below(0), std::invalid_argument);
}

TEST_CASE("normal draws have sane moments") {
  Rng rng(11);
  const int n = 200000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.next_normal();
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / double(n)));
}

TEST_CASE("sample_without_replacement yields distinct in-range indices") {
  Rng rng(3);
  auto picks = rng.sample_without_replacement(10, 5);
  REQUIRE(picks.size() == 5);
  std::set<std::size_t> uniq(picks.begin(), picks.end());
  CHECK(uniq.size() == 5);
  for (auto p : picks) CHECK(p < 10);
  CHECK_THROWS_AS(rng.sample_without_replacement(3, 4), std::invalid_argument);
}

TEST_CASE("seed fan separates named streams") {
  SeedFan fan(99);
  CHECK(fan.stream("freeze") != fan.stream("dropout"));
  CHECK(fan.stream("freeze", 0) != fan.stream("freeze", 1));
  Rng a = fan.rng("freeze", 5);
  Rng b = fan.rng("freeze", 5);
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng state round-trips") {
  Rng a(1);
  for (int i = 0; i < 17; ++i) a.next_u64();
  Rng b(0);
  b.set_state(a.state());
  for (int i = 0; i < 50; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("tensor shape checks") {
  Tensor<float> t({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  t.at(1, 2, 3, 4) = 7.0f;
  CHECK(t[119] == 7.0f);
  CHECK_THROWS_AS(Tensor<float>({0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  Tensor<float> u({2, 3, 4, 5});
  CHECK(t.same_shape(u));
  CHECK_FALSE(t == u);
}

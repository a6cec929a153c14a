#include <cmath>
#include <numeric>
#include <vector>

#include "clora/rng.hpp"
#include "doctest.h"

using clora::Rng;

TEST_SUITE_BEGIN("rng");

TEST_CASE("identical seeds give identical streams") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("named streams are independent of each other") {
  Rng a = Rng::stream(7, "data");
  Rng b = Rng::stream(7, "init");
  bool all_equal = true;
  for (int i = 0; i < 16; ++i)
    if (a.next_u64() != b.next_u64()) all_equal = false;
  CHECK_FALSE(all_equal);

  Rng a2 = Rng::stream(7, "data");
  CHECK(Rng::stream(7, "data").next_u64() == a2.next_u64());
}

TEST_CASE("uniform stays in [0,1)") {
  Rng r(99);
  for (int i = 0; i < 10000; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("gaussian moments are roughly standard") {
  Rng r(42);
  const int n = 50000;
  double mean = 0.0, var = 0.0;
  std::vector<double> xs(n);
  for (auto& x : xs) x = r.gaussian();
  for (double x : xs) mean += x;
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("shuffle is a permutation and seed-stable") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Rng r1(5), r2(5);
  r1.shuffle(v);
  r2.shuffle(w);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(50);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(sorted == expect);
}

TEST_SUITE_END();

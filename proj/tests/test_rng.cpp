#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "phenocnn/rng.hpp"

using namespace phenocnn;

TEST(Rng, SameSeedSameStream) {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, UniformStaysInUnitInterval) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, BelowCoversRangeWithoutOverflow) {
  Rng r(9);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
    ++hits[v];
  }
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(1);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Rng, DerivedSeedsDependOnName) {
  std::set<std::uint64_t> seen;
  for (const char* name : {"split", "pretrain", "cnn/a", "cnn/b", "2gram-lr/a"}) seen.insert(derive_seed(42, name));
  EXPECT_EQ(seen.size(), 5u);
  EXPECT_EQ(derive_seed(42, "split"), derive_seed(42, "split"));
  EXPECT_NE(derive_seed(42, "split"), derive_seed(43, "split"));
}

#include <algorithm>
#include <numeric>
#include <set>

#include "test_util.hpp"

namespace marl {
namespace {

TEST(Rng, CounterDrawsArePureFunctions) {
  const CounterRng a(42), b(42), c(43);
  for (std::uint64_t k = 0; k < 100; ++k) {
    EXPECT_EQ(a.uniform(7, k), b.uniform(7, k));
    EXPECT_EQ(a.normal(7, k), b.normal(7, k));
  }
  EXPECT_NE(a.uniform(7, 0), c.uniform(7, 0));
  EXPECT_NE(a.uniform(7, 0), a.uniform(8, 0));
}

TEST(Rng, StreamIdSeparatesTuples) {
  std::set<std::uint64_t> ids;
  for (std::uint64_t i = 0; i < 20; ++i)
    for (std::uint64_t j = 0; j < 20; ++j) ids.insert(stream_id({i, j}));
  EXPECT_EQ(ids.size(), 400u);
  EXPECT_NE(stream_id({1, 2}), stream_id({2, 1}));
}

TEST(Rng, UniformAndNormalMoments) {
  RngStream rng(CounterRng(1), 2);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, PermutationIsBijection) {
  RngStream rng(CounterRng(9), 3);
  for (std::size_t n : {1u, 2u, 17u, 64u}) {
    auto p = rng.permutation(n);
    std::sort(p.begin(), p.end());
    std::vector<std::size_t> id(n);
    std::iota(id.begin(), id.end(), std::size_t{0});
    EXPECT_EQ(p, id);
  }
}

}  // namespace
}  // namespace marl

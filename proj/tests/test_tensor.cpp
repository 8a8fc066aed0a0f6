#include <doctest.h>

#include <algorithm>
#include <limits>
#include <set>
#include <stdexcept>

#include "bns/rng.hpp"
#include "bns/tensor.hpp"
#include "helpers.hpp"

using namespace bns;

namespace {

double kahan(const std::vector<double>& v) {
  double sum = 0.0, comp = 0.0;
  for (double x : v) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return sum;
}

}  // namespace

TEST_CASE("pairwise_sum small cases") {
  const std::vector<double> four{1, 2, 3, 4};
  CHECK(pairwise_sum(four) == 10.0);
  const std::vector<double> one{5};
  CHECK(pairwise_sum(one) == 5.0);
  const std::vector<double> none;
  CHECK_THROWS_WITH_AS(pairwise_sum(none), "empty reduction", std::invalid_argument);
}

TEST_CASE("pairwise_sum tracks a compensated sum") {
  const std::vector<double> tenths(1'000'000, 0.1);
  CHECK(testutil::rel_err(pairwise_sum(tenths), kahan(tenths)) < 1e-12);

  RngStream rng(3, {0, 0, Purpose::test});
  std::vector<double> v(1u << 20);
  for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
  CHECK(testutil::rel_err(pairwise_sum(v), kahan(v)) < 1e-12);
}

TEST_CASE("pairwise_sum association depends only on length") {
  RngStream rng(4, {0, 0, Purpose::test});
  std::vector<double> v(4096);
  for (auto& x : v) x = rng.normal();
  // Power-of-two halves are exactly the first split of the tree.
  const std::span<const double> all(v);
  const double halves = pairwise_sum(all.first(2048)) + pairwise_sum(all.last(2048));
  CHECK(pairwise_sum(all) == halves);
}

TEST_CASE("Tensor4 construction invariants") {
  CHECK_THROWS_AS(Tensor4(0, 1, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(Tensor4(1, 1, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(Tensor4(2, 2, 2, 2, std::vector<double>(15)), std::invalid_argument);
  Tensor4 t(2, 3, 4, 5);
  CHECK(t.size() == 120);
  CHECK(t.positions() == 24);
  t.at(1, 2, 3, 4) = 9.0;
  CHECK(t.data()[119] == 9.0);
}

TEST_CASE("rows and concat_rows are inverse") {
  const Tensor4 t = testutil::random_tensor(5, 2, 3, 2, 11);
  const Tensor4 parts[] = {t.rows(0, 2), t.rows(2, 3)};
  CHECK(concat_rows(parts) == t);
  CHECK_THROWS_AS(t.rows(4, 2), std::out_of_range);
}

TEST_CASE("channel_moments two-point variance") {
  Tensor4 t(2, 1, 1, 1);
  t.at(0, 0, 0, 0) = 1.0;
  t.at(1, 0, 0, 0) = 3.0;
  const auto s = channel_moments(t, full_indices(t));
  CHECK(s.mean[0] == 2.0);
  CHECK(s.variance[0] == 1.0);
  CHECK(s.count == 2);
}

TEST_CASE("channel_moments matches the naive oracle") {
  const Tensor4 t = testutil::random_tensor(2, 3, 3, 2, 5, 2.0, 0.5);
  const auto idx = full_indices(t);
  CHECK(testutil::max_stats_err(channel_moments(t, idx), testutil::naive_moments(t, idx)) < 1e-12);
}

TEST_CASE("channel_moments of a constant tensor") {
  const Tensor4 t(3, 4, 4, 2, 7.0);
  const auto idx = gather_patch(t, 1, 1, 2, 3);
  const auto s = channel_moments(t, idx);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(s.mean[k] == 7.0);
    CHECK(s.variance[k] == 0.0);
  }
}

TEST_CASE("channel_moments rejects bad index sets") {
  const Tensor4 t(1, 2, 2, 1);
  CHECK_THROWS_AS(channel_moments(t, IndexSet{}), std::invalid_argument);
  CHECK_THROWS_AS(channel_moments(t, IndexSet{0, 4}), std::out_of_range);
}

TEST_CASE("channel_moments is permutation invariant to tolerance") {
  const Tensor4 t = testutil::random_tensor(4, 5, 5, 3, 8);
  IndexSet idx = full_indices(t);
  const auto a = channel_moments(t, idx);
  RngStream rng(9, {0, 0, Purpose::test});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  const auto b = channel_moments(t, idx);
  CHECK(testutil::max_stats_err(a, b) < 1e-12);
  // Same order, same bits.
  CHECK(channel_moments(t, idx) == b);
}

TEST_CASE("gather_patch") {
  CHECK(gather_patch(Shape4{3, 2, 2, 1}, 0, 0, 2, 2) == full_indices(Shape4{3, 2, 2, 1}));

  const auto unit = gather_patch(Shape4{1, 4, 4, 1}, 2, 3, 1, 1);
  REQUIRE(unit.size() == 1);
  CHECK(unit[0] == 2 * 4 + 3);

  const Shape4 s{2, 8, 8, 1};
  const auto got = gather_patch(s, 1, 1, 2, 2);
  std::set<std::size_t> want;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 1; i < 3; ++i)
      for (std::size_t j = 1; j < 3; ++j) want.insert((n * 8 + i) * 8 + j);
  CHECK(got.size() == 8);
  CHECK(std::set<std::size_t>(got.begin(), got.end()) == want);

  CHECK_THROWS_AS(gather_patch(s, 7, 0, 2, 2), std::out_of_range);
  CHECK_THROWS(gather_patch(s, 0, 0, 0, 2));
}

TEST_CASE("gather_rows") {
  const Shape4 s{4, 2, 2, 3};
  CHECK(gather_rows(s, 0, 4) == full_indices(s));
  CHECK(gather_rows(Shape4{4, 1, 1, 1}, 2, 1) == IndexSet{2});

  const Shape4 big{8, 3, 3, 1};
  IndexSet want;
  for (std::size_t n = 3; n < 5; ++n)
    for (std::size_t p = 0; p < 9; ++p) want.push_back(n * 9 + p);
  CHECK(gather_rows(big, 3, 2) == want);
  CHECK_THROWS_AS(gather_rows(big, 7, 2), std::out_of_range);
}

TEST_CASE("require_finite") {
  Tensor4 t(1, 1, 2, 1);
  CHECK_NOTHROW(require_finite(t));
  t.at(0, 0, 1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(require_finite(t), "non-finite input", std::invalid_argument);
  t.at(0, 0, 1, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(require_finite(t), "non-finite input", std::invalid_argument);
}

TEST_CASE("RngStream reproducibility") {
  RngStream a(42, {3, 1, Purpose::plan}), b(42, {3, 1, Purpose::plan}), c(42, {3, 2, Purpose::plan});
  std::vector<std::uint64_t> va, vb, vc;
  for (int i = 0; i < 100; ++i) {
    va.push_back(a.uniform_int(0, 1'000'000));
    vb.push_back(b.uniform_int(0, 1'000'000));
    vc.push_back(c.uniform_int(0, 1'000'000));
  }
  CHECK(va == vb);
  CHECK(va != vc);
  CHECK(substream_seed(1, {0, 0, Purpose::plan}) != substream_seed(1, {0, 0, Purpose::shuffle}));
  CHECK(substream_seed(1, {0, 0, Purpose::plan}) != substream_seed(2, {0, 0, Purpose::plan}));
}

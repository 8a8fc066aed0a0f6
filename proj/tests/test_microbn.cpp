#include <doctest.h>

#include <set>
#include <stdexcept>

#include "bns/microbn.hpp"
#include "helpers.hpp"

using namespace bns;

namespace {

MicroBnConfig cfg_of(MicroPolicy p, std::size_t gb, std::size_t sb, std::size_t k = 1) {
  MicroBnConfig c;
  c.policy = p;
  c.gradient_batch = gb;
  c.statistic_batch = sb;
  c.k_nodes = k;
  return c;
}

SyntheticDataset small_data() {
  BlobParams p;
  p.per_class = 32;
  p.val_per_class = 16;
  p.h = p.w = 8;
  p.noise = 0.2;
  return make_blob_dataset(p);
}

TrainConfig small_train(std::size_t batch) {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = batch;
  t.seed = 4;
  return t;
}

void check_same_report(const TrainReport& a, const TrainReport& b) {
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    CHECK(a.epochs[e].train_loss == b.epochs[e].train_loss);
    CHECK(a.epochs[e].val_acc == b.epochs[e].val_acc);
  }
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(cfg_of(MicroPolicy::local, 64, 4).validate());
  CHECK(cfg_of(MicroPolicy::local, 64, 4).nodes() == 16);
  CHECK_THROWS_AS(cfg_of(MicroPolicy::local, 64, 5).validate(), std::invalid_argument);
  CHECK_THROWS_AS(cfg_of(MicroPolicy::sync_bs, 64, 4, 0).validate(), std::invalid_argument);
  CHECK_THROWS_AS(cfg_of(MicroPolicy::sync_bs, 64, 4, 17).validate(), std::invalid_argument);
  auto v = cfg_of(MicroPolicy::local_vdn, 8, 4);
  v.vdn.mode = VdnMode::off;
  CHECK_THROWS_AS(v.validate(), std::invalid_argument);
  CHECK(parse_micro_policy("sync_bs") == MicroPolicy::sync_bs);
  CHECK_THROWS_AS(parse_micro_policy("ring"), std::invalid_argument);
}

TEST_CASE("shard_batch") {
  const Tensor4 x = testutil::random_tensor(8, 2, 2, 3, 1);
  const auto one = shard_batch(x, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == x);
  const auto four = shard_batch(x, 4);
  REQUIRE(four.size() == 4);
  CHECK(four[1].n() == 2);
  CHECK(concat_rows(four) == x);
  CHECK_THROWS_AS(shard_batch(x, 3), std::invalid_argument);
}

TEST_CASE("moment pooling matches the full batch") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Tensor4 x = testutil::random_tensor(12, 3, 3, 4, seed, 2.0, 0.5);
    const auto shards = shard_batch(x, 6);
    std::vector<NodeMoments> nm;
    for (const auto& s : shards) nm.push_back(node_moments(s));
    const auto pooled = pool_moments(nm);
    const auto full = channel_moments(x, full_indices(x));
    CHECK(pooled.count == full.count);
    CHECK(testutil::max_stats_err(pooled, full) < 1e-12);
    CHECK(testutil::max_stats_err(pooled_stats(shards), full) < 1e-12);
  }
  CHECK_THROWS_WITH_AS(pool_moments(std::vector<NodeMoments>{}), "pool_moments: no nodes", std::invalid_argument);
}

TEST_CASE("two-round pooling is bitwise exact for power-of-two shards") {
  const Tensor4 x = testutil::random_tensor(64, 4, 4, 3, 7, 1.5, 3.0);
  const auto shards = shard_batch(x, 16);
  CHECK(pooled_stats(shards) == channel_moments(x, full_indices(x)));
}

TEST_CASE("node_statistics per policy") {
  const Tensor4 x = testutil::random_tensor(16, 2, 2, 2, 9);
  const auto full = channel_moments(x, full_indices(x));
  RngStream rng(1, {0, 0, Purpose::node_choice});

  const auto single = shard_batch(x, 1);
  for (auto p : {MicroPolicy::local, MicroPolicy::sync_full, MicroPolicy::sync_bs}) {
    const auto s = node_statistics(single, cfg_of(p, 16, 16), rng);
    REQUIRE(s.size() == 1);
    CHECK(s[0] == full);
  }

  const auto shards = shard_batch(x, 4);
  const auto local = node_statistics(shards, cfg_of(MicroPolicy::local, 16, 4), rng);
  CHECK(local[2] == channel_moments(shards[2], full_indices(shards[2])));
  const auto sync = node_statistics(shards, cfg_of(MicroPolicy::sync_full, 16, 4), rng);
  for (const auto& s : sync) CHECK(s == full);
  const auto all = node_statistics(shards, cfg_of(MicroPolicy::sync_bs, 16, 4, 4), rng);
  CHECK(all == sync);

  const std::vector<std::size_t> pick{1, 3};
  const auto two = node_statistics(shards, cfg_of(MicroPolicy::sync_bs, 16, 4, 2), pick);
  const Tensor4 parts[] = {shards[1], shards[3]};
  const Tensor4 joined = concat_rows(parts);
  CHECK(testutil::max_stats_err(two[0], channel_moments(joined, full_indices(joined))) < 1e-12);
  CHECK(two[0] == two[3]);
  CHECK_THROWS_AS(node_statistics(shards, cfg_of(MicroPolicy::sync_bs, 16, 4, 2), std::vector<std::size_t>{1, 9}),
                  std::out_of_range);

  auto vdn = cfg_of(MicroPolicy::local_vdn, 16, 4);
  vdn.vdn = {VdnMode::mixed, 1, 0.5};
  const auto with_virtual = shard_batch(testutil::random_tensor(20, 2, 2, 2, 10), 4);
  const auto v = node_statistics(with_virtual, vdn, rng);
  const auto& s0 = with_virtual[0];
  const auto want = mix_stats(virtual_stats(s0, 1), channel_moments(s0, gather_rows(s0, 1, 4)), 0.5);
  CHECK(v[0] == want);
}

TEST_CASE("choose_nodes") {
  RngStream rng(3, {0, 0, Purpose::node_choice});
  for (int t = 0; t < 50; ++t) {
    const auto c = choose_nodes(16, 5, rng);
    REQUIRE(c.size() == 5);
    CHECK(std::is_sorted(c.begin(), c.end()));
    CHECK(std::set<std::size_t>(c.begin(), c.end()).size() == 5);
    CHECK(c.back() < 16);
  }
  CHECK(choose_nodes(4, 4, rng) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK_THROWS_AS(choose_nodes(4, 0, rng), std::invalid_argument);
}

TEST_CASE("sync_full gradients equal the single large batch") {
  const Model model = Model::build(conv_bn_model(6, 6, 1, {3, 3}, 3), 2);
  const Tensor4 x = testutil::random_tensor(16, 6, 6, 1, 11);
  std::vector<int> y(16);
  for (std::size_t i = 0; i < 16; ++i) y[i] = static_cast<int>(i % 3);
  const auto layout = BatchLayout::all_real(16);

  PlanScheme plain(nullptr);
  const auto f0 = forward(model, x, Mode::train, &plain, layout);
  const auto g0 = backward(model, f0, softmax_cross_entropy(f0.logits, y).d_logits);

  MicroScheme sync(cfg_of(MicroPolicy::sync_full, 16, 4), {});
  const auto f1 = forward(model, x, Mode::train, &sync, layout);
  const auto g1 = backward(model, f1, softmax_cross_entropy(f1.logits, y).d_logits);

  CHECK(f1.logits == f0.logits);
  REQUIRE(g0.params.size() == g1.params.size());
  double worst = 0.0;
  for (std::size_t p = 0; p < g0.params.size(); ++p)
    for (std::size_t i = 0; i < g0.params[p].size(); ++i)
      worst = std::max(worst, std::abs(g0.params[p][i] - g1.params[p][i]));
  CHECK(worst < 1e-10);
}

TEST_CASE("local micro-BN sums per-node gradients") {
  // One forward over K groups equals K separate per-node forwards with the loss scaled by 1/K.
  const Model model = Model::build(conv_bn_model(6, 6, 1, {3}, 3), 3);
  const Tensor4 x = testutil::random_tensor(8, 6, 6, 1, 12);
  std::vector<int> y(8);
  for (std::size_t i = 0; i < 8; ++i) y[i] = static_cast<int>(i % 3);

  MicroScheme local(cfg_of(MicroPolicy::local, 8, 4), {});
  const auto f = forward(model, x, Mode::train, &local, BatchLayout::all_real(8));
  const auto g = backward(model, f, softmax_cross_entropy(f.logits, y).d_logits);

  PlanScheme plain(nullptr);
  std::vector<std::vector<double>> sum(g.params.size());
  for (std::size_t j = 0; j < 2; ++j) {
    const Tensor4 xs = x.rows(j * 4, 4);
    const std::vector<int> ys(y.begin() + j * 4, y.begin() + j * 4 + 4);
    const auto fj = forward(model, xs, Mode::train, &plain, BatchLayout::all_real(4));
    const auto gj = backward(model, fj, softmax_cross_entropy(fj.logits, ys).d_logits);
    for (std::size_t p = 0; p < gj.params.size(); ++p) {
      sum[p].resize(gj.params[p].size(), 0.0);
      for (std::size_t i = 0; i < gj.params[p].size(); ++i) sum[p][i] += 0.5 * gj.params[p][i];
    }
  }
  for (std::size_t p = 0; p < sum.size(); ++p)
    for (std::size_t i = 0; i < sum[p].size(); ++i) CHECK(std::abs(sum[p][i] - g.params[p][i]) < 1e-10);
}

TEST_CASE("(B, B) local and sync_full training match plain BN bitwise") {
  const auto data = small_data();
  const auto spec = conv_bn_model(8, 8, 1, {4, 4}, data.params.classes);
  const auto tcfg = small_train(16);

  Model m0 = Model::build(spec, tcfg.seed);
  const auto plain = train(m0, data, tcfg);

  Model m1 = Model::build(spec, tcfg.seed);
  check_same_report(run_microbn(m1, data, cfg_of(MicroPolicy::local, 16, 16), tcfg), plain);

  Model m2 = Model::build(spec, tcfg.seed);
  check_same_report(run_microbn(m2, data, cfg_of(MicroPolicy::sync_full, 16, 4), tcfg), plain);
}

TEST_CASE("micro-BN policies train and label their runs") {
  const auto data = small_data();
  const auto spec = conv_bn_model(8, 8, 1, {4}, data.params.classes);
  const auto tcfg = small_train(16);
  for (auto p : {MicroPolicy::sync_bs, MicroPolicy::local_vdn}) {
    Model m = Model::build(spec, 1);
    const auto r = run_microbn(m, data, cfg_of(p, 16, 4, 2), tcfg);
    CHECK_FALSE(r.diverged);
    CHECK(r.epochs.size() == 2);
  }
  CHECK(micro_label(cfg_of(MicroPolicy::local, 64, 4)) == "local-(64 4)");
  CHECK(micro_label(cfg_of(MicroPolicy::sync_bs, 64, 4, 2)) == "sync_bs2-(64 4)");
  Model m = Model::build(spec, 1);
  CHECK_THROWS_AS(run_microbn(m, data, cfg_of(MicroPolicy::local, 32, 4), tcfg), std::invalid_argument);
}

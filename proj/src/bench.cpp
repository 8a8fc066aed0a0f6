#include "bns/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

#include "bns/rng.hpp"

namespace bns {

TimingSummary summarize(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("summarize: no samples");
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(samples.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, samples.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return samples[lo] + frac * (samples[hi] - samples[lo]);
  };
  return {quantile(0.5), quantile(0.25), quantile(0.75)};
}

namespace {

// Plain accumulation loops, independent of the pairwise reduction.
ChannelStats naive_moments(const Tensor4& t, const IndexSet& idx) {
  const std::size_t c = t.c();
  ChannelStats s;
  s.mean.assign(c, 0.0);
  s.variance.assign(c, 0.0);
  s.count = idx.size();
  const auto d = t.data();
  for (auto p : idx)
    for (std::size_t k = 0; k < c; ++k) s.mean[k] += d[p * c + k];
  for (auto& v : s.mean) v /= static_cast<double>(idx.size());
  for (auto p : idx)
    for (std::size_t k = 0; k < c; ++k) {
      const double e = d[p * c + k] - s.mean[k];
      s.variance[k] += e * e;
    }
  for (auto& v : s.variance) v /= static_cast<double>(idx.size());
  return s;
}

void check_against_oracle(const ChannelStats& got, const ChannelStats& want, const char* which) {
  for (std::size_t k = 0; k < want.channels(); ++k) {
    const double em = std::abs(got.mean[k] - want.mean[k]);
    const double ev = std::abs(got.variance[k] - want.variance[k]) / std::max(std::abs(want.variance[k]), 1e-300);
    if (em > 1e-9 * std::max(1.0, std::abs(want.mean[k])) || ev > 1e-9)
      throw std::logic_error(std::string("bench: ") + which + " kernel disagrees with the oracle");
  }
}

BenchResult run_cell(const BenchCell& cell, std::size_t repetitions, std::uint64_t seed, std::uint64_t index,
                     std::size_t warmup) {
  if (repetitions < 5) throw std::invalid_argument("bench: repetitions must be >= 5");
  const Shape4 shape{cell.n, cell.h, cell.w, cell.c};
  Tensor4 x(cell.n, cell.h, cell.w, cell.c);
  RngStream rng(seed, {0, index, Purpose::bench});
  for (auto& v : x.data()) v = rng.normal();

  const SamplingPlan plan = make_plan(cell.strategy, {shape}, 0, seed);
  const IndexSet full = full_indices(shape);
  const IndexSet sampled = plan_indices(plan, 0);

  check_against_oracle(channel_moments(x, full), naive_moments(x, full), "full");
  check_against_oracle(channel_moments(x, sampled), naive_moments(x, sampled), "sampled");

  using clock = std::chrono::steady_clock;
  auto time_once = [&](const IndexSet& idx) {
    const auto t0 = clock::now();
    const ChannelStats s = channel_moments(x, idx);
    const auto t1 = clock::now();
    // Keep the result observable so the call cannot be elided.
    if (!std::isfinite(s.mean.front())) throw std::logic_error("bench: non-finite statistics");
    return std::chrono::duration<double, std::micro>(t1 - t0).count();
  };

  for (std::size_t i = 0; i < warmup; ++i) {
    time_once(full);
    time_once(sampled);
  }
  std::vector<double> tf, ts;
  for (std::size_t r = 0; r < repetitions; ++r) {
    tf.push_back(time_once(full));
    ts.push_back(time_once(sampled));
  }
  const auto sf = summarize(tf), ss = summarize(ts);

  BenchResult res;
  res.n = cell.n;
  res.h = cell.h;
  res.w = cell.w;
  res.c = cell.c;
  res.m = shape.positions();
  res.strategy = cell.strategy.tag();
  res.nominal_ratio = cell.strategy.ratio();
  res.realized_ratio = realized_ratio(plan, 0);
  res.repetitions = repetitions;
  res.t_full_us = std::max(sf.median, 1e-3);
  res.t_sampled_us = std::max(ss.median, 1e-3);
  res.iqr_full = sf.iqr();
  res.iqr_sampled = ss.iqr();
  res.speedup = res.t_full_us / res.t_sampled_us;
  return res;
}

}  // namespace

BenchResult time_stats_kernel(std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                              const SamplingStrategy& strategy, std::size_t repetitions, std::uint64_t seed,
                              std::size_t warmup) {
  return run_cell({n, h, w, c, strategy}, repetitions, seed, 0, warmup);
}

std::vector<BenchResult> bench_sweep(std::span<const BenchCell> grid, std::size_t repetitions, std::uint64_t seed) {
  std::vector<BenchResult> out;
  for (std::size_t i = 0; i < grid.size(); ++i) out.push_back(run_cell(grid[i], repetitions, seed, i, 2));
  return out;
}

void write_bench_csv(std::span<const BenchResult> rows, std::ostream& out) {
  out << "n,h,w,c,m,strategy,nominal_ratio,realized_ratio,t_full_us,t_sampled_us,speedup,iqr_full,iqr_sampled\n";
  const auto old = out.precision(10);
  for (const auto& r : rows)
    out << r.n << ',' << r.h << ',' << r.w << ',' << r.c << ',' << r.m << ',' << to_string(r.strategy) << ','
        << r.nominal_ratio << ',' << r.realized_ratio << ',' << r.t_full_us << ',' << r.t_sampled_us << ','
        << r.speedup << ',' << r.iqr_full << ',' << r.iqr_sampled << '\n';
  out.precision(old);
}

}  // namespace bns

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "bns/sampling.hpp"

namespace bns {

struct BenchResult {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  /// Points per channel, n*h*w.
  std::size_t m = 0;
  Strategy strategy = Strategy::full;
  double nominal_ratio = 1.0;
  double realized_ratio = 1.0;
  std::size_t repetitions = 0;
  /// Median wall time in microseconds.
  double t_full_us = 0.0;
  double t_sampled_us = 0.0;
  double iqr_full = 0.0;
  double iqr_sampled = 0.0;
  /// t_full_us / t_sampled_us.
  double speedup = 0.0;
};

struct TimingSummary {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr() const { return q3 - q1; }
};

/// Median and quartiles with linear interpolation between order statistics.
TimingSummary summarize(std::vector<double> samples);

/// Times channel_moments over all positions against the strategy's index set
/// on the same input. Both results are checked against a plain-loop oracle
/// before any timing counts.
BenchResult time_stats_kernel(std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                              const SamplingStrategy& strategy, std::size_t repetitions,
                              std::uint64_t seed = 1, std::size_t warmup = 2);

struct BenchCell {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  SamplingStrategy strategy;
};

/// One result per cell; cell i draws its input from substream i of `seed`.
std::vector<BenchResult> bench_sweep(std::span<const BenchCell> grid, std::size_t repetitions,
                                     std::uint64_t seed = 1);

/// Columns n,h,w,c,m,strategy,nominal_ratio,realized_ratio,t_full_us,t_sampled_us,
/// speedup,iqr_full,iqr_sampled.
void write_bench_csv(std::span<const BenchResult> rows, std::ostream& out);

}  // namespace bns

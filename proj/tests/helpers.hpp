#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bns/analysis.hpp"
#include "bns/batchnorm.hpp"
#include "bns/rng.hpp"
#include "bns/tensor.hpp"

namespace testutil {

inline bns::Tensor4 random_tensor(std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed,
                                  double scale = 1.0, double shift = 0.0) {
  bns::Tensor4 t(n, h, w, c);
  bns::RngStream rng(seed, {0, 0, bns::Purpose::test});
  for (auto& v : t.data()) v = shift + scale * rng.normal();
  return t;
}

// Streaming mean, then a second loop for the variance. Deliberately naive.
inline bns::ChannelStats naive_moments(const bns::Tensor4& t, const std::vector<std::size_t>& idx) {
  bns::ChannelStats s;
  s.mean.assign(t.c(), 0.0);
  s.variance.assign(t.c(), 0.0);
  s.count = idx.size();
  for (std::size_t k = 0; k < t.c(); ++k) {
    long double acc = 0;
    for (auto p : idx) acc += t.data()[p * t.c() + k];
    const double mu = static_cast<double>(acc / idx.size());
    long double sq = 0;
    for (auto p : idx) {
      const long double d = t.data()[p * t.c() + k] - mu;
      sq += d * d;
    }
    s.mean[k] = mu;
    s.variance[k] = static_cast<double>(sq / idx.size());
  }
  return s;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

inline double max_stats_err(const bns::ChannelStats& a, const bns::ChannelStats& b) {
  double e = 0;
  for (std::size_t k = 0; k < a.channels(); ++k) {
    // Means near zero make relative error meaningless; scale by the spread.
    const double scale = std::max(std::abs(b.mean[k]), std::sqrt(b.variance[k]));
    e = std::max(e, std::abs(a.mean[k] - b.mean[k]) / std::max(scale, 1e-300));
    e = std::max(e, rel_err(a.variance[k], b.variance[k]));
  }
  return e;
}

// Lower-triangular L with L L^T = cov; zero pivots (singular PSD) give zero columns.
inline std::vector<std::vector<double>> psd_cholesky(const std::vector<std::vector<double>>& cov) {
  const std::size_t s = cov.size();
  std::vector<std::vector<double>> L(s, std::vector<double>(s, 0.0));
  for (std::size_t j = 0; j < s; ++j) {
    double d = cov[j][j];
    for (std::size_t k = 0; k < j; ++k) d -= L[j][k] * L[j][k];
    L[j][j] = d > 1e-12 * std::max(cov[j][j], 1e-300) ? std::sqrt(d) : 0.0;
    for (std::size_t i = j + 1; i < s; ++i) {
      double v = cov[i][j];
      for (std::size_t k = 0; k < j; ++k) v -= L[i][k] * L[j][k];
      L[i][j] = L[j][j] > 0.0 ? v / L[j][j] : 0.0;
    }
  }
  return L;
}

struct McEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

// Sample variance of the mean of s jointly Gaussian values over `draws` draws.
inline McEstimate mc_mean_variance(const bns::CovModel& cov, std::size_t draws, std::uint64_t seed) {
  const auto L = psd_cholesky(cov.matrix());
  const std::size_t s = cov.dimension();
  bns::RngStream rng(seed, {0, 0, bns::Purpose::test});
  std::vector<double> z(s);
  long double sum = 0, sumsq = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    for (auto& v : z) v = rng.normal();
    double mean = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
      double xi = 0.0;
      for (std::size_t k = 0; k <= i; ++k) xi += L[i][k] * z[k];
      mean += xi;
    }
    mean /= static_cast<double>(s);
    sum += mean;
    sumsq += static_cast<long double>(mean) * mean;
  }
  const long double n = static_cast<long double>(draws);
  const double var = static_cast<double>((sumsq - sum * sum / n) / (n - 1));
  // Gaussian sampling distribution of a variance estimate.
  return {var, var * std::sqrt(2.0 / (static_cast<double>(draws) - 1.0))};
}

// Var[X_ma] / Var[X] for an i.i.d. N(0, 1) estimate stream fed through the BN moving average.
inline double simulate_ma_ratio(double alpha, std::size_t horizon, std::uint64_t seed) {
  auto st = bns::BnLayerState::make(1, alpha);
  bns::RngStream rng(seed, {0, 0, bns::Purpose::test});
  const std::size_t burn = 1000;
  long double sum = 0, sumsq = 0;
  for (std::size_t t = 0; t < burn + horizon; ++t) {
    const double x = rng.normal();
    st = bns::update_moving_average(std::move(st), bns::ChannelStats{{x}, {1.0}, 1});
    if (t >= burn) {
      sum += st.moving_mean[0];
      sumsq += static_cast<long double>(st.moving_mean[0]) * st.moving_mean[0];
    }
  }
  const long double n = static_cast<long double>(horizon);
  return static_cast<double>((sumsq - sum * sum / n) / (n - 1));
}

}  // namespace testutil

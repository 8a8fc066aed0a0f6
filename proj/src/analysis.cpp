#include "bns/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace bns {

std::size_t ErrorTrace::iterations() const {
  if (e_mu.empty()) return 0;
  const std::size_t t = e_mu.front().size();
  for (std::size_t l = 0; l < e_mu.size(); ++l)
    if (e_mu[l].size() != t || e_sigma[l].size() != t)
      throw std::logic_error("ErrorTrace: layer " + std::to_string(l) + " has inconsistent length");
  return t;
}

std::pair<double, double> estimation_errors(const ChannelStats& sampled, const ChannelStats& full) {
  if (sampled.channels() != full.channels() || sampled.variance.size() != full.variance.size())
    throw std::invalid_argument("estimation_errors: channel mismatch");
  double mu2 = 0.0, sig2 = 0.0;
  for (std::size_t k = 0; k < full.channels(); ++k) {
    const double dm = sampled.mean[k] - full.mean[k];
    const double ds = std::sqrt(sampled.variance[k]) - std::sqrt(full.variance[k]);
    mu2 += dm * dm;
    sig2 += ds * ds;
  }
  return {std::sqrt(mu2), std::sqrt(sig2)};
}

void ErrorRecorder::record(std::size_t layer, const ChannelStats& sampled, const ChannelStats& full) {
  const auto [em, es] = estimation_errors(sampled, full);
  if (trace_.e_mu.size() <= layer) {
    trace_.e_mu.resize(layer + 1);
    trace_.e_sigma.resize(layer + 1);
  }
  trace_.e_mu[layer].push_back(em);
  trace_.e_sigma[layer].push_back(es);
}

std::vector<std::vector<double>> pearson_matrix(const ErrorTrace& trace, bool use_sigma) {
  const std::size_t t = trace.iterations();
  if (t < 3) throw std::invalid_argument("pearson_matrix: need at least 3 iterations");
  const auto& series = use_sigma ? trace.e_sigma : trace.e_mu;
  const std::size_t L = series.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  std::vector<std::vector<double>> centered(L, std::vector<double>(t));
  std::vector<double> norm(L);
  for (std::size_t l = 0; l < L; ++l) {
    const double mean = pairwise_sum(series[l]) / static_cast<double>(t);
    std::vector<double> sq(t);
    for (std::size_t i = 0; i < t; ++i) {
      centered[l][i] = series[l][i] - mean;
      sq[i] = centered[l][i] * centered[l][i];
    }
    norm[l] = std::sqrt(pairwise_sum(sq));
  }

  std::vector<std::vector<double>> r(L, std::vector<double>(L, nan));
  bool warned = false;
  std::vector<double> prod(t);
  for (std::size_t a = 0; a < L; ++a)
    for (std::size_t b = a; b < L; ++b) {
      if (norm[a] == 0.0 || norm[b] == 0.0) {
        if (!warned) {
          std::clog << "warning: pearson_matrix: constant error series, correlation undefined\n";
          warned = true;
        }
        continue;
      }
      if (a == b) {
        r[a][a] = 1.0;
        continue;
      }
      for (std::size_t i = 0; i < t; ++i) prod[i] = centered[a][i] * centered[b][i];
      const double v = std::clamp(pairwise_sum(prod) / (norm[a] * norm[b]), -1.0, 1.0);
      r[a][b] = r[b][a] = v;
    }
  return r;
}

double mean_abs_off_diagonal(const std::vector<std::vector<double>>& corr) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t a = 0; a < corr.size(); ++a)
    for (std::size_t b = 0; b < corr.size(); ++b)
      if (a != b && std::isfinite(corr[a][b])) {
        sum += std::abs(corr[a][b]);
        ++count;
      }
  return count == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(count);
}

CovModel::CovModel(std::vector<std::vector<double>> cov) : cov_(std::move(cov)) {
  const std::size_t s = cov_.size();
  if (s == 0) throw std::invalid_argument("CovModel: empty covariance");
  Eigen::MatrixXd m(s, s);
  for (std::size_t i = 0; i < s; ++i) {
    if (cov_[i].size() != s) throw std::invalid_argument("CovModel: matrix is not square");
    for (std::size_t j = 0; j < s; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cov_[i][j];
  }
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (cov_[i][j] != cov_[j][i]) throw std::invalid_argument("CovModel: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-10) throw std::invalid_argument("CovModel: matrix is not PSD");
}

CovModel CovModel::iid(std::size_t s, double variance) { return equicorrelated(s, variance, 0.0); }

CovModel CovModel::equicorrelated(std::size_t s, double variance, double rho) {
  std::vector<std::vector<double>> c(s, std::vector<double>(s, rho * variance));
  for (std::size_t i = 0; i < s; ++i) c[i][i] = variance;
  return CovModel(std::move(c));
}

CovModel CovModel::random(std::size_t s, RngStream& rng) {
  std::vector<std::vector<double>> a(s, std::vector<double>(s));
  for (auto& row : a)
    for (auto& v : row) v = rng.normal();
  std::vector<std::vector<double>> c(s, std::vector<double>(s, 0.0));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < s; ++k) acc += a[i][k] * a[j][k];
      c[i][j] = c[j][i] = acc / static_cast<double>(s);
    }
  return CovModel(std::move(c));
}

double predict_mean_variance(const CovModel& cov) {
  const auto& c = cov.matrix();
  const std::size_t s = c.size();
  std::vector<double> diag(s);
  std::vector<double> upper;
  upper.reserve(s * (s - 1) / 2);
  for (std::size_t i = 0; i < s; ++i) {
    diag[i] = c[i][i];
    for (std::size_t j = i + 1; j < s; ++j) upper.push_back(c[i][j]);
  }
  const double cross = upper.empty() ? 0.0 : pairwise_sum(upper);
  const double s2 = static_cast<double>(s) * static_cast<double>(s);
  return (pairwise_sum(diag) + 2.0 * cross) / s2;
}

double ma_variance_ratio(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("ma_variance_ratio: alpha must be in (0, 1]");
  return alpha / (2.0 - alpha);
}

SpeedupModel theoretical_speedup(std::size_t m, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("theoretical_speedup: ratio must be in (0, 1]");
  const auto s = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(m)));
  if (s < 2) throw std::invalid_argument("theoretical_speedup: sampled count must be >= 2");
  SpeedupModel r;
  r.depth_full = std::log2(static_cast<double>(m));
  r.depth_sampled = std::log2(static_cast<double>(s));
  r.speedup = std::log(static_cast<double>(m)) / std::log(static_cast<double>(s));
  r.mem_fraction = static_cast<double>(s) / static_cast<double>(m);
  return r;
}

Tensor4 synth_correlated_activations(const Shape4& shape, double sample_std, double location_std,
                                     double noise_std, RngStream& rng) {
  Tensor4 t(shape.n, shape.h, shape.w, shape.c);
  std::vector<double> sample_off(shape.n * shape.c), loc_off(shape.h * shape.w * shape.c);
  for (auto& v : sample_off) v = sample_std * rng.normal();
  for (auto& v : loc_off) v = location_std * rng.normal();
  for (std::size_t n = 0; n < shape.n; ++n)
    for (std::size_t i = 0; i < shape.h; ++i)
      for (std::size_t j = 0; j < shape.w; ++j)
        for (std::size_t k = 0; k < shape.c; ++k)
          t.at(n, i, j, k) = sample_off[n * shape.c + k] + loc_off[(i * shape.w + j) * shape.c + k] +
                             noise_std * rng.normal();
  return t;
}

void write_trace_csv(const ErrorTrace& trace, std::ostream& out) {
  const std::size_t t = trace.iterations();
  out << "layer,iter,e_mu,e_sigma\n";
  out.precision(17);
  for (std::size_t l = 0; l < trace.layers(); ++l)
    for (std::size_t i = 0; i < t; ++i)
      out << l << ',' << i << ',' << trace.e_mu[l][i] << ',' << trace.e_sigma[l][i] << '\n';
}

void write_matrix_csv(const std::vector<std::vector<double>>& m, std::ostream& out) {
  out.precision(17);
  for (const auto& row : m) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out << ',';
      if (std::isfinite(row[j]))
        out << row[j];
      else
        out << "nan";
    }
    out << '\n';
  }
}

}  // namespace bns

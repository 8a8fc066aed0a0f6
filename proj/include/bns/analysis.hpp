#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "bns/batchnorm.hpp"
#include "bns/rng.hpp"
#include "bns/tensor.hpp"

namespace bns {

/// Per-layer time series of estimation errors: e_mu[l][t] = ||mu_s - mu||_2,
/// e_sigma[l][t] = ||sigma_s - sigma||_2 with sigma the standard deviation.
struct ErrorTrace {
  std::vector<std::vector<double>> e_mu;
  std::vector<std::vector<double>> e_sigma;

  std::size_t layers() const { return e_mu.size(); }
  /// Iterations recorded; throws if layers disagree.
  std::size_t iterations() const;
};

/// Returns (E_mu, E_sigma) for one comparison.
std::pair<double, double> estimation_errors(const ChannelStats& sampled, const ChannelStats& full);

/// Accumulates an ErrorTrace; plugs into the network as a StatsRecorder.
class ErrorRecorder final : public StatsRecorder {
public:
  void record(std::size_t layer, const ChannelStats& sampled, const ChannelStats& full) override;
  const ErrorTrace& trace() const { return trace_; }
  void clear() { trace_ = {}; }

private:
  ErrorTrace trace_;
};

/// L x L Pearson correlation between the layers' e_mu series (or e_sigma).
/// Entries touching a constant series are NaN.
std::vector<std::vector<double>> pearson_matrix(const ErrorTrace& trace, bool use_sigma = false);

/// Mean |r| over the off-diagonal entries that are defined.
double mean_abs_off_diagonal(const std::vector<std::vector<double>>& corr);

/// Symmetric PSD covariance of s jointly sampled values.
class CovModel {
public:
  explicit CovModel(std::vector<std::vector<double>> cov);

  static CovModel iid(std::size_t s, double variance);
  static CovModel equicorrelated(std::size_t s, double variance, double rho);
  /// A A^T / s with standard normal s x s A; the diagonal averages 1 in expectation.
  static CovModel random(std::size_t s, RngStream& rng);

  std::size_t dimension() const { return cov_.size(); }
  const std::vector<std::vector<double>>& matrix() const { return cov_; }

private:
  std::vector<std::vector<double>> cov_;
};

/// Var[(1/s) sum x_i] = (1/s^2) (sum_i Var[x_i] + 2 sum_{i<j} Cov(x_i, x_j)).
double predict_mean_variance(const CovModel& cov);

/// Steady-state Var[X_ma] / Var[X] = alpha / (2 - alpha) for i.i.d. estimates.
double ma_variance_ratio(double alpha);

struct SpeedupModel {
  double depth_full = 0.0;
  double depth_sampled = 0.0;
  /// log(m) / log(s).
  double speedup = 0.0;
  /// s / m, the fraction of data visited.
  double mem_fraction = 0.0;
};

/// Adder-tree depth model for the forward statistics.
SpeedupModel theoretical_speedup(std::size_t m, double ratio);

/// Activations with a per-(sample, channel) offset, a per-(location, channel)
/// offset and i.i.d. noise. Within-sample correlation is sample_std^2, shared
/// location correlation location_std^2.
Tensor4 synth_correlated_activations(const Shape4& shape, double sample_std, double location_std,
                                     double noise_std, RngStream& rng);

/// CSV "layer,iter,e_mu,e_sigma".
void write_trace_csv(const ErrorTrace& trace, std::ostream& out);
/// Dense L x L matrix, one row per line; undefined entries written as "nan".
void write_matrix_csv(const std::vector<std::vector<double>>& m, std::ostream& out);

}  // namespace bns

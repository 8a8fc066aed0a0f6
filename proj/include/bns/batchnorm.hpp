#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bns/tensor.hpp"

namespace bns {

/// Parameters and running statistics of one BN layer.
struct BnLayerState {
  std::vector<double> gamma;
  std::vector<double> beta;
  double epsilon = 1e-5;
  std::vector<double> moving_mean;
  std::vector<double> moving_var;
  /// Weight of the newest estimate in the moving average.
  double decay = 0.9;
  bool initialized = false;

  /// gamma = 1, beta = 0, moving statistics unset.
  static BnLayerState make(std::size_t channels, double decay = 0.9, double epsilon = 1e-5);
  std::size_t channels() const { return gamma.size(); }
};

/// One set of statistics feeding the normalization: its positions S, and the
/// weight it carries when several sets are combined.
struct StatTerm {
  ChannelStats stats;
  IndexSet indices;
  double weight = 1.0;
};

struct BnForwardCache {
  Tensor4 input;
  Tensor4 normalized;
  /// Exactly the mean and variance applied to every position.
  ChannelStats applied;
  std::vector<StatTerm> terms;
};

struct BnForwardResult {
  Tensor4 output;
  BnForwardCache cache;
};

struct BnGradients {
  Tensor4 d_input;
  std::vector<double> d_gamma;
  std::vector<double> d_beta;
  /// Length of each per-channel backward reduction (always the full m).
  std::size_t reduction_length = 0;
};

/// Linear combination sum_j w_j X_j applied separately to mean and variance.
/// Weights must be non-negative and sum to 1.
ChannelStats combine_stats(std::span<const StatTerm> terms);

/// mix * virtual + (1 - mix) * sampled, independently for mean and variance.
ChannelStats mix_stats(const ChannelStats& virtual_stats, const ChannelStats& sampled, double mix);

/// Normalizes every position of x with `stats`, which must have been computed
/// from x at exactly `indices`.
BnForwardResult bn_forward_train(const Tensor4& x, const BnLayerState& state, const ChannelStats& stats,
                                 IndexSet indices);

/// Normalizes with the combination of several statistic terms.
BnForwardResult bn_forward_train(const Tensor4& x, const BnLayerState& state, std::vector<StatTerm> terms);

Tensor4 bn_forward_eval(const Tensor4& x, const BnLayerState& state);

/// First call copies the statistics; later calls blend with the decay rate.
BnLayerState update_moving_average(BnLayerState state, const ChannelStats& stats);

/// Backward pass of the sampled normalization: positions inside a term's S
/// receive the statistic-path terms, the rest only the direct term.
BnGradients bn_backward(const Tensor4& d_out, const BnForwardCache& cache, const BnLayerState& state);

/// Receives the statistics a layer applied next to the full-batch statistics.
class StatsRecorder {
public:
  virtual ~StatsRecorder() = default;
  virtual void record(std::size_t layer, const ChannelStats& used, const ChannelStats& full) = 0;
};

}  // namespace bns

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bns/net.hpp"
#include "bns/rng.hpp"
#include "bns/tensor.hpp"

namespace bns {

enum class MicroPolicy { local, sync_full, sync_bs, local_vdn };

std::string_view to_string(MicroPolicy p);
MicroPolicy parse_micro_policy(std::string_view s);

struct MicroBnConfig {
  std::size_t gradient_batch = 64;
  /// Samples per simulated node.
  std::size_t statistic_batch = 4;
  MicroPolicy policy = MicroPolicy::local;
  /// Nodes contributing statistics under sync_bs.
  std::size_t k_nodes = 1;
  /// Virtual rows per node under local_vdn; mode off is not allowed there.
  VdnConfig vdn{VdnMode::pure, 1, 0.5};

  std::size_t nodes() const { return gradient_batch / statistic_batch; }
  void validate() const;
};

/// K contiguous equal shards along N.
std::vector<Tensor4> shard_batch(const Tensor4& x, std::size_t K);

/// What one node reports for moment pooling.
struct NodeMoments {
  std::size_t count = 0;
  std::vector<double> sum;
  std::vector<double> sum_sq;
};

NodeMoments node_moments(const Tensor4& shard);

/// Mean and variance from per-node (count, sum, sum of squares):
/// E[x^2] - E[x]^2 over the pooled counts.
ChannelStats pool_moments(std::span<const NodeMoments> nodes);

/// Two reduction rounds across nodes: pooled sums give the mean, then pooled
/// centered sums of squares give the variance. With equal power-of-two shard
/// counts the result is bitwise identical to channel_moments over the
/// concatenated batch.
ChannelStats pooled_stats(std::span<const Tensor4> shards);

/// k distinct nodes out of K, sorted, drawn from `rng`.
std::vector<std::size_t> choose_nodes(std::size_t K, std::size_t k, RngStream& rng);

/// Statistics each node normalizes with. For local_vdn every shard must
/// already carry its n_v virtual rows first. `rng` draws the sync_bs nodes.
std::vector<ChannelStats> node_statistics(std::span<const Tensor4> shards, const MicroBnConfig& cfg,
                                          RngStream& rng);

/// Same as above with an explicit sync_bs node choice.
std::vector<ChannelStats> node_statistics(std::span<const Tensor4> shards, const MicroBnConfig& cfg,
                                          std::span<const std::size_t> chosen);

/// Grouping of a batch laid out as K node blocks (each [virtual; real] under
/// local_vdn).
class MicroScheme final : public NormScheme {
public:
  MicroScheme(MicroBnConfig cfg, std::vector<std::size_t> chosen);
  std::vector<BnGroup> groups(std::size_t bn_layer, const Shape4& input) const override;

private:
  MicroBnConfig cfg_;
  std::vector<std::size_t> chosen_;
};

/// Batch policy that simulates K nodes inside one forward pass. One optimizer
/// step per gradient batch, so gradients are accumulated over all shards.
class MicroBnPolicy final : public BatchPolicy {
public:
  MicroBnPolicy(const SyntheticDataset& data, const TrainConfig& tcfg, MicroBnConfig cfg);
  void begin_epoch(std::size_t epoch) override;
  Step prepare(const Tensor4& real_batch, std::size_t epoch, std::size_t iteration) override;
  nlohmann::json epoch_manifest() const override;
  std::string label() const override;
  const std::vector<std::size_t>& chosen() const { return chosen_; }

private:
  TrainConfig tcfg_;
  MicroBnConfig cfg_;
  VirtualSampler sampler_;
  std::vector<std::size_t> chosen_;
  std::unique_ptr<MicroScheme> scheme_;
};

/// Label such as "local-(64 4)" or "sync_bs2-(64 4)"; no commas so it fits a CSV cell.
std::string micro_label(const MicroBnConfig& cfg);

/// Trains with the micro-BN policy. tcfg.batch_size must equal gradient_batch.
TrainReport run_microbn(Model& model, const SyntheticDataset& data, const MicroBnConfig& cfg,
                        const TrainConfig& tcfg);

}  // namespace bns

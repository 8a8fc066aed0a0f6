#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "bns/analysis.hpp"
#include "bns/batchnorm.hpp"
#include "bns/sampling.hpp"
#include "bns/tensor.hpp"
#include "bns/vdn.hpp"

namespace bns {

// ---------------------------------------------------------------------------
// Layers

enum class LayerKind { conv3x3, dense, relu, bn, global_avg_pool };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  /// Output channels (conv3x3) or output features (dense).
  std::size_t out = 0;
  bool bias = true;
};

struct ModelSpec {
  /// Input image shape; n is ignored.
  Shape4 input;
  std::vector<LayerSpec> layers;
  double bn_decay = 0.9;
  double bn_epsilon = 1e-5;
};

/// conv3x3 -> bn -> relu per entry of `channels`, then global average pooling
/// and a dense classifier. Convolutions feeding BN carry no bias.
ModelSpec conv_bn_model(std::size_t h, std::size_t w, std::size_t c, std::vector<std::size_t> channels,
                        std::size_t classes);

/// 3x3 convolution, stride 1, zero "same" padding. Weights are [ky][kx][cin][cout].
struct Conv3x3 {
  std::size_t cin = 0, cout = 0;
  std::vector<double> weight;
  std::vector<double> bias;  // empty when the layer has no bias
};

/// Fully connected over the flattened (h, w, c) input. Weights are [in][out].
struct Dense {
  std::size_t in = 0, out = 0;
  std::vector<double> weight;
  std::vector<double> bias;
};

struct Relu {};
struct GlobalAvgPool {};

struct BatchNorm {
  BnLayerState state;
  /// Position among the model's BN layers; keys the sampling plan.
  std::size_t ordinal = 0;
};

using Layer = std::variant<Conv3x3, Dense, Relu, BatchNorm, GlobalAvgPool>;

class Model {
public:
  /// He-initialized weights drawn from substreams of `seed`.
  static Model build(const ModelSpec& spec, std::uint64_t seed);

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const ModelSpec& spec() const { return spec_; }

  std::size_t bn_count() const { return bn_count_; }
  /// Input shape of each BN layer for a batch of n samples.
  std::vector<Shape4> bn_input_shapes(std::size_t n) const;
  Shape4 output_shape(std::size_t n) const;

  std::vector<BnLayerState*> bn_states();
  std::vector<const BnLayerState*> bn_states() const;

  /// Every trainable tensor, in a fixed order shared with Gradients::params.
  std::vector<std::span<double>> parameters();
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  /// Bumped by every parameter update; caches from older versions are stale.
  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

private:
  ModelSpec spec_;
  std::vector<Layer> layers_;
  std::size_t bn_count_ = 0;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Normalization schemes

using StatsFn = std::function<ChannelStats(const Tensor4&, const IndexSet&)>;

/// A statistics term: positions S relative to the group, and its weight.
/// `compute` overrides plain channel_moments (e.g. node-level pooling).
struct StatSource {
  IndexSet indices;
  double weight = 1.0;
  StatsFn compute;
};

/// Rows [row_begin, row_begin + row_count) normalized with the same statistics.
struct BnGroup {
  std::size_t row_begin = 0;
  std::size_t row_count = 0;
  std::vector<StatSource> sources;
};

/// Decides, per BN layer, how the batch is grouped and where statistics come from.
class NormScheme {
public:
  virtual ~NormScheme() = default;
  virtual std::vector<BnGroup> groups(std::size_t bn_layer, const Shape4& input) const = 0;
};

enum class VdnMode { off, pure, mixed };

struct VdnConfig {
  VdnMode mode = VdnMode::off;
  std::size_t n_v = 1;
  /// Weight of the virtual statistics when mixed.
  double mix = 0.5;
};

std::string_view to_string(VdnMode m);
VdnMode parse_vdn_mode(std::string_view s);

/// Statistics from a sampling plan, optionally with n_v leading virtual rows.
/// With no plan the full batch (real rows) is used.
class PlanScheme final : public NormScheme {
public:
  PlanScheme(const SamplingPlan* plan, VdnConfig vdn = {});
  std::vector<BnGroup> groups(std::size_t bn_layer, const Shape4& input) const override;

private:
  const SamplingPlan* plan_;
  VdnConfig vdn_;
};

/// Which rows of the batch are real samples; the rest are virtual.
struct BatchLayout {
  std::vector<std::size_t> real_rows;
  static BatchLayout all_real(std::size_t n);
  /// n_v virtual rows followed by n_real real rows.
  static BatchLayout virtual_first(std::size_t n_v, std::size_t n_real);
};

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { train, eval };

struct LayerCache {
  Tensor4 input;
  std::vector<BnGroup> groups;
  std::vector<BnForwardCache> bn;
};

struct ForwardResult {
  /// (real rows, 1, 1, classes).
  Tensor4 logits;
  std::vector<LayerCache> caches;
  /// Applied statistics per BN layer, averaged over groups.
  std::vector<ChannelStats> applied;
  BatchLayout layout;
  Shape4 batch_shape;
  std::uint64_t version = 0;
  Mode mode = Mode::train;
};

/// `scheme` is required in train mode when the model has BN layers.
ForwardResult forward(const Model& model, const Tensor4& x, Mode mode, const NormScheme* scheme,
                      const BatchLayout& layout, StatsRecorder* recorder = nullptr);

struct Gradients {
  std::vector<std::vector<double>> params;
  Tensor4 d_input;
};

Gradients backward(const Model& model, const ForwardResult& fwd, const Tensor4& d_logits);

struct LossResult {
  double loss = 0.0;
  Tensor4 d_logits;
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy over the rows of `logits`.
LossResult softmax_cross_entropy(const Tensor4& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  std::vector<std::string> names;
  /// Per parameter tensor: max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-6).
  std::vector<double> param_error;
  double input_error = 0.0;
  double max_error = 0.0;
  std::size_t checked = 0;
  /// Entries skipped because a perturbation flipped a ReLU.
  std::size_t skipped_kinks = 0;
};

/// Central differences of the cross-entropy loss over every parameter and
/// every real input entry. Statistic index sets stay fixed while perturbing.
GradCheckReport grad_check(const Model& model, const Tensor4& x, std::span<const int> labels,
                           const NormScheme* scheme, const BatchLayout& layout, double step = 1e-5);

// ---------------------------------------------------------------------------
// Data

struct BlobParams {
  std::size_t classes = 4;
  std::size_t per_class = 150;
  std::size_t val_per_class = 100;
  std::size_t h = 12, w = 12;
  double noise = 0.1;
  /// Per-sample brightness offset std (within-sample correlation).
  double offset_std = 0.0;
  /// Max blob-center displacement in pixels, uniform in [-shift, shift].
  std::size_t shift = 0;
  /// Place `blobs` blobs uniformly on the image (periodic boundary) instead of one centered blob.
  bool scatter = false;
  std::size_t blobs = 1;
  /// Multiplies both blob widths.
  double blob_scale = 1.0;
  double amplitude = 1.0;
  std::uint64_t seed = 1;
};

/// Oriented anisotropic Gaussian blobs; class k has orientation pi*k/classes.
struct SyntheticDataset {
  Tensor4 train_images;
  std::vector<int> train_labels;
  Tensor4 val_images;
  std::vector<int> val_labels;
  BlobParams params;
};

SyntheticDataset make_blob_dataset(const BlobParams& params);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 0.05;
  /// Epochs at which the learning rate is multiplied by lr_gamma.
  std::vector<std::size_t> milestones;
  double lr_gamma = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  SamplingStrategy strategy;
  VdnConfig vdn;
  double decay = 0.9;
  /// false resets the moving averages at the start of each epoch.
  bool persist_moving_average = true;
  std::uint64_t seed = 1;
  /// Record estimation errors for this many leading epochs.
  std::size_t record_epochs = 0;
  std::size_t eval_batch = 100;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainReport {
  std::string label;
  std::vector<EpochMetrics> epochs;
  bool diverged = false;
  std::vector<nlohmann::json> manifests;
  ErrorTrace errors;

  double final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
};

/// Per-iteration batch preparation: which tensor enters the network, which
/// rows are real and how BN layers normalize.
class BatchPolicy {
public:
  virtual ~BatchPolicy() = default;
  struct Step {
    Tensor4 input;
    BatchLayout layout;
    const NormScheme* scheme = nullptr;
  };
  virtual void begin_epoch(std::size_t epoch) = 0;
  virtual Step prepare(const Tensor4& real_batch, std::size_t epoch, std::size_t iteration) = 0;
  virtual nlohmann::json epoch_manifest() const { return nlohmann::json::object(); }
  virtual std::string label() const = 0;
};

/// Sampling plan refreshed once per epoch plus optional virtual rows.
class StandardPolicy final : public BatchPolicy {
public:
  /// Fits the virtual sampler on the training images when VDN is on.
  StandardPolicy(const Model& model, const SyntheticDataset& data, const TrainConfig& cfg);
  /// Uses previously fitted dataset statistics.
  StandardPolicy(const Model& model, const TrainConfig& cfg, VirtualSampler sampler);
  void begin_epoch(std::size_t epoch) override;
  Step prepare(const Tensor4& real_batch, std::size_t epoch, std::size_t iteration) override;
  nlohmann::json epoch_manifest() const override;
  std::string label() const override;
  const SamplingPlan& plan() const { return plan_; }
  const VirtualSampler& sampler() const { return sampler_; }

private:
  TrainConfig cfg_;
  std::vector<Shape4> dims_;
  SamplingPlan plan_;
  VirtualSampler sampler_;
  std::unique_ptr<PlanScheme> scheme_;
  bool started_ = false;
};

/// SGD with momentum; the plan is refreshed each epoch, moving averages each
/// iteration, validation uses moving statistics. Non-finite loss stops the
/// run with `diverged` set.
TrainReport train(Model& model, const SyntheticDataset& data, const TrainConfig& cfg);
TrainReport train(Model& model, const SyntheticDataset& data, const TrainConfig& cfg, BatchPolicy& policy);

/// Accuracy in eval mode (moving statistics) in batches of `batch`.
double evaluate(const Model& model, const Tensor4& images, std::span<const int> labels, std::size_t batch);

/// Per-epoch CSV rows: epoch,train_loss,val_acc,strategy,ratio,seed.
void write_metrics_csv(const TrainReport& report, const TrainConfig& cfg, std::ostream& out,
                       bool header = true);

}  // namespace bns

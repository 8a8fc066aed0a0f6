#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "bns/tensor.hpp"

namespace bns {

enum class Strategy { full, ns, bs, fs, frs };

std::string_view to_string(Strategy s);
/// Accepts "Full"/"BN", "NS", "BS", "FS", "FRS" (case-insensitive).
Strategy parse_strategy(std::string_view name);

/// Strategy tag plus the nominal sampling ratio s/m.
class SamplingStrategy {
public:
  SamplingStrategy() = default;
  SamplingStrategy(Strategy tag, double ratio);

  static SamplingStrategy full() { return {Strategy::full, 1.0}; }

  Strategy tag() const { return tag_; }
  double ratio() const { return ratio_; }

  friend bool operator==(const SamplingStrategy&, const SamplingStrategy&) = default;

private:
  Strategy tag_ = Strategy::full;
  double ratio_ = 1.0;
};

struct FullLayer {
  friend bool operator==(const FullLayer&, const FullLayer&) = default;
};
/// Contiguous sample range [begin_n, begin_n + ns) (NS, BS).
struct RowRange {
  std::size_t begin_n = 0;
  std::size_t ns = 0;
  friend bool operator==(const RowRange&, const RowRange&) = default;
};
/// Rectangle shared by all samples and channels of a layer (FS).
struct Patch {
  std::size_t begin_h = 0, begin_w = 0, hs = 0, ws = 0;
  friend bool operator==(const Patch&, const Patch&) = default;
};
/// Explicit sorted, duplicate-free positions (FRS).
struct ExplicitIndices {
  IndexSet indices;
  friend bool operator==(const ExplicitIndices&, const ExplicitIndices&) = default;
};

using LayerSampling = std::variant<FullLayer, RowRange, Patch, ExplicitIndices>;

struct LayerPlan {
  Shape4 dims;
  LayerSampling sampling;
  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

/// Index state for every BN layer, fixed for one epoch.
struct SamplingPlan {
  SamplingStrategy strategy;
  std::vector<LayerPlan> layers;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const SamplingPlan&, const SamplingPlan&) = default;
};

/// Sample count ns = max(1, round(ratio * n)) used by NS and BS.
std::size_t rows_for_ratio(std::size_t n, double ratio);
/// Patch side for FS: max(1, round(side * sqrt(ratio))), clamped to side.
std::size_t patch_side_for_ratio(std::size_t side, double ratio);

SamplingPlan make_plan(const SamplingStrategy& strategy, const std::vector<Shape4>& layer_dims,
                       std::int64_t epoch, std::uint64_t seed);

/// Redraws the random index state for a later epoch. NS state never changes.
SamplingPlan refresh_plan(const SamplingPlan& plan, std::int64_t epoch);

IndexSet plan_indices(const SamplingPlan& plan, std::size_t layer);

/// |indices| / (n*h*w) for one layer.
double realized_ratio(const SamplingPlan& plan, std::size_t layer);

nlohmann::json plan_manifest(const SamplingPlan& plan);

/// "Approach-sampled/original-ratio%" label, e.g. "BS-4/128-3.1%" or "FS-1/32-3.1%".
std::string run_label(const SamplingStrategy& strategy, std::size_t batch, std::size_t virtual_rows = 0,
                      bool pure_virtual = false);

}  // namespace bns

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "bns/rng.hpp"
#include "bns/tensor.hpp"

namespace bns {

/// Offline per-channel dataset moments used to synthesize virtual samples.
struct VirtualSampler {
  std::vector<double> dataset_mean;
  std::vector<double> dataset_std;
  std::size_t n_v = 1;
  std::size_t h = 0, w = 0, c = 0;
};

/// Per-channel mean and population std over every pixel of every sample.
VirtualSampler fit_dataset_stats(std::span<const Tensor4> dataset, std::size_t n_v = 1);

/// (n_v, h, w, c) tensor of independent Gaussian draws, channel k ~ N(mean_k, std_k^2).
Tensor4 sample_virtual(const VirtualSampler& vs, RngStream& rng);

/// [virtual; real] along N, virtual rows first.
Tensor4 prepend_virtual(const Tensor4& real, const Tensor4& virtual_rows);

/// Moments over the full feature maps of the first n_v samples.
ChannelStats virtual_stats(const Tensor4& x_with_virtual, std::size_t n_v);

/// JSON sidecar: {"mean": [...], "std": [...], "n_v": k, "input_dims": [h, w, c]}.
void save_virtual_sampler(const VirtualSampler& vs, const std::filesystem::path& path);
VirtualSampler load_virtual_sampler(const std::filesystem::path& path);

}  // namespace bns

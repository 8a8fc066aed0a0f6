#include "bns/vdn.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace bns {

VirtualSampler fit_dataset_stats(std::span<const Tensor4> dataset, std::size_t n_v) {
  if (dataset.empty()) throw std::invalid_argument("fit_dataset_stats: empty dataset");
  if (n_v == 0) throw std::invalid_argument("fit_dataset_stats: n_v must be >= 1");
  const auto& first = dataset.front();
  const std::size_t c = first.c();

  // Per-batch pairwise moments merged with the parallel-variance update.
  std::vector<double> mean(c, 0.0), m2(c, 0.0);
  double count = 0.0;
  for (const auto& batch : dataset) {
    if (batch.h() != first.h() || batch.w() != first.w() || batch.c() != c)
      throw std::invalid_argument("fit_dataset_stats: inconsistent image shape");
    const ChannelStats s = channel_moments(batch, full_indices(batch));
    const double nb = static_cast<double>(s.count);
    const double total = count + nb;
    for (std::size_t k = 0; k < c; ++k) {
      const double delta = s.mean[k] - mean[k];
      mean[k] += delta * nb / total;
      m2[k] += s.variance[k] * nb + delta * delta * count * nb / total;
    }
    count = total;
  }

  VirtualSampler vs;
  vs.dataset_mean = mean;
  vs.dataset_std.resize(c);
  for (std::size_t k = 0; k < c; ++k) vs.dataset_std[k] = std::sqrt(std::max(0.0, m2[k] / count));
  vs.n_v = n_v;
  vs.h = first.h();
  vs.w = first.w();
  vs.c = c;
  return vs;
}

Tensor4 sample_virtual(const VirtualSampler& vs, RngStream& rng) {
  Tensor4 out(vs.n_v, vs.h, vs.w, vs.c);
  auto d = out.data();
  for (std::size_t p = 0; p < out.positions(); ++p)
    for (std::size_t k = 0; k < vs.c; ++k) {
      const double z = rng.normal();
      d[p * vs.c + k] = vs.dataset_mean[k] + vs.dataset_std[k] * z;
    }
  return out;
}

Tensor4 prepend_virtual(const Tensor4& real, const Tensor4& virtual_rows) {
  if (real.h() != virtual_rows.h() || real.w() != virtual_rows.w() || real.c() != virtual_rows.c())
    throw std::invalid_argument("prepend_virtual: shape mismatch");
  const Tensor4 parts[] = {virtual_rows, real};
  return concat_rows(parts);
}

ChannelStats virtual_stats(const Tensor4& x_with_virtual, std::size_t n_v) {
  if (n_v == 0 || n_v > x_with_virtual.n())
    throw std::invalid_argument("virtual_stats: n_v must be in [1, n]");
  return channel_moments(x_with_virtual, gather_rows(x_with_virtual, 0, n_v));
}

void save_virtual_sampler(const VirtualSampler& vs, const std::filesystem::path& path) {
  nlohmann::json j;
  j["mean"] = vs.dataset_mean;
  j["std"] = vs.dataset_std;
  j["n_v"] = vs.n_v;
  j["input_dims"] = {vs.h, vs.w, vs.c};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

VirtualSampler load_virtual_sampler(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto j = nlohmann::json::parse(in);
  VirtualSampler vs;
  vs.dataset_mean = j.at("mean").get<std::vector<double>>();
  vs.dataset_std = j.at("std").get<std::vector<double>>();
  vs.n_v = j.at("n_v").get<std::size_t>();
  const auto dims = j.at("input_dims").get<std::vector<std::size_t>>();
  if (dims.size() != 3) throw std::invalid_argument("input_dims must have 3 entries");
  vs.h = dims[0];
  vs.w = dims[1];
  vs.c = dims[2];
  if (vs.dataset_mean.size() != vs.c || vs.dataset_std.size() != vs.c)
    throw std::invalid_argument("virtual sampler: channel count mismatch");
  for (double s : vs.dataset_std)
    if (s < 0.0) throw std::invalid_argument("virtual sampler: negative std");
  return vs;
}

}  // namespace bns

#include "bns/microbn.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace bns {

std::string_view to_string(MicroPolicy p) {
  switch (p) {
    case MicroPolicy::local: return "local";
    case MicroPolicy::sync_full: return "sync_full";
    case MicroPolicy::sync_bs: return "sync_bs";
    case MicroPolicy::local_vdn: return "local_vdn";
  }
  return "?";
}

MicroPolicy parse_micro_policy(std::string_view s) {
  if (s == "local") return MicroPolicy::local;
  if (s == "sync_full") return MicroPolicy::sync_full;
  if (s == "sync_bs") return MicroPolicy::sync_bs;
  if (s == "local_vdn") return MicroPolicy::local_vdn;
  throw std::invalid_argument("unknown micro-BN policy '" + std::string(s) + "'");
}

void MicroBnConfig::validate() const {
  if (statistic_batch == 0) throw std::invalid_argument("statistic_batch must be >= 1");
  if (gradient_batch == 0 || gradient_batch % statistic_batch != 0)
    throw std::invalid_argument("gradient_batch must be a positive multiple of statistic_batch");
  if (policy == MicroPolicy::sync_bs && (k_nodes == 0 || k_nodes > nodes()))
    throw std::invalid_argument("k_nodes must be in [1, " + std::to_string(nodes()) + "]");
  if (policy == MicroPolicy::local_vdn) {
    if (vdn.mode == VdnMode::off) throw std::invalid_argument("local_vdn needs vdn mode pure or mixed");
    if (vdn.n_v == 0) throw std::invalid_argument("local_vdn needs n_v >= 1");
    if (!(vdn.mix >= 0.0 && vdn.mix <= 1.0)) throw std::invalid_argument("mix must be in [0, 1]");
  }
}

std::vector<Tensor4> shard_batch(const Tensor4& x, std::size_t K) {
  if (K == 0 || x.n() % K != 0)
    throw std::invalid_argument("shard_batch: n = " + std::to_string(x.n()) + " is not divisible by K = " +
                                std::to_string(K));
  const std::size_t per = x.n() / K;
  std::vector<Tensor4> out;
  out.reserve(K);
  for (std::size_t j = 0; j < K; ++j) out.push_back(x.rows(j * per, per));
  return out;
}

NodeMoments node_moments(const Tensor4& shard) {
  NodeMoments nm;
  nm.count = shard.positions();
  nm.sum.assign(shard.c(), 0.0);
  nm.sum_sq.assign(shard.c(), 0.0);
  std::vector<double> vals(nm.count), sq(nm.count);
  const auto d = shard.data();
  for (std::size_t k = 0; k < shard.c(); ++k) {
    for (std::size_t p = 0; p < nm.count; ++p) {
      vals[p] = d[p * shard.c() + k];
      sq[p] = vals[p] * vals[p];
    }
    nm.sum[k] = pairwise_sum(vals);
    nm.sum_sq[k] = pairwise_sum(sq);
  }
  return nm;
}

ChannelStats pool_moments(std::span<const NodeMoments> nodes) {
  if (nodes.empty()) throw std::invalid_argument("pool_moments: no nodes");
  const std::size_t c = nodes.front().sum.size();
  ChannelStats out;
  out.mean.resize(c);
  out.variance.resize(c);
  for (const auto& n : nodes) {
    if (n.sum.size() != c || n.sum_sq.size() != c) throw std::invalid_argument("pool_moments: channel mismatch");
    out.count += n.count;
  }
  if (out.count == 0) throw std::invalid_argument("empty reduction");
  const double inv = 1.0 / static_cast<double>(out.count);
  std::vector<double> s(nodes.size()), q(nodes.size());
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      s[j] = nodes[j].sum[k];
      q[j] = nodes[j].sum_sq[k];
    }
    const double mean = pairwise_sum(s) * inv;
    out.mean[k] = mean;
    out.variance[k] = std::max(0.0, pairwise_sum(q) * inv - mean * mean);
  }
  return out;
}

ChannelStats pooled_stats(std::span<const Tensor4> shards) {
  if (shards.empty()) throw std::invalid_argument("pooled_stats: no shards");
  const std::size_t c = shards.front().c();
  std::size_t count = 0;
  for (const auto& s : shards) {
    if (s.c() != c) throw std::invalid_argument("pooled_stats: channel mismatch");
    count += s.positions();
  }
  const double inv = 1.0 / static_cast<double>(count);

  // Channel-major copy of every shard, as each node would hold it.
  std::vector<std::vector<double>> local(shards.size());
  for (std::size_t j = 0; j < shards.size(); ++j) {
    const std::size_t m = shards[j].positions();
    local[j].resize(c * m);
    const auto d = shards[j].data();
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t k = 0; k < c; ++k) local[j][k * m + p] = d[p * c + k];
  }

  ChannelStats out;
  out.mean.resize(c);
  out.variance.resize(c);
  out.count = count;
  std::vector<double> partial(shards.size()), dev;
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t j = 0; j < shards.size(); ++j) {
      const std::size_t m = shards[j].positions();
      partial[j] = pairwise_sum(std::span<const double>(local[j].data() + k * m, m));
    }
    const double mean = pairwise_sum(partial) * inv;
    for (std::size_t j = 0; j < shards.size(); ++j) {
      const std::size_t m = shards[j].positions();
      dev.resize(m);
      const double* v = local[j].data() + k * m;
      for (std::size_t p = 0; p < m; ++p) {
        const double d = v[p] - mean;
        dev[p] = d * d;
      }
      partial[j] = pairwise_sum(dev);
    }
    out.mean[k] = mean;
    out.variance[k] = pairwise_sum(partial) * inv;
  }
  return out;
}

std::vector<std::size_t> choose_nodes(std::size_t K, std::size_t k, RngStream& rng) {
  if (k == 0 || k > K) throw std::invalid_argument("choose_nodes: k out of range");
  std::vector<std::size_t> ids(K);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[rng.uniform_int(i, K - 1)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<ChannelStats> node_statistics(std::span<const Tensor4> shards, const MicroBnConfig& cfg,
                                          RngStream& rng) {
  std::vector<std::size_t> chosen;
  if (cfg.policy == MicroPolicy::sync_bs) chosen = choose_nodes(shards.size(), cfg.k_nodes, rng);
  return node_statistics(shards, cfg, chosen);
}

std::vector<ChannelStats> node_statistics(std::span<const Tensor4> shards, const MicroBnConfig& cfg,
                                          std::span<const std::size_t> chosen) {
  if (shards.empty()) throw std::invalid_argument("node_statistics: no shards");
  const std::size_t K = shards.size();
  std::vector<ChannelStats> out;
  out.reserve(K);
  switch (cfg.policy) {
    case MicroPolicy::local:
      for (const auto& s : shards) out.push_back(channel_moments(s, full_indices(s)));
      break;
    case MicroPolicy::sync_full:
      out.assign(K, pooled_stats(shards));
      break;
    case MicroPolicy::sync_bs: {
      if (chosen.empty() || chosen.size() > K) throw std::invalid_argument("node_statistics: k out of range");
      std::vector<Tensor4> picked;
      for (auto j : chosen) {
        if (j >= K) throw std::out_of_range("node_statistics: node id out of range");
        picked.push_back(shards[j]);
      }
      out.assign(K, pooled_stats(picked));
      break;
    }
    case MicroPolicy::local_vdn: {
      const std::size_t n_v = cfg.vdn.n_v;
      for (const auto& s : shards) {
        if (s.n() <= n_v) throw std::invalid_argument("node_statistics: shard has no real rows after virtual rows");
        const ChannelStats v = virtual_stats(s, n_v);
        if (cfg.vdn.mode == VdnMode::pure) {
          out.push_back(v);
        } else {
          IndexSet real = gather_rows(s, n_v, s.n() - n_v);
          out.push_back(mix_stats(v, channel_moments(s, real), cfg.vdn.mix));
        }
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

MicroScheme::MicroScheme(MicroBnConfig cfg, std::vector<std::size_t> chosen)
    : cfg_(cfg), chosen_(std::move(chosen)) {
  cfg_.validate();
  if (cfg_.policy == MicroPolicy::sync_bs && chosen_.size() != cfg_.k_nodes)
    throw std::invalid_argument("MicroScheme: expected " + std::to_string(cfg_.k_nodes) + " chosen nodes");
}

std::vector<BnGroup> MicroScheme::groups(std::size_t, const Shape4& input) const {
  const std::size_t K = cfg_.nodes();
  const std::size_t sb = cfg_.statistic_batch;
  const std::size_t per = cfg_.policy == MicroPolicy::local_vdn ? cfg_.vdn.n_v + sb : sb;
  if (input.n != K * per)
    throw std::invalid_argument("MicroScheme: batch of " + std::to_string(input.n) + " rows, expected " +
                                std::to_string(K * per));
  const std::size_t hw = input.h * input.w;
  std::vector<BnGroup> out;

  switch (cfg_.policy) {
    case MicroPolicy::local:
      for (std::size_t j = 0; j < K; ++j)
        out.push_back({j * per, per, {{full_indices(Shape4{per, input.h, input.w, input.c}), 1.0, {}}}});
      break;
    case MicroPolicy::sync_full: {
      StatsFn pooled = [K](const Tensor4& x, const IndexSet&) {
        const auto shards = shard_batch(x, K);
        return pooled_stats(shards);
      };
      out.push_back({0, input.n, {{full_indices(input), 1.0, pooled}}});
      break;
    }
    case MicroPolicy::sync_bs: {
      IndexSet idx;
      for (auto j : chosen_) {
        const IndexSet rows = gather_rows(input, j * sb, sb);
        idx.insert(idx.end(), rows.begin(), rows.end());
      }
      StatsFn pooled = [K, chosen = chosen_](const Tensor4& x, const IndexSet&) {
        const auto shards = shard_batch(x, K);
        std::vector<Tensor4> picked;
        for (auto j : chosen) picked.push_back(shards[j]);
        return pooled_stats(picked);
      };
      out.push_back({0, input.n, {{std::move(idx), 1.0, pooled}}});
      break;
    }
    case MicroPolicy::local_vdn: {
      const std::size_t n_v = cfg_.vdn.n_v;
      const Shape4 node{per, input.h, input.w, input.c};
      IndexSet virt = gather_rows(node, 0, n_v);
      IndexSet real(sb * hw);
      std::iota(real.begin(), real.end(), n_v * hw);
      for (std::size_t j = 0; j < K; ++j) {
        BnGroup g{j * per, per, {}};
        if (cfg_.vdn.mode == VdnMode::pure) {
          g.sources.push_back({virt, 1.0, {}});
        } else {
          g.sources.push_back({virt, cfg_.vdn.mix, {}});
          g.sources.push_back({real, 1.0 - cfg_.vdn.mix, {}});
        }
        out.push_back(std::move(g));
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

MicroBnPolicy::MicroBnPolicy(const SyntheticDataset& data, const TrainConfig& tcfg, MicroBnConfig cfg)
    : tcfg_(tcfg), cfg_(cfg) {
  cfg_.validate();
  if (tcfg_.batch_size != cfg_.gradient_batch)
    throw std::invalid_argument("micro-BN: batch_size (" + std::to_string(tcfg_.batch_size) +
                                ") must equal gradient_batch (" + std::to_string(cfg_.gradient_batch) + ")");
  if (cfg_.policy == MicroPolicy::local_vdn) {
    const Tensor4 all[] = {data.train_images};
    sampler_ = fit_dataset_stats(all, cfg_.vdn.n_v);
  }
}

void MicroBnPolicy::begin_epoch(std::size_t epoch) {
  chosen_.clear();
  if (cfg_.policy == MicroPolicy::sync_bs) {
    RngStream rng(tcfg_.seed, {epoch, 0, Purpose::node_choice});
    chosen_ = choose_nodes(cfg_.nodes(), cfg_.k_nodes, rng);
  }
  scheme_ = std::make_unique<MicroScheme>(cfg_, chosen_);
}

BatchPolicy::Step MicroBnPolicy::prepare(const Tensor4& real_batch, std::size_t epoch, std::size_t iteration) {
  if (!scheme_) throw std::logic_error("MicroBnPolicy: begin_epoch not called");
  if (real_batch.n() != cfg_.gradient_batch) throw std::invalid_argument("MicroBnPolicy: wrong batch size");
  if (cfg_.policy != MicroPolicy::local_vdn)
    return {real_batch, BatchLayout::all_real(real_batch.n()), scheme_.get()};

  const std::size_t K = cfg_.nodes(), sb = cfg_.statistic_batch, n_v = cfg_.vdn.n_v;
  std::vector<Tensor4> parts;
  BatchLayout layout;
  for (std::size_t j = 0; j < K; ++j) {
    // Independent virtual stream per node.
    RngStream rng(tcfg_.seed, {epoch, iteration, Purpose::virtual_samples, j + 1});
    parts.push_back(sample_virtual(sampler_, rng));
    parts.push_back(real_batch.rows(j * sb, sb));
    for (std::size_t r = 0; r < sb; ++r) layout.real_rows.push_back(j * (n_v + sb) + n_v + r);
  }
  return {concat_rows(parts), std::move(layout), scheme_.get()};
}

nlohmann::json MicroBnPolicy::epoch_manifest() const {
  nlohmann::json j;
  j["policy"] = std::string(to_string(cfg_.policy));
  j["gradient_batch"] = cfg_.gradient_batch;
  j["statistic_batch"] = cfg_.statistic_batch;
  j["nodes"] = cfg_.nodes();
  if (cfg_.policy == MicroPolicy::sync_bs) j["chosen_nodes"] = chosen_;
  if (cfg_.policy == MicroPolicy::local_vdn)
    j["vdn"] = {{"mode", std::string(to_string(cfg_.vdn.mode))}, {"n_v", cfg_.vdn.n_v}, {"mix", cfg_.vdn.mix}};
  return j;
}

std::string MicroBnPolicy::label() const { return micro_label(cfg_); }

std::string micro_label(const MicroBnConfig& cfg) {
  std::string p(to_string(cfg.policy));
  if (cfg.policy == MicroPolicy::sync_bs) p += std::to_string(cfg.k_nodes);
  return p + "-(" + std::to_string(cfg.gradient_batch) + " " + std::to_string(cfg.statistic_batch) + ")";
}

TrainReport run_microbn(Model& model, const SyntheticDataset& data, const MicroBnConfig& cfg,
                        const TrainConfig& tcfg) {
  MicroBnPolicy policy(data, tcfg, cfg);
  return train(model, data, tcfg, policy);
}

}  // namespace bns

#include "bns/sampling.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "bns/rng.hpp"

namespace bns {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::full: return "Full";
    case Strategy::ns: return "NS";
    case Strategy::bs: return "BS";
    case Strategy::fs: return "FS";
    case Strategy::frs: return "FRS";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  std::string up(name);
  for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (up == "FULL" || up == "BN") return Strategy::full;
  if (up == "NS") return Strategy::ns;
  if (up == "BS") return Strategy::bs;
  if (up == "FS") return Strategy::fs;
  if (up == "FRS") return Strategy::frs;
  throw std::invalid_argument("unknown sampling strategy '" + std::string(name) + "'");
}

SamplingStrategy::SamplingStrategy(Strategy tag, double ratio) : tag_(tag), ratio_(ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw std::invalid_argument("ratio must be in (0, 1], got " + std::to_string(ratio));
  if (tag == Strategy::full && ratio != 1.0)
    throw std::invalid_argument("ratio must be 1 for the Full strategy");
}

std::size_t rows_for_ratio(std::size_t n, double ratio) {
  const auto ns = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::max<std::size_t>(1, ns);
}

std::size_t patch_side_for_ratio(std::size_t side, double ratio) {
  const auto s = static_cast<std::size_t>(std::llround(static_cast<double>(side) * std::sqrt(ratio)));
  return std::clamp<std::size_t>(s, 1, side);
}

namespace {

LayerSampling draw_layer(const SamplingStrategy& strategy, const Shape4& d, std::size_t layer,
                         std::int64_t epoch, std::uint64_t seed) {
  RngStream rng(seed, {static_cast<std::uint64_t>(epoch), layer, Purpose::plan});
  switch (strategy.tag()) {
    case Strategy::full:
      return FullLayer{};
    case Strategy::ns: {
      const std::size_t ns = rows_for_ratio(d.n, strategy.ratio());
      if (ns > d.n) throw std::invalid_argument("oversampling");
      return RowRange{0, ns};
    }
    case Strategy::bs: {
      const std::size_t ns = rows_for_ratio(d.n, strategy.ratio());
      if (ns > d.n) throw std::invalid_argument("oversampling");
      return RowRange{static_cast<std::size_t>(rng.uniform_int(0, d.n - ns)), ns};
    }
    case Strategy::fs: {
      Patch p;
      p.hs = patch_side_for_ratio(d.h, strategy.ratio());
      p.ws = patch_side_for_ratio(d.w, strategy.ratio());
      p.begin_h = static_cast<std::size_t>(rng.uniform_int(0, d.h - p.hs));
      p.begin_w = static_cast<std::size_t>(rng.uniform_int(0, d.w - p.ws));
      return p;
    }
    case Strategy::frs: {
      const std::size_t m = d.positions();
      const auto s = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(strategy.ratio() * static_cast<double>(m))));
      if (s > m) throw std::invalid_argument("oversampling");
      // Partial Fisher-Yates: the first s slots are a uniform draw without replacement.
      std::vector<std::size_t> pool(m);
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      for (std::size_t i = 0; i < s; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(i, m - 1));
        std::swap(pool[i], pool[j]);
      }
      pool.resize(s);
      std::sort(pool.begin(), pool.end());
      return ExplicitIndices{std::move(pool)};
    }
  }
  throw std::logic_error("unhandled strategy");
}

}  // namespace

SamplingPlan make_plan(const SamplingStrategy& strategy, const std::vector<Shape4>& layer_dims,
                       std::int64_t epoch, std::uint64_t seed) {
  SamplingPlan plan;
  plan.strategy = strategy;
  plan.epoch = epoch;
  plan.seed = seed;
  plan.layers.reserve(layer_dims.size());
  for (std::size_t l = 0; l < layer_dims.size(); ++l) {
    const auto& d = layer_dims[l];
    if (d.n == 0 || d.h == 0 || d.w == 0 || d.c == 0)
      throw std::invalid_argument("make_plan: layer " + std::to_string(l) + " has a zero dimension");
    plan.layers.push_back({d, draw_layer(strategy, d, l, epoch, seed)});
  }
  return plan;
}

SamplingPlan refresh_plan(const SamplingPlan& plan, std::int64_t epoch) {
  if (epoch <= plan.epoch)
    throw std::invalid_argument("refresh_plan: epoch " + std::to_string(epoch) +
                                " is not after plan epoch " + std::to_string(plan.epoch));
  if (plan.strategy.tag() == Strategy::ns || plan.strategy.tag() == Strategy::full) {
    SamplingPlan same = plan;
    same.epoch = epoch;
    return same;
  }
  std::vector<Shape4> dims;
  dims.reserve(plan.layers.size());
  for (const auto& l : plan.layers) dims.push_back(l.dims);
  return make_plan(plan.strategy, dims, epoch, plan.seed);
}

IndexSet plan_indices(const SamplingPlan& plan, std::size_t layer) {
  if (layer >= plan.layers.size())
    throw std::out_of_range("plan_indices: unknown layer " + std::to_string(layer));
  const auto& lp = plan.layers[layer];
  return std::visit(
      [&](const auto& st) -> IndexSet {
        using T = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<T, FullLayer>) {
          return full_indices(lp.dims);
        } else if constexpr (std::is_same_v<T, RowRange>) {
          return gather_rows(lp.dims, st.begin_n, st.ns);
        } else if constexpr (std::is_same_v<T, Patch>) {
          return gather_patch(lp.dims, st.begin_h, st.begin_w, st.hs, st.ws);
        } else {
          return st.indices;
        }
      },
      lp.sampling);
}

double realized_ratio(const SamplingPlan& plan, std::size_t layer) {
  if (layer >= plan.layers.size())
    throw std::out_of_range("realized_ratio: unknown layer " + std::to_string(layer));
  const auto& lp = plan.layers[layer];
  const double m = static_cast<double>(lp.dims.positions());
  return std::visit(
      [&](const auto& st) -> double {
        using T = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<T, FullLayer>) {
          return 1.0;
        } else if constexpr (std::is_same_v<T, RowRange>) {
          return static_cast<double>(st.ns * lp.dims.h * lp.dims.w) / m;
        } else if constexpr (std::is_same_v<T, Patch>) {
          return static_cast<double>(lp.dims.n * st.hs * st.ws) / m;
        } else {
          return static_cast<double>(st.indices.size()) / m;
        }
      },
      lp.sampling);
}

nlohmann::json plan_manifest(const SamplingPlan& plan) {
  nlohmann::json j;
  j["strategy"] = std::string(to_string(plan.strategy.tag()));
  j["ratio"] = plan.strategy.ratio();
  j["epoch"] = plan.epoch;
  auto layers = nlohmann::json::array();
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const auto& lp = plan.layers[l];
    nlohmann::json e;
    e["layer"] = l;
    e["dims"] = {lp.dims.n, lp.dims.h, lp.dims.w, lp.dims.c};
    e["realized_ratio"] = realized_ratio(plan, l);
    std::visit(
        [&](const auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, RowRange>) {
            e["begin_n"] = st.begin_n;
            e["ns"] = st.ns;
          } else if constexpr (std::is_same_v<T, Patch>) {
            e["begin_h"] = st.begin_h;
            e["begin_w"] = st.begin_w;
            e["hs"] = st.hs;
            e["ws"] = st.ws;
          } else if constexpr (std::is_same_v<T, ExplicitIndices>) {
            e["indices"] = st.indices;
          }
        },
        lp.sampling);
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j;
}

std::string run_label(const SamplingStrategy& strategy, std::size_t batch, std::size_t virtual_rows,
                      bool pure_virtual) {
  auto pct = [](double r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * r);
    return std::string(buf);
  };
  auto fraction = [](double r) {
    return "1/" + std::to_string(static_cast<long long>(std::llround(1.0 / r)));
  };
  const double n = static_cast<double>(batch);
  if (pure_virtual) {
    return "VDN-" + std::to_string(virtual_rows) + "/" + std::to_string(batch) + "-" +
           pct(static_cast<double>(virtual_rows) / n);
  }
  std::string label;
  switch (strategy.tag()) {
    case Strategy::full:
      label = "BN-" + std::to_string(batch) + "/" + std::to_string(batch) + "-100.0%";
      break;
    case Strategy::ns:
    case Strategy::bs: {
      const std::size_t ns = rows_for_ratio(batch, strategy.ratio());
      label = std::string(to_string(strategy.tag())) + "-" + std::to_string(ns) + "/" +
              std::to_string(batch) + "-" + pct(static_cast<double>(ns) / n);
      break;
    }
    case Strategy::fs:
    case Strategy::frs:
      label = std::string(to_string(strategy.tag())) + "-" + fraction(strategy.ratio()) + "-" +
              pct(strategy.ratio());
      break;
  }
  if (virtual_rows > 0) label += "+VDN-" + std::to_string(virtual_rows) + "/" + std::to_string(batch);
  return label;
}

}  // namespace bns

#include "bns/net.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace bns {

// ---------------------------------------------------------------------------
// Model

ModelSpec conv_bn_model(std::size_t h, std::size_t w, std::size_t c, std::vector<std::size_t> channels,
                        std::size_t classes) {
  ModelSpec spec;
  spec.input = {1, h, w, c};
  for (std::size_t ch : channels) {
    spec.layers.push_back({LayerKind::conv3x3, ch, false});
    spec.layers.push_back({LayerKind::bn, 0, false});
    spec.layers.push_back({LayerKind::relu, 0, false});
  }
  spec.layers.push_back({LayerKind::global_avg_pool, 0, false});
  spec.layers.push_back({LayerKind::dense, classes, true});
  return spec;
}

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.input.h == 0 || spec.input.w == 0 || spec.input.c == 0)
    throw std::invalid_argument("ModelSpec: input dims must be >= 1");
  Model m;
  m.spec_ = spec;
  std::size_t h = spec.input.h, w = spec.input.w, c = spec.input.c;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& ls = spec.layers[i];
    RngStream rng(seed, {0, i, Purpose::init});
    switch (ls.kind) {
      case LayerKind::conv3x3: {
        if (ls.out == 0) throw std::invalid_argument("conv3x3 needs out >= 1");
        Conv3x3 conv;
        conv.cin = c;
        conv.cout = ls.out;
        conv.weight.resize(9 * c * ls.out);
        const double sd = std::sqrt(2.0 / static_cast<double>(9 * c));
        for (auto& v : conv.weight) v = sd * rng.normal();
        if (ls.bias) conv.bias.assign(ls.out, 0.0);
        c = ls.out;
        m.layers_.emplace_back(std::move(conv));
        break;
      }
      case LayerKind::dense: {
        if (ls.out == 0) throw std::invalid_argument("dense needs out >= 1");
        Dense d;
        d.in = h * w * c;
        d.out = ls.out;
        d.weight.resize(d.in * d.out);
        const double sd = std::sqrt(2.0 / static_cast<double>(d.in));
        for (auto& v : d.weight) v = sd * rng.normal();
        if (ls.bias) d.bias.assign(ls.out, 0.0);
        h = w = 1;
        c = ls.out;
        m.layers_.emplace_back(std::move(d));
        break;
      }
      case LayerKind::relu:
        m.layers_.emplace_back(Relu{});
        break;
      case LayerKind::bn:
        m.layers_.emplace_back(BatchNorm{BnLayerState::make(c, spec.bn_decay, spec.bn_epsilon), m.bn_count_++});
        break;
      case LayerKind::global_avg_pool:
        h = w = 1;
        m.layers_.emplace_back(GlobalAvgPool{});
        break;
    }
  }
  return m;
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Shape4 next_shape(const Layer& layer, Shape4 s) {
  return std::visit(overloaded{
                        [&](const Conv3x3& c) { return Shape4{s.n, s.h, s.w, c.cout}; },
                        [&](const Dense& d) { return Shape4{s.n, 1, 1, d.out}; },
                        [&](const GlobalAvgPool&) { return Shape4{s.n, 1, 1, s.c}; },
                        [&](const auto&) { return s; },
                    },
                    layer);
}

}  // namespace

std::vector<Shape4> Model::bn_input_shapes(std::size_t n) const {
  std::vector<Shape4> out;
  Shape4 s{n, spec_.input.h, spec_.input.w, spec_.input.c};
  for (const auto& l : layers_) {
    if (std::holds_alternative<BatchNorm>(l)) out.push_back(s);
    s = next_shape(l, s);
  }
  return out;
}

Shape4 Model::output_shape(std::size_t n) const {
  Shape4 s{n, spec_.input.h, spec_.input.w, spec_.input.c};
  for (const auto& l : layers_) s = next_shape(l, s);
  return s;
}

std::vector<BnLayerState*> Model::bn_states() {
  std::vector<BnLayerState*> out;
  for (auto& l : layers_)
    if (auto* bn = std::get_if<BatchNorm>(&l)) out.push_back(&bn->state);
  return out;
}

std::vector<const BnLayerState*> Model::bn_states() const {
  std::vector<const BnLayerState*> out;
  for (const auto& l : layers_)
    if (const auto* bn = std::get_if<BatchNorm>(&l)) out.push_back(&bn->state);
  return out;
}

std::vector<std::span<double>> Model::parameters() {
  std::vector<std::span<double>> out;
  for (auto& l : layers_) {
    std::visit(overloaded{
                   [&](Conv3x3& c) {
                     out.emplace_back(c.weight);
                     if (!c.bias.empty()) out.emplace_back(c.bias);
                   },
                   [&](Dense& d) {
                     out.emplace_back(d.weight);
                     if (!d.bias.empty()) out.emplace_back(d.bias);
                   },
                   [&](BatchNorm& b) {
                     out.emplace_back(b.state.gamma);
                     out.emplace_back(b.state.beta);
                   },
                   [&](auto&) {},
               },
               l);
  }
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i);
    std::visit(overloaded{
                   [&](const Conv3x3& c) {
                     out.push_back(p + ".conv.weight");
                     if (!c.bias.empty()) out.push_back(p + ".conv.bias");
                   },
                   [&](const Dense& d) {
                     out.push_back(p + ".dense.weight");
                     if (!d.bias.empty()) out.push_back(p + ".dense.bias");
                   },
                   [&](const BatchNorm&) {
                     out.push_back(p + ".bn.gamma");
                     out.push_back(p + ".bn.beta");
                   },
                   [&](const auto&) {},
               },
               layers_[i]);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (auto& p : const_cast<Model*>(this)->parameters()) total += p.size();
  return total;
}

// ---------------------------------------------------------------------------
// Schemes and layouts

std::string_view to_string(VdnMode m) {
  switch (m) {
    case VdnMode::off: return "off";
    case VdnMode::pure: return "pure";
    case VdnMode::mixed: return "mixed";
  }
  return "?";
}

VdnMode parse_vdn_mode(std::string_view s) {
  if (s == "off") return VdnMode::off;
  if (s == "pure") return VdnMode::pure;
  if (s == "mixed") return VdnMode::mixed;
  throw std::invalid_argument("unknown VDN mode '" + std::string(s) + "'");
}

PlanScheme::PlanScheme(const SamplingPlan* plan, VdnConfig vdn) : plan_(plan), vdn_(vdn) {
  if (vdn_.mode != VdnMode::off && vdn_.n_v == 0) throw std::invalid_argument("PlanScheme: n_v must be >= 1");
  if (!(vdn_.mix >= 0.0 && vdn_.mix <= 1.0)) throw std::invalid_argument("PlanScheme: mix must be in [0, 1]");
}

std::vector<BnGroup> PlanScheme::groups(std::size_t bn_layer, const Shape4& input) const {
  const std::size_t n_v = vdn_.mode == VdnMode::off ? 0 : vdn_.n_v;
  if (input.n <= n_v) throw std::invalid_argument("PlanScheme: batch has no real rows");
  const Shape4 real{input.n - n_v, input.h, input.w, input.c};

  auto real_indices = [&]() -> IndexSet {
    IndexSet idx;
    if (plan_ == nullptr) {
      idx = full_indices(real);
    } else {
      if (bn_layer >= plan_->layers.size()) throw std::out_of_range("PlanScheme: no plan for BN layer");
      const Shape4& d = plan_->layers[bn_layer].dims;
      if (d.n != real.n || d.h != real.h || d.w != real.w)
        throw std::invalid_argument("PlanScheme: plan dims do not match the layer input (shape mismatch)");
      idx = plan_indices(*plan_, bn_layer);
    }
    const std::size_t shift = n_v * input.h * input.w;
    for (auto& i : idx) i += shift;
    return idx;
  };

  BnGroup g{0, input.n, {}};
  switch (vdn_.mode) {
    case VdnMode::off:
      g.sources.push_back({real_indices(), 1.0, {}});
      break;
    case VdnMode::pure:
      g.sources.push_back({gather_rows(input, 0, n_v), 1.0, {}});
      break;
    case VdnMode::mixed:
      g.sources.push_back({gather_rows(input, 0, n_v), vdn_.mix, {}});
      g.sources.push_back({real_indices(), 1.0 - vdn_.mix, {}});
      break;
  }
  return {std::move(g)};
}

BatchLayout BatchLayout::all_real(std::size_t n) {
  BatchLayout b;
  b.real_rows.resize(n);
  std::iota(b.real_rows.begin(), b.real_rows.end(), std::size_t{0});
  return b;
}

BatchLayout BatchLayout::virtual_first(std::size_t n_v, std::size_t n_real) {
  BatchLayout b;
  b.real_rows.resize(n_real);
  std::iota(b.real_rows.begin(), b.real_rows.end(), n_v);
  return b;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

Tensor4 conv_forward(const Tensor4& x, const Conv3x3& L) {
  if (x.c() != L.cin) throw std::invalid_argument("conv3x3: input channel mismatch (shape mismatch)");
  const std::size_t N = x.n(), H = x.h(), W = x.w(), CI = L.cin, CO = L.cout;
  Tensor4 y(N, H, W, CO);
  const auto xd = x.data();
  auto yd = y.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double* out = yd.data() + y.offset(n, i, j, 0);
        if (!L.bias.empty())
          for (std::size_t o = 0; o < CO; ++o) out[o] = L.bias[o];
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + ky) - 1;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + kx) - 1;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* in = xd.data() + x.offset(n, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj), 0);
            const double* wk = L.weight.data() + (ky * 3 + kx) * CI * CO;
            for (std::size_t ci = 0; ci < CI; ++ci) {
              const double v = in[ci];
              const double* wrow = wk + ci * CO;
              for (std::size_t o = 0; o < CO; ++o) out[o] += v * wrow[o];
            }
          }
        }
      }
  return y;
}

Tensor4 conv_backward(const Tensor4& x, const Conv3x3& L, const Tensor4& dy, std::vector<double>& dw,
                      std::vector<double>& db) {
  const std::size_t N = x.n(), H = x.h(), W = x.w(), CI = L.cin, CO = L.cout;
  Tensor4 dx(N, H, W, CI);
  dw.assign(L.weight.size(), 0.0);
  if (!L.bias.empty()) db.assign(CO, 0.0);
  const auto xd = x.data();
  const auto gd = dy.data();
  auto dxd = dx.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double* g = gd.data() + dy.offset(n, i, j, 0);
        if (!L.bias.empty())
          for (std::size_t o = 0; o < CO; ++o) db[o] += g[o];
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + ky) - 1;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + kx) - 1;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t off = x.offset(n, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj), 0);
            const double* in = xd.data() + off;
            double* din = dxd.data() + off;
            const std::size_t base = (ky * 3 + kx) * CI * CO;
            for (std::size_t ci = 0; ci < CI; ++ci) {
              const double* wrow = L.weight.data() + base + ci * CO;
              double* dwrow = dw.data() + base + ci * CO;
              double acc = 0.0;
              for (std::size_t o = 0; o < CO; ++o) {
                dwrow[o] += in[ci] * g[o];
                acc += wrow[o] * g[o];
              }
              din[ci] += acc;
            }
          }
        }
      }
  return dx;
}

Tensor4 dense_forward(const Tensor4& x, const Dense& L) {
  const std::size_t feat = x.h() * x.w() * x.c();
  if (feat != L.in) throw std::invalid_argument("dense: input feature mismatch (shape mismatch)");
  Tensor4 y(x.n(), 1, 1, L.out);
  const auto xd = x.data();
  auto yd = y.data();
  for (std::size_t n = 0; n < x.n(); ++n) {
    double* out = yd.data() + n * L.out;
    for (std::size_t o = 0; o < L.out; ++o) out[o] = L.bias.empty() ? 0.0 : L.bias[o];
    const double* in = xd.data() + n * feat;
    for (std::size_t f = 0; f < feat; ++f) {
      const double v = in[f];
      const double* wrow = L.weight.data() + f * L.out;
      for (std::size_t o = 0; o < L.out; ++o) out[o] += v * wrow[o];
    }
  }
  return y;
}

Tensor4 dense_backward(const Tensor4& x, const Dense& L, const Tensor4& dy, std::vector<double>& dw,
                       std::vector<double>& db) {
  const std::size_t feat = L.in;
  Tensor4 dx(x.n(), x.h(), x.w(), x.c());
  dw.assign(L.weight.size(), 0.0);
  if (!L.bias.empty()) db.assign(L.out, 0.0);
  const auto xd = x.data();
  const auto gd = dy.data();
  auto dxd = dx.data();
  for (std::size_t n = 0; n < x.n(); ++n) {
    const double* g = gd.data() + n * L.out;
    const double* in = xd.data() + n * feat;
    if (!L.bias.empty())
      for (std::size_t o = 0; o < L.out; ++o) db[o] += g[o];
    for (std::size_t f = 0; f < feat; ++f) {
      const double* wrow = L.weight.data() + f * L.out;
      double* dwrow = dw.data() + f * L.out;
      double acc = 0.0;
      for (std::size_t o = 0; o < L.out; ++o) {
        dwrow[o] += in[f] * g[o];
        acc += wrow[o] * g[o];
      }
      dxd[n * feat + f] = acc;
    }
  }
  return dx;
}

Tensor4 gap_forward(const Tensor4& x) {
  Tensor4 y(x.n(), 1, 1, x.c());
  const double inv = 1.0 / static_cast<double>(x.h() * x.w());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t k = 0; k < x.c(); ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) acc += x.at(n, i, j, k);
      y.at(n, 0, 0, k) = acc * inv;
    }
  return y;
}

Tensor4 gap_backward(const Tensor4& x, const Tensor4& dy) {
  Tensor4 dx(x.n(), x.h(), x.w(), x.c());
  const double inv = 1.0 / static_cast<double>(x.h() * x.w());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t i = 0; i < x.h(); ++i)
      for (std::size_t j = 0; j < x.w(); ++j)
        for (std::size_t k = 0; k < x.c(); ++k) dx.at(n, i, j, k) = dy.at(n, 0, 0, k) * inv;
  return dx;
}

void write_rows(Tensor4& dst, const Tensor4& src, std::size_t row_begin) {
  const std::size_t row = dst.h() * dst.w() * dst.c();
  std::copy(src.data().begin(), src.data().end(), dst.data().begin() + static_cast<std::ptrdiff_t>(row_begin * row));
}

IndexSet row_positions(const Shape4& s, std::span<const std::size_t> rows) {
  IndexSet idx;
  idx.reserve(rows.size() * s.h * s.w);
  for (auto r : rows)
    for (std::size_t p = 0; p < s.h * s.w; ++p) idx.push_back(r * s.h * s.w + p);
  return idx;
}

ChannelStats average_stats(const std::vector<BnForwardCache>& caches) {
  if (caches.size() == 1) return caches.front().applied;
  ChannelStats out = caches.front().applied;
  for (std::size_t g = 1; g < caches.size(); ++g)
    for (std::size_t k = 0; k < out.channels(); ++k) {
      out.mean[k] += caches[g].applied.mean[k];
      out.variance[k] += caches[g].applied.variance[k];
      out.count += caches[g].applied.count;
    }
  const double inv = 1.0 / static_cast<double>(caches.size());
  for (std::size_t k = 0; k < out.channels(); ++k) {
    out.mean[k] *= inv;
    out.variance[k] *= inv;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / backward

ForwardResult forward(const Model& model, const Tensor4& x, Mode mode, const NormScheme* scheme,
                      const BatchLayout& layout, StatsRecorder* recorder) {
  const auto& in = model.spec().input;
  if (x.h() != in.h || x.w() != in.w || x.c() != in.c)
    throw std::invalid_argument("forward: input shape mismatch");
  if (layout.real_rows.empty()) throw std::invalid_argument("forward: no real rows");
  for (auto r : layout.real_rows)
    if (r >= x.n()) throw std::out_of_range("forward: real row out of range");
  if (mode == Mode::train && model.bn_count() > 0 && scheme == nullptr)
    throw std::invalid_argument("forward: train mode needs a normalization scheme");

  ForwardResult res;
  res.layout = layout;
  res.batch_shape = x.shape();
  res.version = model.version();
  res.mode = mode;
  res.applied.resize(model.bn_count());
  res.caches.reserve(model.layers().size());

  Tensor4 cur = x;
  for (const auto& layer : model.layers()) {
    LayerCache cache;
    cache.input = cur;
    std::visit(overloaded{
                   [&](const Conv3x3& c) { cur = conv_forward(cur, c); },
                   [&](const Dense& d) { cur = dense_forward(cur, d); },
                   [&](const Relu&) {
                     for (auto& v : cur.data()) v = v > 0.0 ? v : 0.0;
                   },
                   [&](const GlobalAvgPool&) { cur = gap_forward(cur); },
                   [&](const BatchNorm& bn) {
                     if (mode == Mode::eval) {
                       cur = bn_forward_eval(cur, bn.state);
                       return;
                     }
                     cache.groups = scheme->groups(bn.ordinal, cur.shape());
                     if (cache.groups.empty()) throw std::invalid_argument("forward: scheme returned no groups");
                     Tensor4 out(cur.n(), cur.h(), cur.w(), cur.c());
                     for (const auto& g : cache.groups) {
                       if (g.row_count == 0 || g.row_begin + g.row_count > cur.n())
                         throw std::out_of_range("forward: BN group rows out of range");
                       const bool whole = g.row_begin == 0 && g.row_count == cur.n();
                       const Tensor4 sub = whole ? cur : cur.rows(g.row_begin, g.row_count);
                       std::vector<StatTerm> terms;
                       for (const auto& src : g.sources) {
                         ChannelStats st = src.compute ? src.compute(sub, src.indices)
                                                       : channel_moments(sub, src.indices);
                         terms.push_back({std::move(st), src.indices, src.weight});
                       }
                       auto r = bn_forward_train(sub, bn.state, std::move(terms));
                       write_rows(out, r.output, g.row_begin);
                       cache.bn.push_back(std::move(r.cache));
                     }
                     res.applied[bn.ordinal] = average_stats(cache.bn);
                     // Estimation error against the full real batch; only defined
                     // when one set of statistics covers the whole batch.
                     if (recorder != nullptr && cache.groups.size() == 1) {
                       const ChannelStats full = channel_moments(cur, row_positions(cur.shape(), layout.real_rows));
                       recorder->record(bn.ordinal, res.applied[bn.ordinal], full);
                     }
                     cur = std::move(out);
                   },
               },
               layer);
    res.caches.push_back(std::move(cache));
  }
  if (cur.h() != 1 || cur.w() != 1) throw std::invalid_argument("forward: model must end in a (n,1,1,classes) output");

  const std::size_t K = cur.c();
  res.logits = Tensor4(layout.real_rows.size(), 1, 1, K);
  for (std::size_t r = 0; r < layout.real_rows.size(); ++r)
    for (std::size_t k = 0; k < K; ++k) res.logits.at(r, 0, 0, k) = cur.at(layout.real_rows[r], 0, 0, k);
  return res;
}

Gradients backward(const Model& model, const ForwardResult& fwd, const Tensor4& d_logits) {
  if (fwd.version != model.version()) throw std::logic_error("backward: stale forward cache");
  if (fwd.mode != Mode::train) throw std::logic_error("backward: forward was run in eval mode");
  if (fwd.caches.size() != model.layers().size()) throw std::logic_error("backward: cache does not match model");
  if (!d_logits.same_shape(fwd.logits)) throw std::invalid_argument("backward: d_logits shape mismatch");

  const Shape4 out = model.output_shape(fwd.batch_shape.n);
  // Virtual rows never enter the loss: their upstream gradient is zero.
  Tensor4 d(out.n, 1, 1, out.c);
  for (std::size_t r = 0; r < fwd.layout.real_rows.size(); ++r)
    for (std::size_t k = 0; k < out.c; ++k) d.at(fwd.layout.real_rows[r], 0, 0, k) = d_logits.at(r, 0, 0, k);

  const auto& layers = model.layers();
  std::vector<std::vector<std::vector<double>>> per_layer(layers.size());
  for (std::size_t li = layers.size(); li-- > 0;) {
    const LayerCache& cache = fwd.caches[li];
    auto& grads = per_layer[li];
    std::visit(overloaded{
                   [&](const Conv3x3& c) {
                     std::vector<double> dw, db;
                     d = conv_backward(cache.input, c, d, dw, db);
                     grads.push_back(std::move(dw));
                     if (!c.bias.empty()) grads.push_back(std::move(db));
                   },
                   [&](const Dense& dl) {
                     std::vector<double> dw, db;
                     d = dense_backward(cache.input, dl, d, dw, db);
                     grads.push_back(std::move(dw));
                     if (!dl.bias.empty()) grads.push_back(std::move(db));
                   },
                   [&](const Relu&) {
                     const auto xin = cache.input.data();
                     auto dd = d.data();
                     for (std::size_t i = 0; i < dd.size(); ++i)
                       if (!(xin[i] > 0.0)) dd[i] = 0.0;
                   },
                   [&](const GlobalAvgPool&) { d = gap_backward(cache.input, d); },
                   [&](const BatchNorm& bn) {
                     Tensor4 dx(d.n(), d.h(), d.w(), d.c());
                     std::vector<double> dgamma, dbeta;
                     for (std::size_t gi = 0; gi < cache.groups.size(); ++gi) {
                       const auto& g = cache.groups[gi];
                       const bool whole = g.row_begin == 0 && g.row_count == d.n();
                       const Tensor4 dsub = whole ? d : d.rows(g.row_begin, g.row_count);
                       BnGradients bg = bn_backward(dsub, cache.bn[gi], bn.state);
                       write_rows(dx, bg.d_input, g.row_begin);
                       if (gi == 0) {
                         dgamma = std::move(bg.d_gamma);
                         dbeta = std::move(bg.d_beta);
                       } else {
                         for (std::size_t k = 0; k < dgamma.size(); ++k) {
                           dgamma[k] += bg.d_gamma[k];
                           dbeta[k] += bg.d_beta[k];
                         }
                       }
                     }
                     d = std::move(dx);
                     grads.push_back(std::move(dgamma));
                     grads.push_back(std::move(dbeta));
                   },
               },
               layers[li]);
  }

  Gradients g;
  for (auto& lg : per_layer)
    for (auto& t : lg) g.params.push_back(std::move(t));
  g.d_input = std::move(d);
  return g;
}

LossResult softmax_cross_entropy(const Tensor4& logits, std::span<const int> labels) {
  const std::size_t N = logits.n(), K = logits.c();
  if (labels.size() != N) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  LossResult r;
  r.d_logits = Tensor4(N, 1, 1, K);
  std::vector<double> losses(N);
  const double invn = 1.0 / static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw std::out_of_range("softmax_cross_entropy: label out of range");
    double mx = logits.at(n, 0, 0, 0);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits.at(n, 0, 0, k) > mx) {
        mx = logits.at(n, 0, 0, k);
        arg = k;
      }
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, 0, 0, k) - mx);
    const double logz = std::log(z) + mx;
    losses[n] = logz - logits.at(n, 0, 0, static_cast<std::size_t>(y));
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits.at(n, 0, 0, k) - logz);
      r.d_logits.at(n, 0, 0, k) = (p - (static_cast<int>(k) == y ? 1.0 : 0.0)) * invn;
    }
    if (arg == static_cast<std::size_t>(y)) ++r.correct;
  }
  r.loss = pairwise_sum(losses) * invn;
  return r;
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

std::vector<bool> relu_pattern(const ForwardResult& fwd, const Model& model) {
  std::vector<bool> bits;
  for (std::size_t i = 0; i < model.layers().size(); ++i)
    if (std::holds_alternative<Relu>(model.layers()[i]))
      for (double v : fwd.caches[i].input.data()) bits.push_back(v > 0.0);
  return bits;
}

}  // namespace

GradCheckReport grad_check(const Model& model, const Tensor4& x, std::span<const int> labels,
                           const NormScheme* scheme, const BatchLayout& layout, double step) {
  Model probe = model;
  const auto base = forward(probe, x, Mode::train, scheme, layout);
  const auto loss = softmax_cross_entropy(base.logits, labels);
  const Gradients analytic = backward(probe, base, loss.d_logits);
  const auto pattern = relu_pattern(base, probe);

  GradCheckReport rep;
  rep.names = probe.parameter_names();

  auto evaluate_at = [&](const Model& m, const Tensor4& in, bool& kink) {
    const auto f = forward(m, in, Mode::train, scheme, layout);
    if (relu_pattern(f, m) != pattern) kink = true;
    return softmax_cross_entropy(f.logits, labels).loss;
  };

  auto tensor_error = [](double max_diff, double scale) { return max_diff / std::max(scale, 1e-6); };

  auto params = probe.parameters();
  for (std::size_t t = 0; t < params.size(); ++t) {
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double saved = params[t][i];
      bool kink = false;
      params[t][i] = saved + step;
      const double lp = evaluate_at(probe, x, kink);
      params[t][i] = saved - step;
      const double lm = evaluate_at(probe, x, kink);
      params[t][i] = saved;
      if (kink) {
        ++rep.skipped_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic.params[t][i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
      ++rep.checked;
    }
    rep.param_error.push_back(tensor_error(max_diff, scale));
  }

  Tensor4 xp = x;
  auto xd = xp.data();
  const std::size_t row = x.h() * x.w() * x.c();
  double max_diff = 0.0, scale = 0.0;
  for (auto r : layout.real_rows)
    for (std::size_t i = r * row; i < (r + 1) * row; ++i) {
      const double saved = xd[i];
      bool kink = false;
      xd[i] = saved + step;
      const double lp = evaluate_at(probe, xp, kink);
      xd[i] = saved - step;
      const double lm = evaluate_at(probe, xp, kink);
      xd[i] = saved;
      if (kink) {
        ++rep.skipped_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic.d_input.data()[i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
      ++rep.checked;
    }
  rep.input_error = tensor_error(max_diff, scale);

  rep.max_error = rep.input_error;
  for (double e : rep.param_error) rep.max_error = std::max(rep.max_error, e);
  return rep;
}

// ---------------------------------------------------------------------------
// Data

SyntheticDataset make_blob_dataset(const BlobParams& p) {
  if (p.classes < 2) throw std::invalid_argument("make_blob_dataset: classes must be >= 2");
  if (p.h < 3 || p.w < 3) throw std::invalid_argument("make_blob_dataset: images must be at least 3x3");
  if (p.per_class == 0 || p.val_per_class == 0)
    throw std::invalid_argument("make_blob_dataset: per_class and val_per_class must be >= 1");
  if (2 * p.shift + 3 > std::min(p.h, p.w)) throw std::invalid_argument("make_blob_dataset: shift too large");
  if (p.blobs == 0 || (!p.scatter && p.blobs != 1))
    throw std::invalid_argument("make_blob_dataset: blobs must be 1, or >= 1 with scatter");

  const double side = static_cast<double>(std::min(p.h, p.w));
  const double sig_long = p.blob_scale * 0.25 * side;
  const double sig_short = p.blob_scale * 0.08 * side;

  auto make_split = [&](std::size_t per_class, std::uint64_t split, Tensor4& images, std::vector<int>& labels) {
    const std::size_t N = per_class * p.classes;
    images = Tensor4(N, p.h, p.w, 1);
    labels.resize(N);
    RngStream rng(p.seed, {0, split, Purpose::data});
    for (std::size_t s = 0; s < N; ++s) {
      const int label = static_cast<int>(s % p.classes);
      labels[s] = label;
      const double theta = std::numbers::pi * label / static_cast<double>(p.classes);
      const double ct = std::cos(theta), st = std::sin(theta);
      // Blob centers: one near the image center, or `blobs` anywhere on a
      // torus so that every location is statistically alike.
      std::vector<std::pair<double, double>> centers;
      if (p.scatter) {
        for (std::size_t b = 0; b < p.blobs; ++b)
          centers.emplace_back(rng.uniform() * static_cast<double>(p.h), rng.uniform() * static_cast<double>(p.w));
      } else {
        double cy = (static_cast<double>(p.h) - 1.0) / 2.0, cx = (static_cast<double>(p.w) - 1.0) / 2.0;
        if (p.shift > 0) {
          const auto sh = static_cast<std::int64_t>(p.shift);
          cy += static_cast<double>(static_cast<std::int64_t>(rng.uniform_int(0, 2 * p.shift)) - sh);
          cx += static_cast<double>(static_cast<std::int64_t>(rng.uniform_int(0, 2 * p.shift)) - sh);
        }
        centers.emplace_back(cy, cx);
      }
      auto wrap = [](double d, double period) {
        d = std::fmod(d, period);
        if (d > period / 2) d -= period;
        if (d < -period / 2) d += period;
        return d;
      };
      const double offset = p.offset_std > 0.0 ? p.offset_std * rng.normal() : 0.0;
      for (std::size_t i = 0; i < p.h; ++i)
        for (std::size_t j = 0; j < p.w; ++j) {
          double val = offset;
          for (const auto& [cy, cx] : centers) {
            double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
            if (p.scatter) {
              dy = wrap(dy, static_cast<double>(p.h));
              dx = wrap(dx, static_cast<double>(p.w));
            }
            const double u = dx * ct + dy * st;
            const double v = -dx * st + dy * ct;
            val += p.amplitude *
                   std::exp(-(u * u) / (2 * sig_long * sig_long) - (v * v) / (2 * sig_short * sig_short));
          }
          if (p.noise > 0.0) val += p.noise * rng.normal();
          images.at(s, i, j, 0) = val;
        }
    }
  };

  SyntheticDataset ds;
  ds.params = p;
  make_split(p.per_class, 0, ds.train_images, ds.train_labels);
  make_split(p.val_per_class, 1, ds.val_images, ds.val_labels);
  return ds;
}

// ---------------------------------------------------------------------------
// Training

StandardPolicy::StandardPolicy(const Model& model, const SyntheticDataset& data, const TrainConfig& cfg)
    : cfg_(cfg), dims_(model.bn_input_shapes(cfg.batch_size)) {
  if (cfg_.vdn.mode != VdnMode::off) {
    const Tensor4 batches[] = {data.train_images};
    sampler_ = fit_dataset_stats(batches, cfg_.vdn.n_v);
  }
}

StandardPolicy::StandardPolicy(const Model& model, const TrainConfig& cfg, VirtualSampler sampler)
    : cfg_(cfg), dims_(model.bn_input_shapes(cfg.batch_size)), sampler_(std::move(sampler)) {
  const auto& in = model.spec().input;
  if (cfg_.vdn.mode != VdnMode::off &&
      (sampler_.h != in.h || sampler_.w != in.w || sampler_.c != in.c || sampler_.n_v != cfg_.vdn.n_v))
    throw std::invalid_argument("StandardPolicy: virtual sampler does not match the model input or n_v");
}

void StandardPolicy::begin_epoch(std::size_t epoch) {
  const auto e = static_cast<std::int64_t>(epoch);
  if (!started_) {
    plan_ = make_plan(cfg_.strategy, dims_, e, cfg_.seed);
    started_ = true;
  } else {
    plan_ = refresh_plan(plan_, e);
  }
  scheme_ = std::make_unique<PlanScheme>(&plan_, cfg_.vdn);
}

BatchPolicy::Step StandardPolicy::prepare(const Tensor4& real_batch, std::size_t epoch, std::size_t iteration) {
  if (!scheme_) throw std::logic_error("StandardPolicy: begin_epoch not called");
  if (cfg_.vdn.mode == VdnMode::off) return {real_batch, BatchLayout::all_real(real_batch.n()), scheme_.get()};
  RngStream rng(cfg_.seed, {epoch, iteration, Purpose::virtual_samples});
  const Tensor4 v = sample_virtual(sampler_, rng);
  return {prepend_virtual(real_batch, v), BatchLayout::virtual_first(v.n(), real_batch.n()), scheme_.get()};
}

nlohmann::json StandardPolicy::epoch_manifest() const {
  auto j = plan_manifest(plan_);
  j["vdn"] = {{"mode", std::string(to_string(cfg_.vdn.mode))}, {"n_v", cfg_.vdn.n_v}, {"mix", cfg_.vdn.mix}};
  return j;
}

std::string StandardPolicy::label() const {
  const bool vdn = cfg_.vdn.mode != VdnMode::off;
  return run_label(cfg_.strategy, cfg_.batch_size, vdn ? cfg_.vdn.n_v : 0, cfg_.vdn.mode == VdnMode::pure);
}

TrainReport train(Model& model, const SyntheticDataset& data, const TrainConfig& cfg) {
  StandardPolicy policy(model, data, cfg);
  return train(model, data, cfg, policy);
}

double evaluate(const Model& model, const Tensor4& images, std::span<const int> labels, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("evaluate: batch must be >= 1");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < images.n(); b += batch) {
    const std::size_t cnt = std::min(batch, images.n() - b);
    const auto f = forward(model, images.rows(b, cnt), Mode::eval, nullptr, BatchLayout::all_real(cnt));
    for (std::size_t r = 0; r < cnt; ++r) {
      std::size_t arg = 0;
      for (std::size_t k = 1; k < f.logits.c(); ++k)
        if (f.logits.at(r, 0, 0, k) > f.logits.at(r, 0, 0, arg)) arg = k;
      if (static_cast<int>(arg) == labels[b + r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(images.n());
}

TrainReport train(Model& model, const SyntheticDataset& data, const TrainConfig& cfg, BatchPolicy& policy) {
  const std::size_t N = data.train_images.n();
  if (cfg.batch_size == 0 || cfg.batch_size > N) throw std::invalid_argument("train: batch_size must be in [1, train size]");
  if (cfg.epochs == 0) throw std::invalid_argument("train: epochs must be >= 1");
  if (!(cfg.decay > 0.0 && cfg.decay <= 1.0)) throw std::invalid_argument("train: decay must be in (0, 1]");

  for (auto* st : model.bn_states()) st->decay = cfg.decay;

  TrainReport rep;
  rep.label = policy.label();
  ErrorRecorder recorder;
  auto params = model.parameters();
  std::vector<std::vector<double>> velocity;
  for (auto& p : params) velocity.emplace_back(p.size(), 0.0);

  const std::size_t iters = N / cfg.batch_size;
  const std::size_t row = data.train_images.h() * data.train_images.w() * data.train_images.c();
  const auto src = data.train_images.data();

  for (std::size_t e = 0; e < cfg.epochs && !rep.diverged; ++e) {
    if (!cfg.persist_moving_average)
      for (auto* st : model.bn_states()) st->initialized = false;
    policy.begin_epoch(e);
    rep.manifests.push_back(policy.epoch_manifest());

    double lr = cfg.lr;
    for (auto m : cfg.milestones)
      if (e >= m) lr *= cfg.lr_gamma;

    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    RngStream shuffle(cfg.seed, {e, 0, Purpose::shuffle});
    std::shuffle(perm.begin(), perm.end(), shuffle.engine());

    std::vector<double> losses;
    std::size_t correct = 0;
    for (std::size_t it = 0; it < iters; ++it) {
      std::vector<double> buf(cfg.batch_size * row);
      std::vector<int> labels(cfg.batch_size);
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t s = perm[it * cfg.batch_size + b];
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(s * row), row,
                    buf.begin() + static_cast<std::ptrdiff_t>(b * row));
        labels[b] = data.train_labels[s];
      }
      const Tensor4 batch(cfg.batch_size, data.train_images.h(), data.train_images.w(), data.train_images.c(),
                          std::move(buf));
      auto step = policy.prepare(batch, e, it);
      ForwardResult fwd;
      LossResult loss;
      try {
        fwd = forward(model, step.input, Mode::train, step.scheme, step.layout,
                      e < cfg.record_epochs ? &recorder : nullptr);
        loss = softmax_cross_entropy(fwd.logits, labels);
      } catch (const NonFiniteError&) {
        loss.loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(loss.loss)) {
        rep.diverged = true;
        break;
      }
      const auto grads = backward(model, fwd, loss.d_logits);
      bool finite = true;
      for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t i = 0; i < params[t].size(); ++i) {
          const double g = grads.params[t][i] + cfg.weight_decay * params[t][i];
          velocity[t][i] = cfg.momentum * velocity[t][i] + g;
          params[t][i] -= lr * velocity[t][i];
          finite = finite && std::isfinite(params[t][i]);
        }
      model.touch();
      auto states = model.bn_states();
      for (std::size_t l = 0; l < states.size(); ++l) {
        // Copy back only the running statistics: gamma/beta storage must stay
        // put because `params` views it.
        BnLayerState next = update_moving_average(*states[l], fwd.applied[l]);
        states[l]->moving_mean = std::move(next.moving_mean);
        states[l]->moving_var = std::move(next.moving_var);
        states[l]->initialized = next.initialized;
      }
      losses.push_back(loss.loss);
      correct += loss.correct;
      if (!finite) {
        rep.diverged = true;
        break;
      }
    }
    if (rep.diverged) break;

    EpochMetrics m;
    m.epoch = e;
    m.train_loss = pairwise_sum(losses) / static_cast<double>(losses.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(iters * cfg.batch_size);
    m.val_acc = evaluate(model, data.val_images, data.val_labels, cfg.eval_batch);
    rep.epochs.push_back(m);
  }
  rep.errors = recorder.trace();
  return rep;
}

void write_metrics_csv(const TrainReport& report, const TrainConfig& cfg, std::ostream& out, bool header) {
  if (header) out << "epoch,train_loss,val_acc,strategy,ratio,seed\n";
  const auto old = out.precision(17);
  for (const auto& m : report.epochs)
    out << m.epoch << ',' << m.train_loss << ',' << m.val_acc << ',' << report.label << ','
        << cfg.strategy.ratio() << ',' << cfg.seed << '\n';
  out.precision(old);
}

}  // namespace bns

#include "bns/batchnorm.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace bns {

namespace {

void require_finite(const ChannelStats& s, const char* what) {
  for (std::size_t k = 0; k < s.channels(); ++k)
    if (!std::isfinite(s.mean[k]) || !std::isfinite(s.variance[k]))
      throw NonFiniteError(std::string(what) + ": non-finite statistics");
}

void require_channels(const ChannelStats& s, std::size_t c, const char* what) {
  if (s.mean.size() != c || s.variance.size() != c)
    throw std::invalid_argument(std::string(what) + ": channel count mismatch");
}

}  // namespace

BnLayerState BnLayerState::make(std::size_t channels, double decay, double epsilon) {
  if (channels == 0) throw std::invalid_argument("BnLayerState: zero channels");
  if (!(epsilon > 0.0)) throw std::invalid_argument("BnLayerState: epsilon must be > 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("BnLayerState: decay must be in (0, 1]");
  BnLayerState s;
  s.gamma.assign(channels, 1.0);
  s.beta.assign(channels, 0.0);
  s.epsilon = epsilon;
  s.decay = decay;
  s.moving_mean.assign(channels, 0.0);
  s.moving_var.assign(channels, 1.0);
  return s;
}

ChannelStats combine_stats(std::span<const StatTerm> terms) {
  if (terms.empty()) throw std::invalid_argument("combine_stats: no terms");
  const std::size_t c = terms.front().stats.channels();
  double total = 0.0;
  for (const auto& t : terms) {
    require_channels(t.stats, c, "combine_stats");
    if (!(t.weight >= 0.0)) throw std::invalid_argument("combine_stats: negative weight");
    total += t.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("combine_stats: weights must sum to 1");

  ChannelStats out;
  out.mean.assign(c, 0.0);
  out.variance.assign(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double m = terms[0].weight * terms[0].stats.mean[k];
    double v = terms[0].weight * terms[0].stats.variance[k];
    for (std::size_t j = 1; j < terms.size(); ++j) {
      m += terms[j].weight * terms[j].stats.mean[k];
      v += terms[j].weight * terms[j].stats.variance[k];
    }
    out.mean[k] = m;
    out.variance[k] = v;
  }
  for (const auto& t : terms) out.count += t.stats.count;
  return out;
}

ChannelStats mix_stats(const ChannelStats& virtual_stats, const ChannelStats& sampled, double mix) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw std::invalid_argument("mix_stats: mix must be in [0, 1]");
  const std::size_t c = virtual_stats.channels();
  require_channels(sampled, c, "mix_stats");
  require_channels(virtual_stats, c, "mix_stats");
  ChannelStats out;
  out.mean.resize(c);
  out.variance.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    out.mean[k] = mix * virtual_stats.mean[k] + (1.0 - mix) * sampled.mean[k];
    out.variance[k] = mix * virtual_stats.variance[k] + (1.0 - mix) * sampled.variance[k];
  }
  out.count = virtual_stats.count + sampled.count;
  return out;
}

BnForwardResult bn_forward_train(const Tensor4& x, const BnLayerState& state, const ChannelStats& stats,
                                 IndexSet indices) {
  std::vector<StatTerm> terms;
  terms.push_back({stats, std::move(indices), 1.0});
  return bn_forward_train(x, state, std::move(terms));
}

BnForwardResult bn_forward_train(const Tensor4& x, const BnLayerState& state, std::vector<StatTerm> terms) {
  require_finite(x);
  const std::size_t c = x.c();
  if (state.channels() != c) throw std::invalid_argument("bn_forward_train: state/input channel mismatch");
  for (const auto& t : terms) {
    require_channels(t.stats, c, "bn_forward_train");
    if (t.indices.empty() || t.stats.count != t.indices.size())
      throw std::invalid_argument("bn_forward_train: stats.count must equal the index set size");
    for (auto pos : t.indices)
      if (pos >= x.positions()) throw std::out_of_range("bn_forward_train: index out of range");
  }
  ChannelStats applied = terms.size() == 1 && terms[0].weight == 1.0
                             ? terms[0].stats
                             : combine_stats(terms);
  require_finite(applied, "bn_forward_train");

  std::vector<double> rstd(c);
  for (std::size_t k = 0; k < c; ++k) rstd[k] = 1.0 / std::sqrt(applied.variance[k] + state.epsilon);

  Tensor4 xhat(x.n(), x.h(), x.w(), c);
  Tensor4 y(x.n(), x.h(), x.w(), c);
  const auto in = x.data();
  auto xh = xhat.data();
  auto out = y.data();
  for (std::size_t p = 0; p < x.positions(); ++p) {
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t i = p * c + k;
      xh[i] = (in[i] - applied.mean[k]) * rstd[k];
      out[i] = state.gamma[k] * xh[i] + state.beta[k];
    }
  }
  BnForwardResult r{std::move(y), {x, std::move(xhat), std::move(applied), std::move(terms)}};
  return r;
}

Tensor4 bn_forward_eval(const Tensor4& x, const BnLayerState& state) {
  if (!state.initialized) throw std::logic_error("bn_forward_eval: moving statistics are uninitialized");
  require_finite(x);
  const std::size_t c = x.c();
  if (state.channels() != c) throw std::invalid_argument("bn_forward_eval: state/input channel mismatch");
  Tensor4 y(x.n(), x.h(), x.w(), c);
  const auto in = x.data();
  auto out = y.data();
  std::vector<double> rstd(c);
  for (std::size_t k = 0; k < c; ++k) rstd[k] = 1.0 / std::sqrt(state.moving_var[k] + state.epsilon);
  for (std::size_t p = 0; p < x.positions(); ++p)
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t i = p * c + k;
      out[i] = state.gamma[k] * ((in[i] - state.moving_mean[k]) * rstd[k]) + state.beta[k];
    }
  return y;
}

BnLayerState update_moving_average(BnLayerState state, const ChannelStats& stats) {
  require_channels(stats, state.channels(), "update_moving_average");
  require_finite(stats, "update_moving_average");
  if (!state.initialized) {
    state.moving_mean = stats.mean;
    state.moving_var = stats.variance;
    state.initialized = true;
    return state;
  }
  const double a = state.decay;
  for (std::size_t k = 0; k < state.channels(); ++k) {
    state.moving_mean[k] = a * stats.mean[k] + (1.0 - a) * state.moving_mean[k];
    state.moving_var[k] = a * stats.variance[k] + (1.0 - a) * state.moving_var[k];
  }
  return state;
}

BnGradients bn_backward(const Tensor4& d_out, const BnForwardCache& cache, const BnLayerState& state) {
  const Tensor4& x = cache.input;
  if (!d_out.same_shape(x)) throw std::invalid_argument("bn_backward: d_out shape differs from cached input");
  const std::size_t c = x.c();
  const std::size_t m = x.positions();
  const auto dy = d_out.data();
  const auto xin = x.data();
  const auto xh = cache.normalized.data();
  const auto& mu = cache.applied.mean;

  std::vector<double> rstd(c);
  for (std::size_t k = 0; k < c; ++k) rstd[k] = 1.0 / std::sqrt(cache.applied.variance[k] + state.epsilon);

  // Channel-major staging for the four length-m reductions.
  std::vector<double> to_mean(c * m), to_var(c * m), to_gamma(c * m), to_beta(c * m);
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t i = p * c + k;
      const std::size_t j = k * m + p;
      const double dxhat = dy[i] * state.gamma[k];
      const double r = rstd[k];
      to_mean[j] = dxhat * (-r);
      to_var[j] = dxhat * (xin[i] - mu[k]) * (-0.5) * r * r * r;
      to_gamma[j] = dy[i] * xh[i];
      to_beta[j] = dy[i];
    }

  BnGradients g;
  g.d_gamma.resize(c);
  g.d_beta.resize(c);
  g.reduction_length = m;
  std::vector<double> d_mean(c), d_var(c);
  for (std::size_t k = 0; k < c; ++k) {
    d_mean[k] = pairwise_sum({to_mean.data() + k * m, m});
    d_var[k] = pairwise_sum({to_var.data() + k * m, m});
    g.d_gamma[k] = pairwise_sum({to_gamma.data() + k * m, m});
    g.d_beta[k] = pairwise_sum({to_beta.data() + k * m, m});
  }

  g.d_input = Tensor4(x.n(), x.h(), x.w(), c);
  auto dx = g.d_input.data();
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t i = p * c + k;
      dx[i] = dy[i] * state.gamma[k] * rstd[k];
    }
  // Positions outside every S see E and Var as constants.
  for (const auto& t : cache.terms) {
    const double inv_s = 1.0 / static_cast<double>(t.indices.size());
    for (auto pos : t.indices)
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = pos * c + k;
        dx[i] += t.weight * (d_mean[k] * inv_s + d_var[k] * 2.0 * (xin[i] - t.stats.mean[k]) * inv_s);
      }
  }
  return g;
}

}  // namespace bns

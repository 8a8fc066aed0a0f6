#include "bns/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace bns {

namespace {

void require_dims(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
  if (n == 0 || h == 0 || w == 0 || c == 0)
    throw std::invalid_argument("Tensor4: all dimensions must be >= 1");
}

double tree_sum(const double* p, std::size_t len) {
  if (len <= 2) return len == 1 ? p[0] : p[0] + p[1];
  const std::size_t half = len / 2;
  return tree_sum(p, half) + tree_sum(p + half, len - half);
}

}  // namespace

Tensor4::Tensor4(std::size_t n, std::size_t h, std::size_t w, std::size_t c, double fill)
    : n_(n), h_(h), w_(w), c_(c) {
  require_dims(n, h, w, c);
  data_.assign(n * h * w * c, fill);
}

Tensor4::Tensor4(std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                 std::vector<double> data)
    : n_(n), h_(h), w_(w), c_(c), data_(std::move(data)) {
  require_dims(n, h, w, c);
  if (data_.size() != n * h * w * c)
    throw std::invalid_argument("Tensor4: data length " + std::to_string(data_.size()) +
                                " does not match n*h*w*c = " + std::to_string(n * h * w * c));
}

Tensor4 Tensor4::rows(std::size_t begin, std::size_t count) const {
  if (count == 0 || begin + count > n_) throw std::out_of_range("Tensor4::rows: range out of bounds");
  const std::size_t row = h_ * w_ * c_;
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                          data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * row));
  return Tensor4(count, h_, w_, c_, std::move(out));
}

Tensor4 concat_rows(std::span<const Tensor4> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const auto& first = parts.front();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.h() != first.h() || p.w() != first.w() || p.c() != first.c())
      throw std::invalid_argument("concat_rows: shape mismatch");
    n += p.n();
  }
  std::vector<double> data;
  data.reserve(n * first.h() * first.w() * first.c());
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor4(n, first.h(), first.w(), first.c(), std::move(data));
}

double pairwise_sum(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("empty reduction");
  return tree_sum(values.data(), values.size());
}

ChannelStats channel_moments(const Tensor4& t, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("channel_moments: empty index set");
  const std::size_t c = t.c();
  const std::size_t s = indices.size();
  const std::size_t limit = t.positions();
  const auto data = t.data();

  // Channel-major gather so each channel reduces over a contiguous run.
  std::vector<double> buf(c * s);
  for (std::size_t j = 0; j < s; ++j) {
    const std::size_t pos = indices[j];
    if (pos >= limit)
      throw std::out_of_range("channel_moments: index " + std::to_string(pos) + " >= " +
                              std::to_string(limit));
    const double* src = data.data() + pos * c;
    for (std::size_t k = 0; k < c; ++k) buf[k * s + j] = src[k];
  }

  ChannelStats out;
  out.mean.resize(c);
  out.variance.resize(c);
  out.count = s;
  const double inv = 1.0 / static_cast<double>(s);
  std::vector<double> dev(s);
  for (std::size_t k = 0; k < c; ++k) {
    std::span<const double> vals(buf.data() + k * s, s);
    const double mu = pairwise_sum(vals) * inv;
    for (std::size_t j = 0; j < s; ++j) {
      const double d = vals[j] - mu;
      dev[j] = d * d;
    }
    out.mean[k] = mu;
    out.variance[k] = pairwise_sum(dev) * inv;
  }
  return out;
}

IndexSet full_indices(const Shape4& shape) {
  IndexSet out(shape.positions());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

IndexSet gather_patch(const Shape4& shape, std::size_t begin_h, std::size_t begin_w,
                      std::size_t hs, std::size_t ws) {
  if (hs == 0 || ws == 0 || begin_h + hs > shape.h || begin_w + ws > shape.w)
    throw std::out_of_range("gather_patch: rectangle out of bounds");
  IndexSet out;
  out.reserve(shape.n * hs * ws);
  for (std::size_t in = 0; in < shape.n; ++in)
    for (std::size_t ih = begin_h; ih < begin_h + hs; ++ih)
      for (std::size_t iw = begin_w; iw < begin_w + ws; ++iw)
        out.push_back((in * shape.h + ih) * shape.w + iw);
  return out;
}

IndexSet gather_rows(const Shape4& shape, std::size_t begin_n, std::size_t ns) {
  if (ns == 0 || begin_n + ns > shape.n) throw std::out_of_range("gather_rows: range out of bounds");
  const std::size_t per = shape.h * shape.w;
  IndexSet out(ns * per);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = begin_n * per + i;
  return out;
}

void require_finite(const Tensor4& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NonFiniteError("non-finite input");
}

}  // namespace bns

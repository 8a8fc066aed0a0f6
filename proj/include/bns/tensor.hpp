#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace bns {

/// Flat positions over the (N, H, W) grid of a tensor; the same set applies
/// to every channel.
using IndexSet = std::vector<std::size_t>;

struct Shape4 {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  std::size_t positions() const { return n * h * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense 4-D activation tensor in (N, H, W, C) row-major order.
class Tensor4 {
public:
  Tensor4() = default;
  Tensor4(std::size_t n, std::size_t h, std::size_t w, std::size_t c, double fill = 0.0);
  Tensor4(std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::vector<double> data);

  std::size_t n() const { return n_; }
  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t c() const { return c_; }
  Shape4 shape() const { return {n_, h_, w_, c_}; }
  /// Number of (N, H, W) positions, i.e. points per channel.
  std::size_t positions() const { return n_ * h_ * w_; }
  std::size_t size() const { return data_.size(); }

  std::size_t offset(std::size_t in, std::size_t ih, std::size_t iw, std::size_t ic) const {
    return ((in * h_ + ih) * w_ + iw) * c_ + ic;
  }
  double at(std::size_t in, std::size_t ih, std::size_t iw, std::size_t ic) const {
    return data_[offset(in, ih, iw, ic)];
  }
  double& at(std::size_t in, std::size_t ih, std::size_t iw, std::size_t ic) {
    return data_[offset(in, ih, iw, ic)];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool same_shape(const Tensor4& other) const {
    return n_ == other.n_ && h_ == other.h_ && w_ == other.w_ && c_ == other.c_;
  }

  /// Rows [begin, begin + count) along N as a new tensor.
  Tensor4 rows(std::size_t begin, std::size_t count) const;

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

private:
  std::size_t n_ = 0, h_ = 0, w_ = 0, c_ = 0;
  std::vector<double> data_;
};

/// Concatenates tensors along N. All parts must share h, w, c.
Tensor4 concat_rows(std::span<const Tensor4> parts);

/// Per-channel population mean and variance, and the number of points used.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> variance;
  std::size_t count = 0;

  std::size_t channels() const { return mean.size(); }
  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

/// Balanced binary-tree (recursive halving) sum. The association order depends
/// only on the sequence length, never on how the work is scheduled.
double pairwise_sum(std::span<const double> values);

/// Per-channel moments over the given positions, divisor = |indices|.
ChannelStats channel_moments(const Tensor4& t, std::span<const std::size_t> indices);

/// All n*h*w positions in order.
IndexSet full_indices(const Shape4& shape);
inline IndexSet full_indices(const Tensor4& t) { return full_indices(t.shape()); }

/// Positions of the hs x ws patch at (begin_h, begin_w) in every sample.
IndexSet gather_patch(const Shape4& shape, std::size_t begin_h, std::size_t begin_w,
                      std::size_t hs, std::size_t ws);
inline IndexSet gather_patch(const Tensor4& t, std::size_t begin_h, std::size_t begin_w,
                             std::size_t hs, std::size_t ws) {
  return gather_patch(t.shape(), begin_h, begin_w, hs, ws);
}

/// Positions covering all h*w locations of samples [begin_n, begin_n + ns).
IndexSet gather_rows(const Shape4& shape, std::size_t begin_n, std::size_t ns);
inline IndexSet gather_rows(const Tensor4& t, std::size_t begin_n, std::size_t ns) {
  return gather_rows(t.shape(), begin_n, ns);
}

/// NaN or Inf reached a computation that requires finite values.
class NonFiniteError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Throws NonFiniteError("non-finite input") if any entry is NaN/Inf.
void require_finite(const Tensor4& t);

}  // namespace bns

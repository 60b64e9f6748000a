#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "polarize/common.hpp"

namespace polarize {

/// Dense NCHW tensor, contiguous row-major, double precision. A single image
/// is the n==1 case; logits are stored as (n, K, 1, 1).
struct Tensor {
  int64_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int64_t n_, int64_t c_, int64_t h_, int64_t w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_ * c_ * h_ * w_), 0.0) {
    PZ_REQUIRE(n_ >= 0 && c_ >= 0 && h_ >= 0 && w_ >= 0, "tensor dims must be non-negative");
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.n, t.c, t.h, t.w); }

  int64_t size() const { return n * c * h * w; }
  int64_t sample_size() const { return c * h * w; }
  int64_t spatial() const { return h * w; }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& at(int64_t in, int64_t ic, int64_t ih, int64_t iw) {
    return v[static_cast<size_t>(((in * c + ic) * h + ih) * w + iw)];
  }
  double at(int64_t in, int64_t ic, int64_t ih, int64_t iw) const {
    return v[static_cast<size_t>(((in * c + ic) * h + ih) * w + iw)];
  }

  std::span<double> sample(int64_t i) {
    return {v.data() + i * sample_size(), static_cast<size_t>(sample_size())};
  }
  std::span<const double> sample(int64_t i) const {
    return {v.data() + i * sample_size(), static_cast<size_t>(sample_size())};
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool same_chw(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

  /// Copy of samples [first, first+count) as a new tensor.
  Tensor slice(int64_t first, int64_t count) const {
    PZ_REQUIRE(first >= 0 && count >= 0 && first + count <= n, "slice out of range");
    Tensor out(count, c, h, w);
    std::copy(v.begin() + first * sample_size(),
              v.begin() + (first + count) * sample_size(), out.v.begin());
    return out;
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  void clamp_(double lo, double hi) {
    for (double& x : v) x = x < lo ? lo : (x > hi ? hi : x);
  }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  PZ_REQUIRE(a.same_shape(b), "shape mismatch");
  double m = 0;
  for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace polarize

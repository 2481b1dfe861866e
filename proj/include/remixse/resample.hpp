#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "remixse/error.hpp"

namespace remixse::dsp {

// Rational-ratio polyphase resampler with a Hann-windowed sinc kernel.
//
// Input sample i sits at fine-grid position i*up and output sample j at
// j*down, where the fine grid runs at up*fs_in. The kernel is a lowpass at
// min(1/up, 1/down) of the fine-grid Nyquist carrying `zero_crossings` sinc
// lobes on each side. When up >= down the kernel has h(0)=1 and vanishes at
// every other multiple of `up`, so upsampling reproduces the input samples
// exactly at their original positions.
//
// The operator is linear; apply_adjoint() is its exact transpose, which the
// autodiff layer uses for gradients.
class Resampler {
 public:
  static constexpr int kZeroCrossings = 64;

  Resampler(std::int64_t up, std::int64_t down, int zero_crossings = kZeroCrossings) {
    require(up >= 1 && down >= 1, ErrorKind::InvalidArgument, "resample factors must be >= 1");
    const std::int64_t g = std::gcd(up, down);
    up_ = up / g;
    down_ = down / g;
    if (identity()) return;

    const double cutoff = 1.0 / static_cast<double>(std::max(up_, down_));
    const double gain = static_cast<double>(up_) * cutoff;
    const double half_width = static_cast<double>(zero_crossings) / cutoff;
    // Taps for output phase p: input offsets k in [-reach, reach] relative to
    // floor(j*down/up), kernel argument p - k*up.
    reach_ = static_cast<std::int64_t>(std::floor(half_width / static_cast<double>(up_))) + 1;
    const std::size_t taps = static_cast<std::size_t>(2 * reach_ + 1);
    phases_.assign(static_cast<std::size_t>(up_), std::vector<double>(taps, 0.0));
    for (std::int64_t p = 0; p < up_; ++p) {
      for (std::int64_t k = -reach_; k <= reach_; ++k) {
        const double n = static_cast<double>(p - k * up_);
        double h = 0.0;
        if (std::abs(n) < half_width) {
          const double x = cutoff * n;
          const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
          const double window = 0.5 + 0.5 * std::cos(std::numbers::pi * n / half_width);
          h = gain * sinc * window;
        }
        phases_[static_cast<std::size_t>(p)][static_cast<std::size_t>(k + reach_)] = h;
      }
    }
  }

  std::int64_t up() const { return up_; }
  std::int64_t down() const { return down_; }
  bool identity() const { return up_ == 1 && down_ == 1; }

  std::size_t output_length(std::size_t n) const {
    const auto num = static_cast<std::int64_t>(n) * up_;
    return static_cast<std::size_t>((num + down_ - 1) / down_);
  }

  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(output_length(x.size()), 0.0);
    if (identity()) {
      std::copy(x.begin(), x.end(), y.begin());
      return y;
    }
    for_each_tap(x.size(), y.size(), [&](std::size_t j, std::size_t i, double h) { y[j] += h * x[i]; });
    return y;
  }

  // Transpose of apply(): maps an output-length vector back to `input_length`.
  std::vector<double> apply_adjoint(std::span<const double> dy, std::size_t input_length) const {
    std::vector<double> dx(input_length, 0.0);
    if (identity()) {
      std::copy(dy.begin(), dy.end(), dx.begin());
      return dx;
    }
    for_each_tap(input_length, dy.size(), [&](std::size_t j, std::size_t i, double h) { dx[i] += h * dy[j]; });
    return dx;
  }

 private:
  template <typename F>
  void for_each_tap(std::size_t n_in, std::size_t n_out, F&& f) const {
    const auto n = static_cast<std::int64_t>(n_in);
    for (std::size_t j = 0; j < n_out; ++j) {
      const std::int64_t pos = static_cast<std::int64_t>(j) * down_;
      const std::int64_t base = pos / up_;
      const auto& taps = phases_[static_cast<std::size_t>(pos % up_)];
      const std::int64_t lo = std::max<std::int64_t>(-reach_, -base);
      const std::int64_t hi = std::min<std::int64_t>(reach_, n - 1 - base);
      for (std::int64_t k = lo; k <= hi; ++k) {
        const double h = taps[static_cast<std::size_t>(k + reach_)];
        if (h != 0.0) f(j, static_cast<std::size_t>(base + k), h);
      }
    }
  }

  std::int64_t up_ = 1;
  std::int64_t down_ = 1;
  std::int64_t reach_ = 0;
  std::vector<std::vector<double>> phases_;
};

}  // namespace remixse::dsp

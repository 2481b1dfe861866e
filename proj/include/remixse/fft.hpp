#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace remixse::dsp {

// Real-input FFT of a fixed size backed by FFTW. Plans are created once per
// size (planner calls are not thread safe) and executed with the new-array
// interface so concurrent callers never share buffers.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(planner_mutex());
    auto* in = fftw_alloc_real(n_);
    auto* out = fftw_alloc_complex(n_ / 2 + 1);
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n_), in, out, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n_), out, in, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
  }
  ~RealFft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // `input.size()` must equal size(); returns bins() complex coefficients.
  std::vector<std::complex<double>> forward(std::span<const double> input) const {
    Buffer<double> in(n_);
    Buffer<fftw_complex> out(bins());
    std::copy(input.begin(), input.end(), in.get());
    fftw_execute_dft_r2c(forward_, in.get(), out.get());
    std::vector<std::complex<double>> spec(bins());
    for (std::size_t k = 0; k < bins(); ++k) spec[k] = {out.get()[k][0], out.get()[k][1]};
    return spec;
  }

  // Unnormalized inverse (FFTW convention): inverse(forward(x)) = n * x.
  std::vector<double> inverse(std::span<const std::complex<double>> spec) const {
    Buffer<fftw_complex> in(bins());
    Buffer<double> out(n_);
    for (std::size_t k = 0; k < bins(); ++k) {
      in.get()[k][0] = spec[k].real();
      in.get()[k][1] = spec[k].imag();
    }
    fftw_execute_dft_c2r(inverse_, in.get(), out.get());
    return std::vector<double>(out.get(), out.get() + n_);
  }

  // Shared instance per size.
  static const RealFft& of_size(std::size_t n) {
    static std::mutex m;
    static std::map<std::size_t, std::unique_ptr<RealFft>> cache;
    std::lock_guard lock(m);
    auto& slot = cache[n];
    if (!slot) slot = std::make_unique<RealFft>(n);
    return *slot;
  }

 private:
  template <typename T>
  class Buffer {
   public:
    explicit Buffer(std::size_t n) : p_(static_cast<T*>(fftw_malloc(sizeof(T) * n))) {}
    ~Buffer() { fftw_free(p_); }
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;
    T* get() const { return p_; }

   private:
    T* p_;
  };

  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

  std::size_t n_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

// Hann window of length n; periodic by default (STFT overlap-add form).
inline std::vector<double> hann_window(std::size_t n, bool periodic = true) {
  std::vector<double> w(n);
  const double denom = periodic ? static_cast<double>(n) : static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(i) / denom);
  return w;
}

}  // namespace remixse::dsp

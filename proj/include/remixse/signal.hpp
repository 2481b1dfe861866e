#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "remixse/error.hpp"
#include "remixse/fft.hpp"
#include "remixse/resample.hpp"
#include "remixse/rng.hpp"

namespace remixse {

inline constexpr int kDefaultSampleRate = 16000;

/// Mono audio. Samples are nominally in [-1, 1] and always finite.
struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = kDefaultSampleRate;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    require(sample_rate_hz > 0, ErrorKind::InvalidArgument, "sample rate must be positive");
    for (double s : samples)
      require(std::isfinite(s), ErrorKind::InvalidArgument, "waveform contains a non-finite sample");
  }

  bool operator==(const Waveform&) const = default;
};

/// B rows of M samples at a shared sample rate, stored row-major.
class SignalBatch {
 public:
  SignalBatch() = default;
  SignalBatch(std::size_t rows, std::size_t length, int sample_rate_hz = kDefaultSampleRate)
      : rows_(rows), length_(length), sample_rate_(sample_rate_hz), data_(rows * length, 0.0) {
    require(rows >= 1 && length >= 1, ErrorKind::InvalidArgument, "batch needs B >= 1 and M >= 1");
    require(sample_rate_hz > 0, ErrorKind::InvalidArgument, "sample rate must be positive");
  }

  static SignalBatch from_rows(const std::vector<Waveform>& rows) {
    require(!rows.empty(), ErrorKind::InvalidArgument, "batch needs at least one row");
    SignalBatch b(rows.size(), rows.front().size(), rows.front().sample_rate_hz);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == b.length_, ErrorKind::LengthMismatch, "batch rows differ in length");
      require(rows[i].sample_rate_hz == b.sample_rate_, ErrorKind::SampleRateMismatch,
              "batch rows differ in sample rate");
      std::copy(rows[i].samples.begin(), rows[i].samples.end(), b.row(i).begin());
    }
    return b;
  }

  std::size_t rows() const { return rows_; }
  std::size_t length() const { return length_; }
  int sample_rate_hz() const { return sample_rate_; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * length_, length_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * length_, length_}; }

  Waveform waveform(std::size_t i) const {
    auto r = row(i);
    return {std::vector<double>(r.begin(), r.end()), sample_rate_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const SignalBatch& o) const {
    return rows_ == o.rows_ && length_ == o.length_ && sample_rate_ == o.sample_rate_;
  }

  bool operator==(const SignalBatch&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t length_ = 0;
  int sample_rate_ = kDefaultSampleRate;
  std::vector<double> data_;
};

inline void require_same_shape(const SignalBatch& a, const SignalBatch& b, const char* what) {
  require(a.same_shape(b), ErrorKind::ShapeMismatch, what);
}

/// A bijection on {0, ..., B-1}; row i of a shuffled batch is row order[i].
struct Permutation {
  std::vector<std::size_t> order;

  static Permutation identity(std::size_t n) {
    Permutation p;
    p.order.resize(n);
    for (std::size_t i = 0; i < n; ++i) p.order[i] = i;
    return p;
  }

  static Permutation random(std::size_t n, Rng& rng) {
    Permutation p = identity(n);
    for (std::size_t i = n; i > 1; --i) std::swap(p.order[i - 1], p.order[rng.index(i)]);
    return p;
  }

  bool valid() const {
    std::vector<bool> seen(order.size(), false);
    for (auto i : order) {
      if (i >= order.size() || seen[i]) return false;
      seen[i] = true;
    }
    return true;
  }

  Permutation inverse() const {
    Permutation p;
    p.order.resize(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) p.order[order[i]] = i;
    return p;
  }

  std::size_t size() const { return order.size(); }
};

// Mean square over the full span.
inline double mean_power(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

inline double snr_db(std::span<const double> signal, std::span<const double> noise) {
  return 10.0 * std::log10(mean_power(signal) / mean_power(noise));
}

struct MixResult {
  std::vector<double> mixture;
  std::vector<double> scaled_noise;
  double gain = 1.0;
};

/// Scales `noise` so that 10 log10(P_signal / P_scaled) equals `snr_db` and
/// adds it to `signal`.
inline MixResult mix_at_snr(std::span<const double> signal, std::span<const double> noise, double snr_db) {
  require(signal.size() == noise.size(), ErrorKind::LengthMismatch, "signal and noise lengths differ");
  const double ps = mean_power(signal);
  const double pn = mean_power(noise);
  require(ps > 0.0, ErrorKind::ZeroPowerSignal, "signal has zero power");
  require(pn > 0.0, ErrorKind::ZeroPowerNoise, "noise has zero power");
  MixResult out;
  out.gain = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
  out.scaled_noise.resize(noise.size());
  out.mixture.resize(noise.size());
  for (std::size_t i = 0; i < noise.size(); ++i) {
    out.scaled_noise[i] = out.gain * noise[i];
    out.mixture[i] = signal[i] + out.scaled_noise[i];
  }
  return out;
}

inline SignalBatch shuffle_rows(const SignalBatch& batch, const Permutation& p) {
  require(p.size() == batch.rows(), ErrorKind::SizeMismatch, "permutation size differs from batch size");
  require(p.valid(), ErrorKind::InvalidArgument, "permutation is not a bijection");
  SignalBatch out(batch.rows(), batch.length(), batch.sample_rate_hz());
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    auto src = batch.row(p.order[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentations

/// Per row, one offset in [0, max_shift_samples] delays input and target
/// together; vacated samples on the left are zero and the tail is dropped.
inline std::pair<SignalBatch, SignalBatch> augment_shift(const SignalBatch& input, const SignalBatch& target,
                                                         std::size_t max_shift_samples, Rng& rng) {
  require_same_shape(input, target, "shift: input and target shapes differ");
  require(max_shift_samples < input.length(), ErrorKind::InvalidArgument,
          "shift: max_shift_samples must be smaller than the row length");
  SignalBatch a(input.rows(), input.length(), input.sample_rate_hz());
  SignalBatch b(a);
  const std::size_t m = input.length();
  for (std::size_t r = 0; r < input.rows(); ++r) {
    const auto offset = static_cast<std::size_t>(rng.index(max_shift_samples + 1));
    auto in = input.row(r), tg = target.row(r);
    auto oa = a.row(r), ob = b.row(r);
    for (std::size_t t = offset; t < m; ++t) {
      oa[t] = in[t - offset];
      ob[t] = tg[t - offset];
    }
  }
  return {std::move(a), std::move(b)};
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct StopBand {
  double low_hz = 0.0;
  double high_hz = 0.0;
};

inline constexpr std::size_t kBandMaskWindow = 1024;
inline constexpr std::size_t kBandMaskHop = 256;

/// One stop band per row, uniform in mel, spanning `mask_fraction` of the
/// mel range [0, fs/2].
inline std::vector<StopBand> draw_stop_bands(std::size_t rows, double mask_fraction, int sample_rate_hz,
                                             Rng& rng) {
  require(mask_fraction > 0.0 && mask_fraction < 1.0, ErrorKind::InvalidArgument,
          "bandmask fraction must be in (0, 1)");
  const double mel_max = hz_to_mel(sample_rate_hz / 2.0);
  const double width = mask_fraction * mel_max;
  std::vector<StopBand> bands(rows);
  for (auto& band : bands) {
    const double lo = rng.uniform(0.0, mel_max - width);
    band = {mel_to_hz(lo), mel_to_hz(lo + width)};
  }
  return bands;
}

// Zeroes the STFT bins of one row that fall inside `band` and resynthesizes
// by weighted overlap-add.
inline std::vector<double> stft_stop_band(std::span<const double> x, StopBand band, int sample_rate_hz) {
  const std::size_t n = kBandMaskWindow, hop = kBandMaskHop;
  const auto& fft = dsp::RealFft::of_size(n);
  static const std::vector<double> window = dsp::hann_window(n);

  const auto len = static_cast<std::int64_t>(x.size());
  std::vector<double> out(x.size(), 0.0), weight(x.size(), 0.0);
  std::vector<double> frame(n);
  const double bin_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(n);
  for (std::int64_t start = -static_cast<std::int64_t>(n - hop); start < len; start += static_cast<std::int64_t>(hop)) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::int64_t t = start + static_cast<std::int64_t>(i);
      frame[i] = (t >= 0 && t < len) ? x[static_cast<std::size_t>(t)] * window[i] : 0.0;
    }
    auto spec = fft.forward(frame);
    for (std::size_t k = 0; k < spec.size(); ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      if (f >= band.low_hz && f <= band.high_hz) spec[k] = 0.0;
    }
    const auto frame_out = fft.inverse(spec);
    for (std::size_t i = 0; i < n; ++i) {
      const std::int64_t t = start + static_cast<std::int64_t>(i);
      if (t < 0 || t >= len) continue;
      out[static_cast<std::size_t>(t)] += frame_out[i] / static_cast<double>(n) * window[i];
      weight[static_cast<std::size_t>(t)] += window[i] * window[i];
    }
  }
  for (std::size_t t = 0; t < out.size(); ++t)
    if (weight[t] > 1e-12) out[t] /= weight[t];
  return out;
}

inline SignalBatch apply_stop_bands(const SignalBatch& batch, const std::vector<StopBand>& bands) {
  require(bands.size() == batch.rows(), ErrorKind::SizeMismatch, "one stop band per row required");
  SignalBatch out(batch.rows(), batch.length(), batch.sample_rate_hz());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto y = stft_stop_band(batch.row(r), bands[r], batch.sample_rate_hz());
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

inline SignalBatch augment_bandmask(const SignalBatch& batch, double mask_fraction, Rng& rng) {
  return apply_stop_bands(batch, draw_stop_bands(batch.rows(), mask_fraction, batch.sample_rate_hz(), rng));
}

struct RemixResult {
  SignalBatch batch;
  bool applied = false;  // false when B < 2 and the batch was returned as is
};

inline RemixResult augment_remix_noise(const SignalBatch& noise, Rng& rng) {
  if (noise.rows() < 2) return {noise, false};
  return {shuffle_rows(noise, Permutation::random(noise.rows(), rng)), true};
}

// ---------------------------------------------------------------------------

/// Rational resampling by up/down with a windowed-sinc polyphase filter.
/// Output length is ceil(len * up / down); the sample-rate field is scaled
/// accordingly (rounded down when the ratio is not exact).
inline Waveform resample(const Waveform& w, std::int64_t up, std::int64_t down) {
  dsp::Resampler rs(up, down);
  Waveform out;
  out.samples = rs.apply(w.samples);
  out.sample_rate_hz = static_cast<int>(static_cast<std::int64_t>(w.sample_rate_hz) * up / down);
  return out;
}

inline std::vector<double> resample(std::span<const double> x, std::int64_t up, std::int64_t down) {
  return dsp::Resampler(up, down).apply(x);
}

}  // namespace remixse

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "remixse/autodiff.hpp"
#include "remixse/error.hpp"
#include "remixse/resample.hpp"
#include "remixse/rng.hpp"
#include "remixse/signal.hpp"

namespace remixse {

/// Hyperparameters of the causal encoder/decoder denoiser.
struct ModelConfig {
  int depth = 2;        // L, number of encoder (and decoder) layers
  int hidden = 4;       // H, channels of the first encoder layer
  int kernel = 8;       // K
  int stride = 4;       // S
  int resample = 1;     // U, internal upsampling factor
  int lstm_layers = 2;
  bool causal = true;

  static ModelConfig tiny() { return {}; }
  static ModelConfig large() { return {5, 48, 8, 4, 4, 2, true}; }

  void validate() const {
    require(depth >= 1 && hidden >= 1 && stride >= 1 && kernel >= stride && resample >= 1,
            ErrorKind::InvalidArgument, "model config needs L >= 1, H >= 1, K >= S >= 1, U >= 1");
    require(lstm_layers == 2, ErrorKind::InvalidArgument, "the sequence model has exactly two LSTM layers");
    require(causal, ErrorKind::InvalidArgument, "only the causal (unidirectional) model is supported");
    require(depth < 20, ErrorKind::InvalidArgument, "depth too large");
  }

  // Channels after encoder layer i (1-based): 2^(i-1) H.
  std::size_t encoder_channels(int i) const { return static_cast<std::size_t>(hidden) << (i - 1); }
  std::size_t lstm_width() const { return encoder_channels(depth); }

  bool operator==(const ModelConfig&) const = default;
};

inline std::string describe(const ModelConfig& c) {
  return "L=" + std::to_string(c.depth) + " H=" + std::to_string(c.hidden) + " K=" + std::to_string(c.kernel) +
         " S=" + std::to_string(c.stride) + " U=" + std::to_string(c.resample);
}

struct Parameter {
  std::string name;
  ad::Tensor value;

  bool operator==(const Parameter&) const = default;
};

/// Parameters in declaration order: encoder 1..L, LSTM, decoder 1..L.
struct DenoiserModel {
  ModelConfig config;
  std::vector<Parameter> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  std::vector<ad::Tensor*> tensors() {
    std::vector<ad::Tensor*> out;
    for (auto& p : params) out.push_back(&p.value);
    return out;
  }
  std::vector<const ad::Tensor*> tensors() const {
    std::vector<const ad::Tensor*> out;
    for (const auto& p : params) out.push_back(&p.value);
    return out;
  }

  bool operator==(const DenoiserModel&) const = default;
};

namespace model_detail {

struct LayoutEntry {
  std::string name;
  ad::Shape shape;
  double bound;  // init range +-bound
};

inline double inv_sqrt(std::size_t n) { return std::sqrt(1.0 / static_cast<double>(n)); }

inline std::vector<LayoutEntry> layout(const ModelConfig& c) {
  std::vector<LayoutEntry> out;
  const std::size_t K = static_cast<std::size_t>(c.kernel);
  for (int i = 1; i <= c.depth; ++i) {
    const std::size_t ch = c.encoder_channels(i);
    const std::size_t ch_in = i == 1 ? 1 : c.encoder_channels(i - 1);
    const std::string p = "encoder." + std::to_string(i) + ".";
    out.push_back({p + "conv.weight", {ch, ch_in, K}, inv_sqrt(ch_in * K)});
    out.push_back({p + "conv.bias", {ch}, inv_sqrt(ch_in * K)});
    out.push_back({p + "proj.weight", {2 * ch, ch, 1}, inv_sqrt(ch)});
    out.push_back({p + "proj.bias", {2 * ch}, inv_sqrt(ch)});
  }
  const std::size_t D = c.lstm_width();
  for (int l = 0; l < c.lstm_layers; ++l) {
    const std::string p = "lstm." + std::to_string(l) + ".";
    out.push_back({p + "w_ih", {4 * D, D}, inv_sqrt(D)});
    out.push_back({p + "w_hh", {4 * D, D}, inv_sqrt(D)});
    out.push_back({p + "bias", {4 * D}, inv_sqrt(D)});
  }
  for (int i = 1; i <= c.depth; ++i) {
    const std::size_t ch = c.encoder_channels(c.depth - i + 1);
    const std::size_t ch_out = i == c.depth ? 1 : c.encoder_channels(c.depth - i);
    const std::string p = "decoder." + std::to_string(i) + ".";
    out.push_back({p + "proj.weight", {2 * ch, ch, 1}, inv_sqrt(ch)});
    out.push_back({p + "proj.bias", {2 * ch}, inv_sqrt(ch)});
    out.push_back({p + "convtr.weight", {ch, ch_out, K}, inv_sqrt(ch_out * K)});
    out.push_back({p + "convtr.bias", {ch_out}, inv_sqrt(ch_out * K)});
  }
  return out;
}

}  // namespace model_detail

/// Zero-filled model with the right parameter names and shapes.
inline DenoiserModel empty_model(const ModelConfig& config) {
  config.validate();
  DenoiserModel m;
  m.config = config;
  for (auto& e : model_detail::layout(config)) m.params.push_back({e.name, ad::Tensor(e.shape)});
  return m;
}

/// Uniform +-sqrt(1/fan_in) initialization, deterministic per seed.
inline DenoiserModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  DenoiserModel m;
  m.config = config;
  for (auto& e : model_detail::layout(config)) {
    ad::Tensor t(e.shape);
    for (auto& v : t.values()) v = rng.uniform(-e.bound, e.bound);
    m.params.push_back({e.name, std::move(t)});
  }
  return m;
}

/// Length after padding-free processing of an M_pad-sample input, or 0 if
/// some encoder stage would receive fewer than K samples.
inline std::size_t pipeline_length(const ModelConfig& c, std::size_t padded) {
  std::size_t T = padded * static_cast<std::size_t>(c.resample);
  const auto K = static_cast<std::size_t>(c.kernel), S = static_cast<std::size_t>(c.stride);
  for (int i = 0; i < c.depth; ++i) {
    if (T < K) return 0;
    T = ad::conv_output_length(T, K, S);
  }
  for (int i = 0; i < c.depth; ++i) T = ad::conv_transpose_output_length(T, K, S);
  const auto U = static_cast<std::size_t>(c.resample);
  return (T + U - 1) / U;
}

/// Smallest M_pad >= M whose forward pipeline yields at least M samples.
inline std::size_t valid_length(const ModelConfig& c, std::size_t M) {
  c.validate();
  std::size_t m = std::max<std::size_t>(M, 1);
  while (pipeline_length(c, m) < M || pipeline_length(c, m) == 0) ++m;
  return m;
}

/// Worst-case number of future input samples an output sample can depend on
/// when U = 1: (K - 1)(1 + S + ... + S^(L-1)).
inline std::size_t lookahead_samples(const ModelConfig& c) {
  std::size_t span = 0, stride = 1;
  for (int i = 0; i < c.depth; ++i) {
    span += static_cast<std::size_t>(c.kernel - 1) * stride;
    stride *= static_cast<std::size_t>(c.stride);
  }
  return span;
}

inline constexpr double kNormFloor = 1e-3;

struct ForwardOptions {
  // Divide each row by (std + 1e-3) on entry and restore the scale on exit.
  bool normalize = true;
};

/// Records the denoiser on `tape` and returns the [B, M] speech estimate.
/// `params` are tape handles matching model.params one to one.
inline ad::Var forward_on_tape(ad::Tape& tape, const DenoiserModel& model, const std::vector<ad::Var>& params,
                               const SignalBatch& noisy, ForwardOptions opts = {}) {
  const ModelConfig& c = model.config;
  require(params.size() == model.params.size(), ErrorKind::SizeMismatch, "forward: parameter handle count");
  const std::size_t B = noisy.rows(), M = noisy.length();
  const auto S = static_cast<std::size_t>(c.stride);

  std::vector<double> scale(B, 1.0);
  if (opts.normalize) {
    for (std::size_t b = 0; b < B; ++b) {
      auto r = noisy.row(b);
      double mean = 0.0;
      for (double v : r) mean += v;
      mean /= static_cast<double>(M);
      double var = 0.0;
      for (double v : r) var += (v - mean) * (v - mean);
      scale[b] = std::sqrt(var / static_cast<double>(M)) + kNormFloor;
    }
  }

  const std::size_t padded = valid_length(c, M);
  ad::Tensor input({B, 1, padded});
  for (std::size_t b = 0; b < B; ++b) {
    auto r = noisy.row(b);
    for (std::size_t t = 0; t < M; ++t) input[b * padded + t] = r[t] / scale[b];
  }
  ad::Var x = tape.constant(std::move(input));

  std::shared_ptr<const dsp::Resampler> up, down;
  if (c.resample > 1) {
    up = std::make_shared<dsp::Resampler>(c.resample, 1);
    down = std::make_shared<dsp::Resampler>(1, c.resample);
    x = ad::resample_time(x, up);
  }

  std::size_t p = 0;
  auto next = [&]() -> const ad::Var& { return params[p++]; };

  std::vector<ad::Var> skips;
  for (int i = 1; i <= c.depth; ++i) {
    const auto& w = next();
    const auto& b = next();
    x = ad::relu(ad::conv1d(x, w, b, S));
    const auto& pw = next();
    const auto& pb = next();
    x = ad::glu(ad::conv1d(x, pw, pb, 1), 1);
    skips.push_back(x);
  }

  x = ad::swap_last_axes(x);
  for (int l = 0; l < c.lstm_layers; ++l) {
    const auto& w_ih = next();
    const auto& w_hh = next();
    const auto& bias = next();
    x = ad::lstm_layer(x, w_ih, w_hh, bias);
  }
  x = ad::swap_last_axes(x);

  for (int i = 1; i <= c.depth; ++i) {
    ad::Var skip = skips.back();
    skips.pop_back();
    x = ad::add(x, ad::slice_time(skip, 0, x.shape()[2]));
    const auto& pw = next();
    const auto& pb = next();
    x = ad::glu(ad::conv1d(x, pw, pb, 1), 1);
    const auto& w = next();
    const auto& b = next();
    x = ad::conv_transpose1d(x, w, b, S);
    if (i < c.depth) x = ad::relu(x);
  }

  if (down) x = ad::resample_time(x, down);
  x = ad::slice_time(x, 0, M);
  x = ad::reshape(x, {B, M});
  return ad::scale_rows(x, std::move(scale));
}

inline std::vector<ad::Var> bind_parameters(ad::Tape& tape, const DenoiserModel& model) {
  std::vector<ad::Var> vars;
  vars.reserve(model.params.size());
  for (const auto& p : model.params) vars.push_back(tape.parameter(p.value));
  return vars;
}

struct Estimate {
  SignalBatch speech;
  SignalBatch noise;  // noisy - speech, exactly
};

/// Inference: speech estimate and the residual noise estimate.
inline Estimate forward(const DenoiserModel& model, const SignalBatch& noisy, ForwardOptions opts = {}) {
  ad::Tape tape(false);
  auto params = bind_parameters(tape, model);
  ad::Var y = forward_on_tape(tape, model, params, noisy, opts);
  Estimate e{SignalBatch(noisy.rows(), noisy.length(), noisy.sample_rate_hz()),
             SignalBatch(noisy.rows(), noisy.length(), noisy.sample_rate_hz())};
  const auto& yv = y.value().values();
  std::copy(yv.begin(), yv.end(), e.speech.data().begin());
  for (std::size_t i = 0; i < yv.size(); ++i) e.noise.data()[i] = noisy.data()[i] - yv[i];
  return e;
}

/// p_out = gamma * p_student + (1 - gamma) * p_teacher for every parameter.
inline DenoiserModel ema_combine(const DenoiserModel& teacher, const DenoiserModel& student, double gamma) {
  require(teacher.config == student.config && teacher.params.size() == student.params.size(),
          ErrorKind::ConfigMismatch, "ema_combine: teacher and student configs differ");
  require(gamma >= 0.0 && gamma <= 1.0, ErrorKind::InvalidArgument, "ema_combine: gamma must be in [0, 1]");
  DenoiserModel out = teacher;
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto& o = out.params[i].value.values();
    const auto& s = student.params[i].value.values();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = gamma * s[k] + (1.0 - gamma) * o[k];
  }
  return out;
}

}  // namespace remixse

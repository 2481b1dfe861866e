#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "remixse/adam.hpp"
#include "remixse/autodiff.hpp"
#include "remixse/corpus.hpp"
#include "remixse/error.hpp"
#include "remixse/model.hpp"
#include "remixse/rng.hpp"
#include "remixse/signal.hpp"

namespace remixse {

/// How a student training pair (input Y, target T) is formed from the
/// teacher's estimates.
enum class MixStrategy { Ctt1, Ctt2, Ctt3, Nytt1, Nytt2, Nytt3 };

inline constexpr MixStrategy kAllStrategies[] = {MixStrategy::Ctt1,  MixStrategy::Ctt2,  MixStrategy::Ctt3,
                                                 MixStrategy::Nytt1, MixStrategy::Nytt2, MixStrategy::Nytt3};

inline std::string to_string(MixStrategy s) {
  switch (s) {
    case MixStrategy::Ctt1: return "ctt1";
    case MixStrategy::Ctt2: return "ctt2";
    case MixStrategy::Ctt3: return "ctt3";
    case MixStrategy::Nytt1: return "nytt1";
    case MixStrategy::Nytt2: return "nytt2";
    case MixStrategy::Nytt3: return "nytt3";
  }
  return "nytt1";
}

inline MixStrategy parse_strategy(const std::string& s) {
  for (auto m : kAllStrategies)
    if (to_string(m) == s) return m;
  throw Error(ErrorKind::InvalidArgument, "unknown strategy '" + s + "'");
}

inline bool needs_ext_noise(MixStrategy s) {
  return s == MixStrategy::Ctt3 || s == MixStrategy::Nytt2 || s == MixStrategy::Nytt3;
}

// CTT strategies target the teacher's speech estimate; NyTT ones the noisy input.
inline bool targets_speech_estimate(MixStrategy s) {
  return s == MixStrategy::Ctt1 || s == MixStrategy::Ctt2 || s == MixStrategy::Ctt3;
}

struct TeacherUpdateProtocol {
  enum class Kind { Static, Ema };
  Kind kind = Kind::Static;
  double gamma = 0.005;

  static TeacherUpdateProtocol static_teacher() { return {Kind::Static, 0.005}; }
  static TeacherUpdateProtocol ema(double gamma = 0.005) {
    require(gamma > 0.0 && gamma <= 1.0, ErrorKind::InvalidArgument, "ema gamma must be in (0, 1]");
    return {Kind::Ema, gamma};
  }
  bool is_ema() const { return kind == Kind::Ema; }
};

inline std::string to_string(const TeacherUpdateProtocol& p) { return p.is_ema() ? "ema" : "static"; }

enum class LossKind { Mae, Mse };

inline std::string to_string(LossKind k) { return k == LossKind::Mae ? "mae" : "mse"; }
inline LossKind parse_loss(const std::string& s) {
  if (s == "mae") return LossKind::Mae;
  if (s == "mse") return LossKind::Mse;
  throw Error(ErrorKind::InvalidArgument, "unknown loss '" + s + "'");
}

struct AugmentConfig {
  bool shift = true;
  std::size_t max_shift_samples = 4000;
  bool remix = true;
  bool bandmask = true;
  double bandmask_fraction = 0.2;
};

struct TrainConfig {
  int epochs = 500;
  std::size_t batch_size = 16;
  std::size_t length = 16000;  // M, samples per training row
  double learning_rate = 3e-4;
  LossKind loss = LossKind::Mae;
  double snr_lo_db = -5.0;
  double snr_hi_db = 5.0;
  AugmentConfig augment;
  bool augment_in_distill = false;
  std::uint64_t seed = 0;
  MixStrategy strategy = MixStrategy::Nytt1;
  TeacherUpdateProtocol tup;

  void validate(bool shuffles, bool augments = true) const {
    require(epochs >= 1, ErrorKind::InvalidArgument, "epochs must be >= 1");
    require(batch_size >= 1 && length >= 1, ErrorKind::InvalidArgument, "batch size and length must be >= 1");
    require(!shuffles || batch_size >= 2, ErrorKind::InvalidArgument,
            "batch size must be >= 2 when rows are shuffled");
    require(snr_lo_db <= snr_hi_db, ErrorKind::InvalidArgument, "snr range is inverted");
    require(learning_rate > 0.0, ErrorKind::InvalidArgument, "learning rate must be positive");
    require(!augments || !augment.shift || augment.max_shift_samples < length, ErrorKind::InvalidArgument,
            "max shift must be smaller than the row length");
  }
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double seconds = 0.0;
  std::size_t steps = 0;
};

inline std::string format_stats_line(const EpochStats& s) {
  nlohmann::json j = {{"epoch", s.epoch}, {"mean_loss", s.mean_loss}, {"seconds", s.seconds}, {"steps", s.steps}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Training step

inline SignalBatch batch_like(const SignalBatch& b) { return SignalBatch(b.rows(), b.length(), b.sample_rate_hz()); }

/// Loss of forward(input) against target plus gradients for every parameter.
struct LossAndGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};

inline LossAndGrad loss_and_gradients(const DenoiserModel& model, const SignalBatch& input, const SignalBatch& target,
                                      LossKind kind) {
  require_same_shape(input, target, "training input and target shapes differ");
  ad::Tape tape;
  auto params = bind_parameters(tape, model);
  ad::Var pred = forward_on_tape(tape, model, params, input);
  ad::Var tgt = tape.constant(ad::Tensor({target.rows(), target.length()}, target.data()));
  ad::Var loss = kind == LossKind::Mae ? ad::mae_loss(pred, tgt) : ad::mse_loss(pred, tgt);
  LossAndGrad out;
  out.loss = loss.value()[0];
  if (!std::isfinite(out.loss)) return out;
  tape.backward(loss);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = tape.grad(params[i]);
    out.grads.push_back(g.empty() ? std::vector<double>(model.params[i].value.size(), 0.0) : g);
  }
  return out;
}

inline double train_step(DenoiserModel& model, AdamState& opt, const SignalBatch& input, const SignalBatch& target,
                         LossKind kind) {
  auto lg = loss_and_gradients(model, input, target, kind);
  if (!std::isfinite(lg.loss))
    throw Error(ErrorKind::NonFiniteLoss, "training loss became " + std::to_string(lg.loss) +
                                              " at optimizer step " + std::to_string(opt.timestep + 1));
  auto tensors = model.tensors();
  adam_step(tensors, lg.grads, opt);
  return lg.loss;
}

// ---------------------------------------------------------------------------
// Batch sampling

/// Draws fixed-size batches without replacement; the final partial batch of
/// an epoch is dropped.
class EpochSampler {
 public:
  EpochSampler(std::size_t corpus_size, std::size_t batch_size) : n_(corpus_size), b_(batch_size) {
    require(n_ >= 1, ErrorKind::EmptyCorpus, "corpus is empty");
    require(n_ >= b_, ErrorKind::EmptyCorpus,
            "corpus has " + std::to_string(n_) + " utterances, fewer than one batch of " + std::to_string(b_));
  }

  std::size_t batches_per_epoch() const { return n_ / b_; }

  std::vector<std::vector<std::size_t>> epoch(Rng& rng) const {
    const auto order = Permutation::random(n_, rng).order;
    std::vector<std::vector<std::size_t>> out(batches_per_epoch());
    for (std::size_t k = 0; k < out.size(); ++k)
      out[k].assign(order.begin() + static_cast<std::ptrdiff_t>(k * b_),
                    order.begin() + static_cast<std::ptrdiff_t>((k + 1) * b_));
    return out;
  }

 private:
  std::size_t n_, b_;
};

inline SignalBatch gather_batch(const std::vector<Waveform>& corpus, const std::vector<std::size_t>& idx,
                                std::size_t length, Rng& rng) {
  std::vector<Waveform> rows;
  rows.reserve(idx.size());
  for (auto i : idx) rows.push_back(crop_or_pad(corpus[i], length, rng));
  return SignalBatch::from_rows(rows);
}

// Cycles through a shuffled copy of the extraneous-noise corpus.
class NoiseStream {
 public:
  NoiseStream(const std::vector<Waveform>& corpus, Rng rng) : corpus_(corpus), rng_(std::move(rng)) {
    require(!corpus.empty(), ErrorKind::EmptyCorpus, "extraneous noise corpus is empty");
  }

  SignalBatch next(std::size_t rows, std::size_t length) {
    std::vector<Waveform> out;
    for (std::size_t r = 0; r < rows; ++r) {
      if (pos_ == order_.size()) {
        order_ = Permutation::random(corpus_.size(), rng_).order;
        pos_ = 0;
      }
      out.push_back(crop_or_pad(corpus_[order_[pos_++]], length, rng_));
    }
    return SignalBatch::from_rows(out);
  }

 private:
  const std::vector<Waveform>& corpus_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// `noise` scaled so that (signal, result) has the requested SNR. Degenerate
/// rows fall back to: zero-power noise -> zeros, zero-power signal -> noise
/// as is.
inline std::vector<double> noise_at_snr(std::span<const double> signal, std::span<const double> noise, double snr) {
  if (mean_power(noise) == 0.0) return std::vector<double>(noise.size(), 0.0);
  if (mean_power(signal) == 0.0) return {noise.begin(), noise.end()};
  return mix_at_snr(signal, noise, snr).scaled_noise;
}

// Applies the same stop band and the same shift to both sources.
inline std::pair<SignalBatch, SignalBatch> augment_pair(const SignalBatch& speech, const SignalBatch& noise,
                                                        const AugmentConfig& aug, Rng& rng) {
  SignalBatch a = speech, b = noise;
  if (aug.bandmask) {
    const auto bands = draw_stop_bands(a.rows(), aug.bandmask_fraction, a.sample_rate_hz(), rng);
    a = apply_stop_bands(a, bands);
    b = apply_stop_bands(b, bands);
  }
  if (aug.shift && aug.max_shift_samples > 0) std::tie(a, b) = augment_shift(a, b, aug.max_shift_samples, rng);
  return {std::move(a), std::move(b)};
}

struct TrainResult {
  DenoiserModel model;
  AdamState optimizer;
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;
};

using EpochCallback = std::function<void(const EpochStats&)>;

namespace distill_detail {
enum Stream : std::uint64_t { kSampler = 11, kCrop = 12, kExt = 13, kMix = 14, kAugment = 15, kPermute = 16 };
}

/// Trains on (noisy + extraneous noise -> noisy) pairs. Each batch: X from
/// the noisy corpus, extraneous rows mixed at a uniform SNR in the config
/// range, optional remix/bandmask/shift on the two sources, then one Adam
/// step on loss(X, forward(X + N)).
inline TrainResult bootstrap_nytt(const std::vector<Waveform>& noisy_corpus,
                                  const std::vector<Waveform>& ext_noise_corpus, DenoiserModel model,
                                  const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  using namespace distill_detail;
  config.validate(config.augment.remix);
  require(!noisy_corpus.empty(), ErrorKind::EmptyCorpus, "noisy corpus is empty");
  require(!ext_noise_corpus.empty(), ErrorKind::EmptyCorpus, "extraneous noise corpus is empty");

  EpochSampler sampler(noisy_corpus.size(), config.batch_size);
  Rng sampler_rng = Rng::derive({config.seed, kSampler});
  Rng crop_rng = Rng::derive({config.seed, kCrop});
  Rng mix_rng = Rng::derive({config.seed, kMix});
  Rng aug_rng = Rng::derive({config.seed, kAugment});
  NoiseStream ext(ext_noise_corpus, Rng::derive({config.seed, kExt}));

  TrainResult result;
  AdamHyper hyper;
  hyper.step_size = config.learning_rate;
  result.optimizer = AdamState::for_parameters(std::as_const(model).tensors(), hyper);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double total = 0.0;
    std::size_t steps = 0;
    for (const auto& idx : sampler.epoch(sampler_rng)) {
      SignalBatch X = gather_batch(noisy_corpus, idx, config.length, crop_rng);
      SignalBatch N = ext.next(X.rows(), X.length());
      if (config.augment.remix) N = augment_remix_noise(N, aug_rng).batch;
      SignalBatch scaled = batch_like(X);
      for (std::size_t r = 0; r < X.rows(); ++r) {
        const double snr = mix_rng.uniform(config.snr_lo_db, config.snr_hi_db);
        auto row = noise_at_snr(X.row(r), N.row(r), snr);
        std::copy(row.begin(), row.end(), scaled.row(r).begin());
      }
      auto [target, noise] = augment_pair(X, scaled, config.augment, aug_rng);
      SignalBatch Y = batch_like(target);
      for (std::size_t i = 0; i < Y.data().size(); ++i) Y.data()[i] = target.data()[i] + noise.data()[i];

      const double loss = train_step(model, result.optimizer, Y, target, config.loss);
      result.step_losses.push_back(loss);
      total += loss;
      ++steps;
    }
    EpochStats st{epoch, total / static_cast<double>(steps),
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), steps};
    result.epochs.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Student batches

struct StudentMixOptions {
  double snr_lo_db = -5.0;
  double snr_hi_db = 5.0;
};

struct StudentBatch {
  SignalBatch input;   // Y
  SignalBatch target;  // T
  // Extraneous rows after SNR scaling (empty when unused) and, for NYTT2,
  // whether row r took the shuffled in-domain estimate.
  std::optional<SignalBatch> ext_scaled;
  std::vector<bool> used_in_domain;
};

/// Forms (Y, T) for one strategy. With Ñ = shuffle_rows(N_hat, p) and E the
/// extraneous rows scaled to a uniform SNR relative to the row's base signal
/// (S_hat for CTT, X for NyTT):
///   CTT1  Y = X              T = S_hat
///   CTT2  Y = S_hat + Ñ      T = S_hat
///   CTT3  Y = S_hat + (Ñ+E)  T = S_hat
///   NYTT1 Y = X + Ñ          T = X
///   NYTT2 Y = X + (Ñ or E)   T = X, fair coin per row
///   NYTT3 Y = X + (Ñ+E)      T = X
inline StudentBatch build_student_batch(MixStrategy strategy, const SignalBatch& X, const SignalBatch& S_hat,
                                        const SignalBatch& N_hat, const Permutation& p,
                                        const std::optional<SignalBatch>& N_ext, Rng& rng,
                                        const StudentMixOptions& opts = {}) {
  require_same_shape(X, S_hat, "student batch: X and S_hat shapes differ");
  require_same_shape(X, N_hat, "student batch: X and N_hat shapes differ");
  if (needs_ext_noise(strategy)) {
    require(N_ext.has_value(), ErrorKind::MissingExtNoise, to_string(strategy) + " requires extraneous noise");
    require_same_shape(X, *N_ext, "student batch: extraneous noise shape differs");
  } else {
    require(!N_ext.has_value(), ErrorKind::UnexpectedExtNoise,
            to_string(strategy) + " does not use extraneous noise");
  }

  const bool ctt = targets_speech_estimate(strategy);
  const SignalBatch& base = ctt ? S_hat : X;
  StudentBatch out{batch_like(X), ctt ? S_hat : X, std::nullopt, {}};
  if (strategy == MixStrategy::Ctt1) {
    out.input = X;
    return out;
  }

  const SignalBatch shuffled = shuffle_rows(N_hat, p);
  if (needs_ext_noise(strategy)) {
    SignalBatch E = batch_like(X);
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const double snr = rng.uniform(opts.snr_lo_db, opts.snr_hi_db);
      auto row = noise_at_snr(base.row(r), N_ext->row(r), snr);
      std::copy(row.begin(), row.end(), E.row(r).begin());
    }
    out.ext_scaled = std::move(E);
  }

  const std::size_t M = X.length();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto y = out.input.row(r);
    auto b = base.row(r);
    auto n_in = shuffled.row(r);
    switch (strategy) {
      case MixStrategy::Ctt2:
      case MixStrategy::Nytt1:
        for (std::size_t t = 0; t < M; ++t) y[t] = b[t] + n_in[t];
        break;
      case MixStrategy::Ctt3:
      case MixStrategy::Nytt3: {
        auto e = out.ext_scaled->row(r);
        for (std::size_t t = 0; t < M; ++t) y[t] = b[t] + (n_in[t] + e[t]);
        break;
      }
      case MixStrategy::Nytt2: {
        const bool in_domain = rng.coin();
        out.used_in_domain.push_back(in_domain);
        auto src = in_domain ? n_in : out.ext_scaled->row(r);
        for (std::size_t t = 0; t < M; ++t) y[t] = b[t] + src[t];
        break;
      }
      case MixStrategy::Ctt1:
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Teacher-student loop

inline DenoiserModel update_teacher(const TeacherUpdateProtocol& protocol, const DenoiserModel& teacher,
                                    const DenoiserModel& student) {
  require(teacher.config == student.config, ErrorKind::ConfigMismatch, "teacher and student configs differ");
  if (!protocol.is_ema()) return teacher;
  return ema_combine(teacher, student, protocol.gamma);
}

struct DistillOptions {
  bool keep_teacher_trajectory = false;
  EpochCallback on_epoch;
};

struct DistillResult {
  DenoiserModel student;
  DenoiserModel teacher;  // after the last epoch's update
  AdamState optimizer;
  // Teacher at every epoch boundary: entry k is the teacher used during
  // epoch k+1 (entry 0 is the initial teacher); filled only on request.
  std::vector<DenoiserModel> teacher_trajectory;
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;
};

/// Per batch: sample X, draw a fresh permutation, run the teacher (no
/// gradients), N_hat = X - S_hat, build the strategy pair, step the student.
/// After each epoch the teacher follows the update protocol. The student
/// starts as a copy of the initial teacher.
inline DistillResult distill(const DenoiserModel& initial_teacher, const std::vector<Waveform>& noisy_corpus,
                             const std::vector<Waveform>* ext_noise_corpus, const TrainConfig& config,
                             const DistillOptions& options = {}) {
  using namespace distill_detail;
  config.validate(true, config.augment_in_distill);
  require(!noisy_corpus.empty(), ErrorKind::EmptyCorpus, "noisy corpus is empty");
  const bool wants_ext = needs_ext_noise(config.strategy);
  require(!wants_ext || (ext_noise_corpus && !ext_noise_corpus->empty()), ErrorKind::MissingExtNoise,
          to_string(config.strategy) + " requires an extraneous noise corpus");
  require(wants_ext || !ext_noise_corpus, ErrorKind::UnexpectedExtNoise,
          to_string(config.strategy) + " does not use extraneous noise");

  EpochSampler sampler(noisy_corpus.size(), config.batch_size);
  Rng sampler_rng = Rng::derive({config.seed, kSampler});
  Rng crop_rng = Rng::derive({config.seed, kCrop});
  Rng perm_rng = Rng::derive({config.seed, kPermute});
  Rng mix_rng = Rng::derive({config.seed, kMix});
  Rng aug_rng = Rng::derive({config.seed, kAugment});
  std::optional<NoiseStream> ext;
  if (wants_ext) ext.emplace(*ext_noise_corpus, Rng::derive({config.seed, kExt}));
  const StudentMixOptions mix_opts{config.snr_lo_db, config.snr_hi_db};

  DistillResult result;
  DenoiserModel teacher = initial_teacher;
  DenoiserModel student = initial_teacher;
  AdamHyper hyper;
  hyper.step_size = config.learning_rate;
  result.optimizer = AdamState::for_parameters(std::as_const(student).tensors(), hyper);
  if (options.keep_teacher_trajectory) result.teacher_trajectory.push_back(teacher);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double total = 0.0;
    std::size_t steps = 0;
    for (const auto& idx : sampler.epoch(sampler_rng)) {
      SignalBatch X = gather_batch(noisy_corpus, idx, config.length, crop_rng);
      const Permutation p = Permutation::random(X.rows(), perm_rng);
      Estimate est = forward(teacher, X);
      std::optional<SignalBatch> N_ext;
      if (ext) N_ext = ext->next(X.rows(), X.length());
      StudentBatch sb = build_student_batch(config.strategy, X, est.speech, est.noise, p, N_ext, mix_rng, mix_opts);
      if (config.augment_in_distill) {
        auto [t, y] = augment_pair(sb.target, sb.input, config.augment, aug_rng);
        sb.target = std::move(t);
        sb.input = std::move(y);
      }
      const double loss = train_step(student, result.optimizer, sb.input, sb.target, config.loss);
      result.step_losses.push_back(loss);
      total += loss;
      ++steps;
    }
    teacher = update_teacher(config.tup, teacher, student);
    if (options.keep_teacher_trajectory) result.teacher_trajectory.push_back(teacher);
    EpochStats st{epoch, total / static_cast<double>(steps),
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), steps};
    result.epochs.push_back(st);
    if (options.on_epoch) options.on_epoch(st);
  }
  result.student = std::move(student);
  result.teacher = std::move(teacher);
  return result;
}

}  // namespace remixse

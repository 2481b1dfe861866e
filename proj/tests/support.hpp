#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "remixse/remixse.hpp"

namespace remixse::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("remixse_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline ad::Tensor random_tensor(const ad::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so kinked ops stay differentiable under a
// finite-difference probe.
inline ad::Tensor random_tensor_off_zero(const ad::Shape& shape, Rng& rng, double gap = 0.05) {
  ad::Tensor t(shape);
  for (auto& v : t.values()) {
    const double m = rng.uniform(gap, 1.0);
    v = rng.coin() ? m : -m;
  }
  return t;
}

// sum(x * weights) with a constant weight tensor, so each output entry enters
// the loss with a distinct coefficient.
inline ad::Var weighted_sum(const ad::Var& x, const ad::Tensor& weights) {
  require(x.value().size() == weights.size(), ErrorKind::ShapeMismatch, "weighted_sum: size");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  const std::size_t xi = x.id();
  return x.tape().push(ad::Tensor({1}, {acc}), {x}, [xi, weights](ad::Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < weights.size(); ++i) gx[i] += g * weights[i];
  });
}

using LossBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheck {
  double max_relative_error = 0.0;  // over inputs, norm-wise per input
  std::size_t entries = 0;
};

// Compares reverse-mode gradients with central differences for every entry
// of every input. The error of one input is |g - g_fd| / max(|g|, |g_fd|)
// with Euclidean norms; a zero-gradient input counts as exact if both are 0.
inline GradCheck check_gradients(std::vector<ad::Tensor> inputs, const LossBuilder& build, double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.parameter(t));
    ad::Var loss = build(tape, vars);
    tape.backward(loss);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      auto g = tape.grad(vars[i]);
      if (g.empty()) g.assign(inputs[i].size(), 0.0);
      analytic.push_back(std::move(g));
    }
  }
  auto evaluate = [&]() {
    ad::Tape tape(false);
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return build(tape, vars).value()[0];
  };
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double keep = inputs[i][k];
      inputs[i][k] = keep + h;
      const double up = evaluate();
      inputs[i][k] = keep - h;
      const double down = evaluate();
      inputs[i][k] = keep;
      const double fd = (up - down) / (2.0 * h);
      diff += (fd - analytic[i][k]) * (fd - analytic[i][k]);
      na += analytic[i][k] * analytic[i][k];
      nn += fd * fd;
      ++out.entries;
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nn));
    const double err = denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
    out.max_relative_error = std::max(out.max_relative_error, err);
  }
  return out;
}

// Seeded harmonic signal with a slow envelope, used where a speech-like
// test input is needed without touching the filesystem.
inline std::vector<double> speech_like(std::size_t n, std::uint64_t seed, int fs = kDefaultSampleRate) {
  SynthSpec spec;
  spec.sample_rate_hz = fs;
  Rng rng(seed);
  return synth_speech_proxy(spec, n, rng);
}

inline std::vector<double> white_noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();
  return x;
}

inline SignalBatch random_batch(std::size_t rows, std::size_t length, std::uint64_t seed, double amp = 0.5) {
  Rng rng(seed);
  SignalBatch b(rows, length);
  for (auto& v : b.data()) v = rng.uniform(-amp, amp);
  return b;
}

inline double rms(std::span<const double> x) { return std::sqrt(mean_power(x)); }

// ---------------------------------------------------------------------------
// Strategy table oracle. Written from the table itself: the noise mixture
// N_mix is formed first and then added to the base signal, with no shared
// code path with build_student_batch.

struct OracleBatch {
  SignalBatch input;
  SignalBatch target;
};

// `ext` holds the already scaled extraneous rows; `use_in_domain` the NYTT2
// per-row choices.
inline OracleBatch oracle_student_batch(MixStrategy s, const SignalBatch& X, const SignalBatch& S_hat,
                                        const SignalBatch& N_hat, const Permutation& p, const SignalBatch* ext,
                                        const std::vector<bool>& use_in_domain) {
  const std::size_t B = X.rows(), M = X.length();
  const bool ctt = s == MixStrategy::Ctt1 || s == MixStrategy::Ctt2 || s == MixStrategy::Ctt3;
  OracleBatch o{SignalBatch(B, M, X.sample_rate_hz()), ctt ? S_hat : X};
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t t = 0; t < M; ++t) {
      const double x = X.data()[r * M + t], sh = S_hat.data()[r * M + t];
      const double n_tilde = N_hat.data()[p.order[r] * M + t];
      const double e = ext ? ext->data()[r * M + t] : 0.0;
      double y = 0.0;
      switch (s) {
        case MixStrategy::Ctt1: y = x; break;
        case MixStrategy::Ctt2: y = sh + n_tilde; break;
        case MixStrategy::Ctt3: { const double mix = n_tilde + e; y = sh + mix; break; }
        case MixStrategy::Nytt1: y = x + n_tilde; break;
        case MixStrategy::Nytt2: y = x + (use_in_domain[r] ? n_tilde : e); break;
        case MixStrategy::Nytt3: { const double mix = n_tilde + e; y = x + mix; break; }
      }
      o.input.data()[r * M + t] = y;
    }
  return o;
}

// Replays the rng draws build_student_batch makes: one SNR per row for the
// extraneous rows, then, for NYTT2, one coin per row.
struct StudentDraws {
  std::vector<double> snr_db;
  std::vector<bool> coins;
};

inline StudentDraws replay_student_draws(MixStrategy s, std::size_t rows, Rng rng, double lo, double hi) {
  StudentDraws d;
  const bool ext = s == MixStrategy::Ctt3 || s == MixStrategy::Nytt2 || s == MixStrategy::Nytt3;
  if (ext)
    for (std::size_t r = 0; r < rows; ++r) d.snr_db.push_back(rng.uniform(lo, hi));
  if (s == MixStrategy::Nytt2)
    for (std::size_t r = 0; r < rows; ++r) d.coins.push_back(rng.coin());
  return d;
}

// Largest deviation, in dB, of 10 log10(P_base / P_ext) from the requested
// SNR, plus whether every scaled row is a positive multiple of its source.
inline std::pair<double, bool> ext_scaling_check(const SignalBatch& base, const SignalBatch& raw,
                                                 const SignalBatch& scaled, const std::vector<double>& snr) {
  double worst = 0.0;
  bool proportional = true;
  for (std::size_t r = 0; r < base.rows(); ++r) {
    double pb = 0.0, pe = 0.0, cross = 0.0, pr = 0.0;
    for (std::size_t t = 0; t < base.length(); ++t) {
      const double b = base.row(r)[t], e = scaled.row(r)[t], n = raw.row(r)[t];
      pb += b * b;
      pe += e * e;
      cross += e * n;
      pr += n * n;
    }
    worst = std::max(worst, std::abs(10.0 * std::log10(pb / pe) - snr[r]));
    const double g = cross / pr;
    proportional = proportional && g > 0.0;
    for (std::size_t t = 0; t < base.length(); ++t)
      proportional = proportional && std::abs(scaled.row(r)[t] - g * raw.row(r)[t]) <= 1e-12 * (1.0 + std::abs(g));
  }
  return {worst, proportional};
}

// ---------------------------------------------------------------------------
// Gradient suite: every differentiable op on randomized small shapes.

struct OpGradResult {
  std::string op;
  std::vector<std::string> shapes;
  std::vector<double> errors;
  double worst() const { return errors.empty() ? 0.0 : *std::max_element(errors.begin(), errors.end()); }
};

inline std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

inline std::vector<OpGradResult> run_gradient_suite(std::size_t cases_per_op = 5, std::uint64_t seed = 2024) {
  std::vector<OpGradResult> out;
  Rng rng(seed);
  auto record = [&](const std::string& op) -> OpGradResult& {
    out.push_back({op, {}, {}});
    return out.back();
  };

  auto& conv = record("conv1d");
  for (std::size_t c = 0; c < cases_per_op; ++c) {
    const std::size_t B = draw(rng, 1, 2), Ci = draw(rng, 1, 3), Co = draw(rng, 1, 3), K = draw(rng, 1, 5),
                      S = draw(rng, 1, 3), T = K + draw(rng, 0, 9);
    const std::size_t F = ad::conv_output_length(T, K, S);
    auto weights = random_tensor({B, Co, F}, rng);
    auto r = check_gradients({random_tensor({B, Ci, T}, rng), random_tensor({Co, Ci, K}, rng), random_tensor({Co}, rng)},
                             [&](ad::Tape&, const std::vector<ad::Var>& v) {
                               return weighted_sum(ad::conv1d(v[0], v[1], v[2], S), weights);
                             });
    conv.shapes.push_back("x" + ad::shape_str({B, Ci, T}) + " w" + ad::shape_str({Co, Ci, K}) + " S=" + std::to_string(S));
    conv.errors.push_back(r.max_relative_error);
  }

  auto& convtr = record("conv_transpose1d");
  for (std::size_t c = 0; c < cases_per_op; ++c) {
    const std::size_t B = draw(rng, 1, 2), Ci = draw(rng, 1, 3), Co = draw(rng, 1, 3), K = draw(rng, 1, 5),
                      S = draw(rng, 1, 3), F = draw(rng, 1, 5);
    const std::size_t T = ad::conv_transpose_output_length(F, K, S);
    auto weights = random_tensor({B, Co, T}, rng);
    auto r = check_gradients({random_tensor({B, Ci, F}, rng), random_tensor({Ci, Co, K}, rng), random_tensor({Co}, rng)},
                             [&](ad::Tape&, const std::vector<ad::Var>& v) {
                               return weighted_sum(ad::conv_transpose1d(v[0], v[1], v[2], S), weights);
                             });
    convtr.shapes.push_back("x" + ad::shape_str({B, Ci, F}) + " w" + ad::shape_str({Ci, Co, K}) + " S=" + std::to_string(S));
    convtr.errors.push_back(r.max_relative_error);
  }

  using Unary = ad::Var (*)(const ad::Var&);
  const std::pair<const char*, Unary> unaries[] = {
      {"relu", [](const ad::Var& x) { return ad::relu(x); }},
      {"sigmoid", [](const ad::Var& x) { return ad::sigmoid(x); }},
      {"tanh", [](const ad::Var& x) { return ad::tanh(x); }},
  };
  for (const auto& [name, fn] : unaries) {
    auto& res = record(name);
    for (std::size_t c = 0; c < cases_per_op; ++c) {
      const ad::Shape shape{draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 6)};
      auto x = std::string(name) == "relu" ? random_tensor_off_zero(shape, rng) : random_tensor(shape, rng, -3.0, 3.0);
      auto weights = random_tensor(shape, rng);
      auto r = check_gradients({x}, [&](ad::Tape&, const std::vector<ad::Var>& v) { return weighted_sum(fn(v[0]), weights); });
      res.shapes.push_back(ad::shape_str(shape));
      res.errors.push_back(r.max_relative_error);
    }
  }

  auto& glu = record("glu");
  for (std::size_t c = 0; c < cases_per_op; ++c) {
    const std::size_t B = draw(rng, 1, 3), C = draw(rng, 1, 3), T = draw(rng, 1, 6);
    auto weights = random_tensor({B, C, T}, rng);
    auto r = check_gradients({random_tensor({B, 2 * C, T}, rng, -2.0, 2.0)},
                             [&](ad::Tape&, const std::vector<ad::Var>& v) { return weighted_sum(ad::glu(v[0], 1), weights); });
    glu.shapes.push_back(ad::shape_str({B, 2 * C, T}));
    glu.errors.push_back(r.max_relative_error);
  }

  auto& lstm = record("lstm_layer");
  for (std::size_t c = 0; c < cases_per_op; ++c) {
    const std::size_t B = draw(rng, 1, 2), T = draw(rng, 1, 4), C = draw(rng, 1, 3), H = draw(rng, 1, 3);
    auto weights = random_tensor({B, T, H}, rng);
    auto r = check_gradients({random_tensor({B, T, C}, rng), random_tensor({4 * H, C}, rng, -0.8, 0.8),
                              random_tensor({4 * H, H}, rng, -0.8, 0.8), random_tensor({4 * H}, rng, -0.5, 0.5)},
                             [&](ad::Tape&, const std::vector<ad::Var>& v) {
                               return weighted_sum(ad::lstm_layer(v[0], v[1], v[2], v[3]), weights);
                             });
    lstm.shapes.push_back("x" + ad::shape_str({B, T, C}) + " H=" + std::to_string(H));
    lstm.errors.push_back(r.max_relative_error);
  }

  for (const char* name : {"mae_loss", "mse_loss"}) {
    auto& res = record(name);
    const bool mae = std::string(name) == "mae_loss";
    for (std::size_t c = 0; c < cases_per_op; ++c) {
      const ad::Shape shape{draw(rng, 1, 3), draw(rng, 1, 8)};
      auto pred = random_tensor(shape, rng);
      auto gap = random_tensor_off_zero(shape, rng);
      ad::Tensor target(shape);
      for (std::size_t i = 0; i < target.size(); ++i) target[i] = pred[i] + gap[i];
      auto r = check_gradients({pred, target}, [&](ad::Tape&, const std::vector<ad::Var>& v) {
        return mae ? ad::mae_loss(v[0], v[1]) : ad::mse_loss(v[0], v[1]);
      });
      res.shapes.push_back(ad::shape_str(shape));
      res.errors.push_back(r.max_relative_error);
    }
  }
  return out;
}

}  // namespace remixse::testing

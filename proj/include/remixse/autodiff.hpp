#pragma once

// Define-by-run reverse-mode differentiation over the small set of 64-bit
// tensor operations the waveform denoiser is built from.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "remixse/error.hpp"
#include "remixse/resample.hpp"

namespace remixse::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == numel(shape_), ErrorKind::ShapeMismatch,
            "tensor data length does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order and replays their adjoints in
/// exact reverse order. Gradient buffers start at zero and accumulate, so a
/// value consumed twice receives the sum of both contributions.
///
/// A tape created with `record = false` keeps forward values only; it is the
/// inference path and rejects backward().
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor t) { return push_node(std::move(t), nullptr, false, {}); }

  // The tensor is referenced, not copied; it must outlive the tape.
  Var parameter(const Tensor& t) { return push_node({}, &t, record_, {}); }

  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  const Tensor& value(Var v) const { return value(v.id()); }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  // Records the result of an op. `backward` runs only if any of `inputs`
  // requires a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
#ifndef NDEBUG
    for (double v : value.values()) assert(std::isfinite(v) && "non-finite value in forward pass");
#endif
    return push_node(std::move(value), nullptr, needs, needs ? std::move(backward) : Backward{});
  }

  // Gradient w.r.t. node `id`; zero sized until backward touches it.
  const std::vector<double>& grad(std::size_t id) const { return grads_.at(id); }
  const std::vector<double>& grad(Var v) const { return grad(v.id()); }

  // Accumulator for node `id`, allocated as zeros on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(value(id).size(), 0.0);
    return g;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  void backward(Var loss) {
    require(record_, ErrorKind::InvalidArgument, "backward on a non-recording tape");
    require(value(loss).size() == 1, ErrorKind::ShapeMismatch, "backward needs a scalar loss");
    grads_.assign(nodes_.size(), {});
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || grads_[i].empty()) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push_node(Tensor owned, const Tensor* ref, bool requires_grad, Backward backward) {
    nodes_.push_back({std::move(owned), ref, requires_grad, std::move(backward)});
    return {this, nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_shape(const Var& v, std::size_t rank, const char* op) {
  require(v.shape().size() == rank, ErrorKind::ShapeMismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(v.shape()));
}

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xi = x.id();
  return tape.push(std::move(out), {x}, [xi, deriv](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
          "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().push(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t id : {ai, bi}) {
      if (!t.requires_grad(id)) continue;
      auto& gx = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
          "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().push(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ai)) {
      auto& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var scale(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// Multiplies every element of row b (leading axis) by the constant factors[b].
inline Var scale_rows(const Var& x, std::vector<double> factors) {
  require(!x.shape().empty() && x.shape()[0] == factors.size(), ErrorKind::ShapeMismatch,
          "scale_rows: one factor per leading row required");
  const auto& xv = x.value();
  const std::size_t inner = xv.size() / factors.size();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factors[i / inner];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {x}, [xi, inner, factors = std::move(factors)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factors[i / inner];
  });
}

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return sigmoid_value(v); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// Gated linear unit: splits `axis` into halves a | b and returns a * sigmoid(b).
inline Var glu(const Var& x, std::size_t axis = 1) {
  const Shape& s = x.shape();
  require(axis < s.size() && s[axis] % 2 == 0, ErrorKind::ShapeMismatch,
          "glu: split axis must exist and have even size, got " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t half = s[axis] / 2;
  Shape os = s;
  os[axis] = half;
  Tensor out(os);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < half; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const double a = xv[(o * 2 * half + c) * inner + i];
        const double b = xv[(o * 2 * half + c + half) * inner + i];
        out[(o * half + c) * inner + i] = a * sigmoid_value(b);
      }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {x}, [xi, outer, half, inner](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(xi);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < half; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t ia = (o * 2 * half + c) * inner + i;
          const std::size_t ib = (o * 2 * half + c + half) * inner + i;
          const double sb = sigmoid_value(xv[ib]);
          const double go = g[(o * half + c) * inner + i];
          gx[ia] += go * sb;
          gx[ib] += go * xv[ia] * sb * (1.0 - sb);
        }
  });
}

inline Var reshape(const Var& x, Shape shape) {
  require(numel(shape) == x.value().size(), ErrorKind::ShapeMismatch,
          "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor out(std::move(shape), x.value().values());
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {x}, [xi](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// [B, C, T] <-> [B, T, C]
inline Var swap_last_axes(const Var& x) {
  detail::require_shape(x, 3, "swap_last_axes");
  const std::size_t B = x.shape()[0], P = x.shape()[1], Q = x.shape()[2];
  Tensor out({B, Q, P});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t q = 0; q < Q; ++q) out[(b * Q + q) * P + p] = xv[(b * P + p) * Q + q];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {x}, [xi, B, P, Q](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t q = 0; q < Q; ++q) gx[(b * P + p) * Q + q] += g[(b * Q + q) * P + p];
  });
}

/// Concatenates [B, C1, T] and [B, C2, T] along the channel axis.
inline Var concat_channels(const Var& a, const Var& b) {
  detail::require_shape(a, 3, "concat_channels");
  detail::require_shape(b, 3, "concat_channels");
  const std::size_t B = a.shape()[0], C1 = a.shape()[1], C2 = b.shape()[1], T = a.shape()[2];
  require(b.shape()[0] == B && b.shape()[2] == T, ErrorKind::ShapeMismatch,
          "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out({B, C1 + C2, T});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t r = 0; r < B; ++r) {
    std::copy_n(av.data() + r * C1 * T, C1 * T, out.data() + r * (C1 + C2) * T);
    std::copy_n(bv.data() + r * C2 * T, C2 * T, out.data() + (r * (C1 + C2) + C1) * T);
  }
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().push(std::move(out), {a, b}, [ai, bi, B, C1, C2, T](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ai)) {
      auto& ga = t.grad_buffer(ai);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < C1 * T; ++i) ga[r * C1 * T + i] += g[r * (C1 + C2) * T + i];
    }
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < C2 * T; ++i) gb[r * C2 * T + i] += g[(r * (C1 + C2) + C1) * T + i];
    }
  });
}

/// Keeps samples [start, start + length) of the last axis.
inline Var slice_time(const Var& x, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  require(!s.empty() && start + length <= s.back(), ErrorKind::ShapeMismatch,
          "slice_time: window exceeds " + shape_str(s));
  const std::size_t T = s.back();
  const std::size_t rows = x.value().size() / T;
  Shape os = s;
  os.back() = length;
  Tensor out(os);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * T + start, length, out.data() + r * length);
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {x}, [xi, rows, T, start, length](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < length; ++i) gx[r * T + start + i] += g[r * length + i];
  });
}

/// Resamples every row of the last axis with a shared linear resampler.
inline Var resample_time(const Var& x, std::shared_ptr<const dsp::Resampler> rs) {
  const Shape& s = x.shape();
  require(!s.empty(), ErrorKind::ShapeMismatch, "resample_time: scalar input");
  const std::size_t T = s.back();
  const std::size_t rows = x.value().size() / T;
  const std::size_t T_out = rs->output_length(T);
  Shape os = s;
  os.back() = T_out;
  Tensor out(os);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto y = rs->apply(std::span<const double>(xv.data() + r * T, T));
    std::copy(y.begin(), y.end(), out.data() + r * T_out);
  }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {x}, [xi, rows, T, T_out, rs](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      auto d = rs->apply_adjoint(std::span<const double>(g.data() + r * T_out, T_out), T);
      for (std::size_t i = 0; i < T; ++i) gx[r * T + i] += d[i];
    }
  });
}

inline Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  const std::size_t xi = x.id();
  return x.tape().push(Tensor({1}, {acc}), {x}, [xi](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& gx = t.grad_buffer(xi);
    for (auto& v : gx) v += g;
  });
}

// ---------------------------------------------------------------------------
// Convolutions

inline std::size_t conv_output_length(std::size_t T, std::size_t K, std::size_t S) { return (T - K) / S + 1; }
inline std::size_t conv_transpose_output_length(std::size_t F, std::size_t K, std::size_t S) {
  return (F - 1) * S + K;
}

/// Valid (unpadded) strided correlation.
/// input [B, Ci, T], weight [Co, Ci, K], bias [Co] -> [B, Co, (T - K) / S + 1].
inline Var conv1d(const Var& x, const Var& w, const Var& bias, std::size_t stride) {
  detail::require_shape(x, 3, "conv1d input");
  detail::require_shape(w, 3, "conv1d weight");
  const std::size_t B = x.shape()[0], Ci = x.shape()[1], T = x.shape()[2];
  const std::size_t Co = w.shape()[0], K = w.shape()[2];
  require(w.shape()[1] == Ci, ErrorKind::ShapeMismatch,
          "conv1d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  require(bias.shape() == Shape{Co}, ErrorKind::ShapeMismatch, "conv1d: bias must be [Co]");
  require(stride >= 1, ErrorKind::InvalidArgument, "conv1d: stride must be >= 1");
  require(T >= K, ErrorKind::LengthMismatch,
          "conv1d: input length " + std::to_string(T) + " shorter than kernel " + std::to_string(K));
  const std::size_t S = stride;
  const std::size_t F = conv_output_length(T, K, S);

  Tensor out({B, Co, F});
  const double* xv = x.value().data();
  const double* wv = w.value().data();
  const double* bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      double* y = out.data() + (b * Co + co) * F;
      std::fill_n(y, F, bv[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = xv + (b * Ci + ci) * T;
        const double* wr = wv + (co * Ci + ci) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double wk = wr[k];
          const double* src = in + k;
          if (S == 1) {
            for (std::size_t f = 0; f < F; ++f) y[f] += wk * src[f];
          } else {
            for (std::size_t f = 0; f < F; ++f) y[f] += wk * src[f * S];
          }
        }
      }
    }

  const std::size_t xi = x.id(), wi = w.id(), bi = bias.id();
  return x.tape().push(std::move(out), {x, w, bias},
                       [xi, wi, bi, B, Ci, T, Co, K, S, F](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data();
    const double* xv = t.value(xi).data();
    const double* wv = t.value(wi).data();
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gy = g + (b * Co + co) * F;
          double acc = 0.0;
          for (std::size_t f = 0; f < F; ++f) acc += gy[f];
          gb[co] += acc;
        }
    }
    if (t.requires_grad(wi)) {
      double* gw = t.grad_buffer(wi).data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gy = g + (b * Co + co) * F;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* in = xv + (b * Ci + ci) * T;
            double* gwr = gw + (co * Ci + ci) * K;
            for (std::size_t k = 0; k < K; ++k) {
              double acc = 0.0;
              const double* src = in + k;
              for (std::size_t f = 0; f < F; ++f) acc += gy[f] * src[f * S];
              gwr[k] += acc;
            }
          }
        }
    }
    if (t.requires_grad(xi)) {
      double* gx = t.grad_buffer(xi).data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gy = g + (b * Co + co) * F;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            double* gin = gx + (b * Ci + ci) * T;
            const double* wr = wv + (co * Ci + ci) * K;
            for (std::size_t k = 0; k < K; ++k) {
              const double wk = wr[k];
              double* dst = gin + k;
              for (std::size_t f = 0; f < F; ++f) dst[f * S] += wk * gy[f];
            }
          }
        }
    }
  });
}

/// Transposed convolution, the adjoint of conv1d.
/// input [B, Ci, F], weight [Ci, Co, K], bias [Co] -> [B, Co, (F - 1) * S + K].
inline Var conv_transpose1d(const Var& x, const Var& w, const Var& bias, std::size_t stride) {
  detail::require_shape(x, 3, "conv_transpose1d input");
  detail::require_shape(w, 3, "conv_transpose1d weight");
  const std::size_t B = x.shape()[0], Ci = x.shape()[1], F = x.shape()[2];
  const std::size_t Co = w.shape()[1], K = w.shape()[2];
  require(w.shape()[0] == Ci, ErrorKind::ShapeMismatch,
          "conv_transpose1d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  require(bias.shape() == Shape{Co}, ErrorKind::ShapeMismatch, "conv_transpose1d: bias must be [Co]");
  require(stride >= 1 && F >= 1, ErrorKind::InvalidArgument, "conv_transpose1d: bad stride or empty input");
  const std::size_t S = stride;
  const std::size_t T = conv_transpose_output_length(F, K, S);

  Tensor out({B, Co, T});
  const double* xv = x.value().data();
  const double* wv = w.value().data();
  const double* bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      double* y = out.data() + (b * Co + co) * T;
      std::fill_n(y, T, bv[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = xv + (b * Ci + ci) * F;
        const double* wr = wv + (ci * Co + co) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double wk = wr[k];
          double* dst = y + k;
          for (std::size_t f = 0; f < F; ++f) dst[f * S] += wk * in[f];
        }
      }
    }

  const std::size_t xi = x.id(), wi = w.id(), bi = bias.id();
  return x.tape().push(std::move(out), {x, w, bias},
                       [xi, wi, bi, B, Ci, F, Co, K, S, T](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data();
    const double* xv = t.value(xi).data();
    const double* wv = t.value(wi).data();
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gy = g + (b * Co + co) * T;
          double acc = 0.0;
          for (std::size_t i = 0; i < T; ++i) acc += gy[i];
          gb[co] += acc;
        }
    }
    const bool need_w = t.requires_grad(wi), need_x = t.requires_grad(xi);
    double* gw = need_w ? t.grad_buffer(wi).data() : nullptr;
    double* gx = need_x ? t.grad_buffer(xi).data() : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Co; ++co) {
        const double* gy = g + (b * Co + co) * T;
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const double* in = xv + (b * Ci + ci) * F;
          const double* wr = wv + (ci * Co + co) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double* src = gy + k;
            if (need_w) {
              double acc = 0.0;
              for (std::size_t f = 0; f < F; ++f) acc += in[f] * src[f * S];
              gw[(ci * Co + co) * K + k] += acc;
            }
            if (need_x) {
              const double wk = wr[k];
              double* gin = gx + (b * Ci + ci) * F;
              for (std::size_t f = 0; f < F; ++f) gin[f] += wk * src[f * S];
            }
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Recurrent layer

/// Unidirectional LSTM over time, zero initial state, gate order (i, f, g, o).
/// input [B, T, C], w_ih [4H, C], w_hh [4H, H], bias [4H] -> [B, T, H].
/// Output at step t depends only on inputs at steps <= t.
inline Var lstm_layer(const Var& x, const Var& w_ih, const Var& w_hh, const Var& bias) {
  detail::require_shape(x, 3, "lstm input");
  detail::require_shape(w_ih, 2, "lstm w_ih");
  detail::require_shape(w_hh, 2, "lstm w_hh");
  const std::size_t B = x.shape()[0], T = x.shape()[1], C = x.shape()[2];
  const std::size_t H = w_hh.shape()[1];
  const std::size_t G = 4 * H;
  require(w_ih.shape() == Shape{G, C} && w_hh.shape() == Shape{G, H} && bias.shape() == Shape{G},
          ErrorKind::ShapeMismatch, "lstm: inconsistent parameter shapes");

  // Per (b, t): gate activations [i f g o], cell state, tanh(cell).
  struct Cache {
    std::vector<double> gates, cell, cell_tanh;
  };
  auto cache = std::make_shared<Cache>();
  const bool keep = x.tape().recording();
  if (keep) {
    cache->gates.assign(B * T * G, 0.0);
    cache->cell.assign(B * T * H, 0.0);
    cache->cell_tanh.assign(B * T * H, 0.0);
  }

  Tensor out({B, T, H});
  const double* xv = x.value().data();
  const double* wi = w_ih.value().data();
  const double* wh = w_hh.value().data();
  const double* bv = bias.value().data();
  std::vector<double> z(G), c(H), h(H), a(G);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(c.begin(), c.end(), 0.0);
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* xt = xv + (b * T + t) * C;
      for (std::size_t r = 0; r < G; ++r) {
        double acc = bv[r];
        const double* wir = wi + r * C;
        for (std::size_t k = 0; k < C; ++k) acc += wir[k] * xt[k];
        const double* whr = wh + r * H;
        for (std::size_t k = 0; k < H; ++k) acc += whr[k] * h[k];
        z[r] = acc;
      }
      double* ht = out.data() + (b * T + t) * H;
      for (std::size_t j = 0; j < H; ++j) {
        const double ig = sigmoid_value(z[j]);
        const double fg = sigmoid_value(z[H + j]);
        const double gg = std::tanh(z[2 * H + j]);
        const double og = sigmoid_value(z[3 * H + j]);
        c[j] = fg * c[j] + ig * gg;
        const double tc = std::tanh(c[j]);
        h[j] = og * tc;
        ht[j] = h[j];
        if (keep) {
          double* gs = cache->gates.data() + (b * T + t) * G;
          gs[j] = ig;
          gs[H + j] = fg;
          gs[2 * H + j] = gg;
          gs[3 * H + j] = og;
          cache->cell[(b * T + t) * H + j] = c[j];
          cache->cell_tanh[(b * T + t) * H + j] = tc;
        }
      }
    }
  }

  const std::size_t xi = x.id(), wii = w_ih.id(), whi = w_hh.id(), bi = bias.id();
  return x.tape().push(std::move(out), {x, w_ih, w_hh, bias},
                       [xi, wii, whi, bi, B, T, C, H, G, cache](Tape& tp, std::size_t self) {
    const double* g = tp.grad(self).data();
    const double* xv = tp.value(xi).data();
    const double* wi = tp.value(wii).data();
    const double* wh = tp.value(whi).data();
    const double* hv = tp.value(self).data();
    const bool need_x = tp.requires_grad(xi), need_wi = tp.requires_grad(wii);
    const bool need_wh = tp.requires_grad(whi), need_b = tp.requires_grad(bi);
    double* gx = need_x ? tp.grad_buffer(xi).data() : nullptr;
    double* gwi = need_wi ? tp.grad_buffer(wii).data() : nullptr;
    double* gwh = need_wh ? tp.grad_buffer(whi).data() : nullptr;
    double* gb = need_b ? tp.grad_buffer(bi).data() : nullptr;

    std::vector<double> dh_next(H), dc_next(H), dz(G);
    for (std::size_t b = 0; b < B; ++b) {
      std::fill(dh_next.begin(), dh_next.end(), 0.0);
      std::fill(dc_next.begin(), dc_next.end(), 0.0);
      for (std::size_t t = T; t-- > 0;) {
        const double* gs = cache->gates.data() + (b * T + t) * G;
        const double* tc = cache->cell_tanh.data() + (b * T + t) * H;
        const double* c_prev = t > 0 ? cache->cell.data() + (b * T + t - 1) * H : nullptr;
        const double* gy = g + (b * T + t) * H;
        for (std::size_t j = 0; j < H; ++j) {
          const double ig = gs[j], fg = gs[H + j], gg = gs[2 * H + j], og = gs[3 * H + j];
          const double dh = gy[j] + dh_next[j];
          const double dc = dh * og * (1.0 - tc[j] * tc[j]) + dc_next[j];
          const double cp = c_prev ? c_prev[j] : 0.0;
          dz[j] = dc * gg * ig * (1.0 - ig);
          dz[H + j] = dc * cp * fg * (1.0 - fg);
          dz[2 * H + j] = dc * ig * (1.0 - gg * gg);
          dz[3 * H + j] = dh * tc[j] * og * (1.0 - og);
          dc_next[j] = dc * fg;
        }
        const double* xt = xv + (b * T + t) * C;
        const double* h_prev = t > 0 ? hv + (b * T + t - 1) * H : nullptr;
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t r = 0; r < G; ++r) {
          const double d = dz[r];
          if (need_b) gb[r] += d;
          if (need_wi) {
            double* row = gwi + r * C;
            for (std::size_t k = 0; k < C; ++k) row[k] += d * xt[k];
          }
          if (need_x) {
            double* gxt = gx + (b * T + t) * C;
            const double* row = wi + r * C;
            for (std::size_t k = 0; k < C; ++k) gxt[k] += d * row[k];
          }
          if (h_prev) {
            if (need_wh) {
              double* row = gwh + r * H;
              for (std::size_t k = 0; k < H; ++k) row[k] += d * h_prev[k];
            }
            const double* row = wh + r * H;
            for (std::size_t k = 0; k < H; ++k) dh_next[k] += d * row[k];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// (1 / (B*M)) * sum |pred - target|; subgradient 0 at exact ties.
inline Var mae_loss(const Var& pred, const Var& target) {
  require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch, "mae_loss: shapes differ");
  const auto& p = pred.value();
  const auto& q = target.value();
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  const std::size_t pi = pred.id(), ti = target.id();
  return pred.tape().push(Tensor({1}, {acc / n}), {pred, target}, [pi, ti, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / n;
    const auto& p = t.value(pi);
    const auto& q = t.value(ti);
    auto sgn = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    if (t.requires_grad(pi)) {
      auto& gp = t.grad_buffer(pi);
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * sgn(p[i] - q[i]);
    }
    if (t.requires_grad(ti)) {
      auto& gq = t.grad_buffer(ti);
      for (std::size_t i = 0; i < p.size(); ++i) gq[i] -= g * sgn(p[i] - q[i]);
    }
  });
}

/// Batch mean of squared L2 norms: (1 / B) * sum_i ||pred_i - target_i||^2,
/// where B is the leading dimension.
inline Var mse_loss(const Var& pred, const Var& target) {
  require(pred.shape() == target.shape() && !pred.shape().empty(), ErrorKind::ShapeMismatch,
          "mse_loss: shapes differ");
  const auto& p = pred.value();
  const auto& q = target.value();
  const double B = static_cast<double>(pred.shape()[0]);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - q[i]) * (p[i] - q[i]);
  const std::size_t pi = pred.id(), ti = target.id();
  return pred.tape().push(Tensor({1}, {acc / B}), {pred, target}, [pi, ti, B](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] * 2.0 / B;
    const auto& p = t.value(pi);
    const auto& q = t.value(ti);
    if (t.requires_grad(pi)) {
      auto& gp = t.grad_buffer(pi);
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * (p[i] - q[i]);
    }
    if (t.requires_grad(ti)) {
      auto& gq = t.grad_buffer(ti);
      for (std::size_t i = 0; i < p.size(); ++i) gq[i] -= g * (p[i] - q[i]);
    }
  });
}

}  // namespace remixse::ad

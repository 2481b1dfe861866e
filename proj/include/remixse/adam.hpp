#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "remixse/autodiff.hpp"
#include "remixse/error.hpp"

namespace remixse {

struct AdamHyper {
  double step_size = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t timestep = 0;

  static AdamState for_parameters(std::span<const ad::Tensor* const> params, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    for (const auto* p : params) {
      s.first_moment.emplace_back(p->size(), 0.0);
      s.second_moment.emplace_back(p->size(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update, applied in place. `grads[i]` must match
/// `params[i]` element for element.
inline void adam_step(std::span<ad::Tensor* const> params, std::span<const std::vector<double>> grads,
                      AdamState& state) {
  require(params.size() == grads.size() && params.size() == state.first_moment.size(), ErrorKind::SizeMismatch,
          "adam: parameter, gradient and moment counts differ");
  const auto& h = state.hyper;
  state.timestep += 1;
  const double t = static_cast<double>(state.timestep);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->values();
    const auto& g = grads[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    require(g.size() == p.size() && m.size() == p.size(), ErrorKind::SizeMismatch,
            "adam: gradient shape differs from parameter");
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      p[k] -= h.step_size * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
}

}  // namespace remixse

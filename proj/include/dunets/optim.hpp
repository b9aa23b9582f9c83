#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "dunets/layers.hpp"

namespace dunets {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor> m, v;
};

/// Bias-corrected Adam update of every parameter from its accumulated grad.
inline void adam_step(ParamStore& params, AdamState& st, double lr) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.value.shape());
      st.v.emplace_back(p.value.shape());
    }
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameter set");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (p.grad.shape() != p.value.shape() || st.m[i].shape() != p.value.shape())
      throw std::invalid_argument("adam_step: shape mismatch for " + p.name);
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

struct CosineSchedule {
  double initial = 1e-3;
  long t_max = 1;

  /// (initial / 2) * (1 + cos(pi t / t_max)); zero past t_max.
  double rate(long t) const {
    if (t >= t_max) return 0.0;
    if (t <= 0) return initial;
    return 0.5 * initial *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(t_max)));
  }
};

inline double global_grad_norm(const ParamStore& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.grad.values()) s += g * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
inline double clip_global_norm(ParamStore& params, double max_norm = 1.0) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.grad.values()) g *= f;
  }
  return norm;
}

}  // namespace dunets

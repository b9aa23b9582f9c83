#pragma once

// Test-only oracles: central finite differences on tape programs and on parameter sets,
// computed purely from forward evaluations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dunets/autodiff.hpp"
#include "dunets/layers.hpp"
#include "dunets/rng.hpp"

namespace oracle {

using dunets::Tensor;
using dunets::ad::DiffTensor;
using dunets::ad::Tape;

inline Tensor random_tensor(dunets::Rng& rng, dunets::Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Magnitudes in [lo, hi] with random sign; keeps PReLU inputs away from the kink.
inline Tensor random_away_from_zero(dunets::Rng& rng, dunets::Shape shape, double lo = 0.05, double hi = 1.5) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

/// ||a - b|| / max(||a||, ||b||); zero when both vanish.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den == 0.0 ? 0.0 : std::sqrt(num) / den;
}

using Program = std::function<DiffTensor(Tape&, const std::vector<DiffTensor>&)>;

/// Gradient of <R, f(inputs)> for a fixed random R, analytic vs central differences.
/// Returns the worst per-input relative error.
inline double check_inputs(const Program& f, const std::vector<Tensor>& inputs, dunets::Rng& rng,
                           double h = 1e-6) {
  Tensor weights;
  auto loss_of = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<DiffTensor> leaves;
    for (const auto& x : xs) leaves.push_back(grads ? tape.variable(x) : tape.constant(x));
    auto out = f(tape, leaves);
    if (weights.empty()) weights = random_tensor(rng, out.shape());
    auto loss = dunets::ad::sum(dunets::ad::mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const auto& l : leaves) grads->push_back(tape.grad(l));
    }
    return loss.value().item();
  };
  std::vector<Tensor> analytic;
  loss_of(inputs, &analytic);
  double worst = 0.0;
  std::vector<Tensor> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    std::vector<double> fd(xs[k].size());
    for (std::size_t j = 0; j < xs[k].size(); ++j) {
      const double orig = xs[k][j];
      xs[k][j] = orig + h;
      const double lp = loss_of(xs, nullptr);
      xs[k][j] = orig - h;
      const double lm = loss_of(xs, nullptr);
      xs[k][j] = orig;
      fd[j] = (lp - lm) / (2.0 * h);
    }
    worst = std::max(worst, rel_err(analytic[k].values(), fd));
  }
  return worst;
}

using ParamLoss = std::function<DiffTensor(Tape&)>;

inline std::vector<double> flat_grads(const dunets::ParamStore& store) {
  std::vector<double> g;
  for (const auto& p : store) g.insert(g.end(), p.grad.values().begin(), p.grad.values().end());
  return g;
}

inline std::vector<double> analytic_param_grads(dunets::ParamStore& store, const ParamLoss& loss) {
  store.zero_grad();
  Tape tape;
  tape.backward(loss(tape));
  return flat_grads(store);
}

inline double eval_loss(const ParamLoss& loss) {
  Tape tape;
  return loss(tape).value().item();
}

/// Full central-difference gradient over every parameter scalar.
inline double check_params(dunets::ParamStore& store, const ParamLoss& loss, double h = 1e-6) {
  const auto analytic = analytic_param_grads(store, loss);
  std::vector<double> fd;
  fd.reserve(analytic.size());
  for (auto& p : store)
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double orig = p.value[j];
      p.value[j] = orig + h;
      const double lp = eval_loss(loss);
      p.value[j] = orig - h;
      const double lm = eval_loss(loss);
      p.value[j] = orig;
      fd.push_back((lp - lm) / (2.0 * h));
    }
  return rel_err(analytic, fd);
}

/// <grad, d> against (L(theta + h d) - L(theta - h d)) / 2h along a random unit direction.
inline double check_direction(dunets::ParamStore& store, const ParamLoss& loss, dunets::Rng& rng,
                              double h = 1e-6) {
  const auto analytic = analytic_param_grads(store, loss);
  std::vector<double> d(analytic.size());
  double nd = 0.0;
  for (auto& v : d) {
    v = rng.normal();
    nd += v * v;
  }
  for (auto& v : d) v /= std::sqrt(nd);
  auto shift = [&](double s) {
    std::size_t k = 0;
    for (auto& p : store)
      for (auto& v : p.value.values()) v += s * d[k++];
  };
  shift(h);
  const double lp = eval_loss(loss);
  shift(-2.0 * h);
  const double lm = eval_loss(loss);
  shift(h);
  double dir = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) dir += analytic[i] * d[i];
  const double fd = (lp - lm) / (2.0 * h);
  const double den = std::max(std::abs(dir), std::abs(fd));
  return den == 0.0 ? 0.0 : std::abs(dir - fd) / den;
}

/// Fills every parameter uniformly in [-scale, scale] (so zero-initialized layers carry signal).
inline void randomize(dunets::ParamStore& store, dunets::Rng& rng, double scale) {
  for (auto& p : store)
    for (auto& v : p.value.values()) v = rng.uniform(-scale, scale);
}

}  // namespace oracle

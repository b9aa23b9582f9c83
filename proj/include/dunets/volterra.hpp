#pragma once

// Windowed second-order Volterra forward map
//
//   y_i = a * w_i' W2 w_i + w1' w_i + b,   w_i = x[i*s, i*s + k)
//
// with W2 upper triangular, plus its Jacobian products and tape operations.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dunets/autodiff.hpp"
#include "dunets/rng.hpp"
#include "dunets/tensor.hpp"

namespace dunets {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h_ = (h_ ^ c[i]) * 0x100000001b3ULL;
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    bytes(s.data(), s.size());
    u64(s.size());
  }
  std::uint64_t value() const { return h_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

class VolterraOperator {
 public:
  VolterraOperator(std::size_t n, std::size_t k, std::size_t s, double a, double b, std::vector<double> w1,
                   std::vector<double> w2)
      : n_(n), k_(k), s_(s), a_(a), b_(b), w1_(std::move(w1)), w2_(std::move(w2)) {
    if (k == 0 || s == 0 || n < k || (n - k) % s != 0)
      throw std::invalid_argument("volterra: (n - k) must be a non-negative multiple of the stride, got n=" +
                                  std::to_string(n) + " k=" + std::to_string(k) + " s=" + std::to_string(s));
    if (w1_.size() != k || w2_.size() != k * k) throw std::invalid_argument("volterra: kernel sizes do not match k");
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (w2_[i * k + j] != 0.0) throw std::invalid_argument("volterra: second-order kernel must be upper triangular");
    m_ = (n - k) / s + 1;
    sym_.assign(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) sym_[i * k + j] = w2_[i * k + j] + w2_[j * k + i];
  }

  std::size_t n() const { return n_; }
  std::size_t k() const { return k_; }
  std::size_t stride() const { return s_; }
  std::size_t m() const { return m_; }
  double a() const { return a_; }
  double b() const { return b_; }
  const std::vector<double>& w1() const { return w1_; }
  const std::vector<double>& w2() const { return w2_; }

  void forward(std::span<const double> x, std::span<double> y) const {
    check(x.size(), n_, "forward: signal");
    check(y.size(), m_, "forward: output");
    for (std::size_t i = 0; i < m_; ++i) {
      const double* w = x.data() + i * s_;
      double quad = 0.0, lin = 0.0;
      for (std::size_t p = 0; p < k_; ++p) {
        double row = 0.0;
        for (std::size_t q = p; q < k_; ++q) row += w2_[p * k_ + q] * w[q];
        quad += w[p] * row;
        lin += w1_[p] * w[p];
      }
      y[i] = a_ * quad + lin + b_;
    }
  }

  std::vector<double> forward(std::span<const double> x) const {
    std::vector<double> y(m_);
    forward(x, y);
    return y;
  }

  /// g += J(x)' u; per window the local gradient is a (W2 + W2') w + w1.
  void vjp_accumulate(std::span<const double> x, std::span<const double> u, std::span<double> g) const {
    check(x.size(), n_, "vjp: signal");
    check(u.size(), m_, "vjp: cotangent");
    check(g.size(), n_, "vjp: output");
    for (std::size_t i = 0; i < m_; ++i) {
      if (u[i] == 0.0) continue;
      const double* w = x.data() + i * s_;
      double* gw = g.data() + i * s_;
      for (std::size_t p = 0; p < k_; ++p) {
        double r = 0.0;
        for (std::size_t q = 0; q < k_; ++q) r += sym_[p * k_ + q] * w[q];
        gw[p] += u[i] * (a_ * r + w1_[p]);
      }
    }
  }

  std::vector<double> vjp(std::span<const double> x, std::span<const double> u) const {
    std::vector<double> g(n_, 0.0);
    vjp_accumulate(x, u, g);
    return g;
  }

  /// J(x) delta.
  void jvp(std::span<const double> x, std::span<const double> delta, std::span<double> out) const {
    check(x.size(), n_, "jvp: signal");
    check(delta.size(), n_, "jvp: direction");
    check(out.size(), m_, "jvp: output");
    for (std::size_t i = 0; i < m_; ++i) {
      const double* w = x.data() + i * s_;
      const double* d = delta.data() + i * s_;
      double acc = 0.0;
      for (std::size_t p = 0; p < k_; ++p) {
        double r = 0.0;
        for (std::size_t q = 0; q < k_; ++q) r += sym_[p * k_ + q] * w[q];
        acc += (a_ * r + w1_[p]) * d[p];
      }
      out[i] = acc;
    }
  }

  /// out += sum_i u_i * a (W2 + W2') delta_i   (second-order term of d/dx <vjp(x, u), delta>).
  void hvp_accumulate(std::span<const double> u, std::span<const double> delta, std::span<double> out) const {
    for (std::size_t i = 0; i < m_; ++i) {
      if (u[i] == 0.0) continue;
      const double* d = delta.data() + i * s_;
      double* o = out.data() + i * s_;
      for (std::size_t p = 0; p < k_; ++p) {
        double r = 0.0;
        for (std::size_t q = 0; q < k_; ++q) r += sym_[p * k_ + q] * d[q];
        o[p] += u[i] * a_ * r;
      }
    }
  }

  /// Gradient of 0.5 * ||F(x) - y||^2.
  std::vector<double> data_grad(std::span<const double> x, std::span<const double> y) const {
    check(y.size(), m_, "data_grad: observation");
    auto r = forward(x);
    for (std::size_t i = 0; i < m_; ++i) r[i] -= y[i];
    return vjp(x, r);
  }

  std::string fingerprint() const {
    Fnv1a h;
    h.str("volterra-v1");
    h.u64(n_), h.u64(k_), h.u64(s_);
    h.f64(a_), h.f64(b_);
    for (double v : w1_) h.f64(v);
    for (double v : w2_) h.f64(v);
    return h.hex();
  }

 private:
  static void check(std::size_t got, std::size_t want, const char* what) {
    if (got != want)
      throw std::invalid_argument(std::string("volterra ") + what + " length " + std::to_string(got) +
                                  ", expected " + std::to_string(want));
  }

  std::size_t n_, k_, s_, m_ = 0;
  double a_, b_;
  std::vector<double> w1_, w2_, sym_;
};

struct OperatorGeometry {
  std::size_t n = 53;
  std::size_t k = 9;
  std::size_t s = 4;
};

/// Seeded kernels: w1 ~ N(0, 1/k), upper-triangular W2 ~ N(0, 1/k^2), b = 0.
/// The draws do not depend on `a`, so one seed gives the same kernels at every nonlinearity level.
inline VolterraOperator make_operator(double a, std::uint64_t seed, OperatorGeometry geo = {}) {
  if (!(a >= 0.0)) throw std::invalid_argument("make_operator: a must be non-negative");
  Rng rng(derive_seed(seed, 0x701e77a));
  const double k = static_cast<double>(geo.k);
  std::vector<double> w1(geo.k), w2(geo.k * geo.k, 0.0);
  for (auto& v : w1) v = rng.normal() / std::sqrt(k);
  for (std::size_t i = 0; i < geo.k; ++i)
    for (std::size_t j = i; j < geo.k; ++j) w2[i * geo.k + j] = rng.normal() / k;
  return VolterraOperator(geo.n, geo.k, geo.s, a, 0.0, std::move(w1), std::move(w2));
}

namespace ad {

/// Batched forward map: x [n] or [B x n] -> [m] or [B x m].
inline DiffTensor volterra_forward(const std::shared_ptr<const VolterraOperator>& op, const DiffTensor& x) {
  const Tensor& xv = x.value();
  const std::size_t n = op->n(), m = op->m();
  if (xv.rank() < 1 || xv.rank() > 2 || xv.dim(xv.rank() - 1) != n)
    throw std::invalid_argument("volterra_forward: expected trailing extent " + std::to_string(n) + ", got " +
                                shape_str(xv.shape()));
  const std::size_t batch = xv.rank() == 2 ? xv.dim(0) : 1;
  Tensor out(xv.rank() == 2 ? Shape{batch, m} : Shape{m});
  for (std::size_t b = 0; b < batch; ++b)
    op->forward({xv.data() + b * n, n}, {out.data() + b * m, m});
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [op, ix, batch, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ix);
    if (Tensor* gx = t.slot(ix))
      for (std::size_t b = 0; b < batch; ++b)
        op->vjp_accumulate({xv.data() + b * n, n}, {g.data() + b * m, m}, {gx->data() + b * n, n});
  });
}

/// Batched J(x)' u, differentiable in both x and u.
inline DiffTensor volterra_vjp(const std::shared_ptr<const VolterraOperator>& op, const DiffTensor& x,
                               const DiffTensor& u) {
  Tape& tape = detail::same_tape(x, u, "volterra_vjp");
  const Tensor& xv = x.value();
  const Tensor& uv = u.value();
  const std::size_t n = op->n(), m = op->m();
  const bool batched = xv.rank() == 2;
  const std::size_t batch = batched ? xv.dim(0) : 1;
  if (xv.rank() < 1 || xv.rank() > 2 || xv.dim(xv.rank() - 1) != n || uv.size() != batch * m ||
      uv.dim(uv.rank() - 1) != m)
    throw std::invalid_argument("volterra_vjp: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                shape_str(uv.shape()));
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < batch; ++b)
    op->vjp_accumulate({xv.data() + b * n, n}, {uv.data() + b * m, m}, {out.data() + b * n, n});
  const std::size_t ix = x.id(), iu = u.id();
  return tape.record(std::move(out), {ix, iu}, [op, ix, iu, batch, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ix);
    const Tensor& uv = t.value(iu);
    if (Tensor* gu = t.slot(iu)) {
      std::vector<double> tmp(m);
      for (std::size_t b = 0; b < batch; ++b) {
        op->jvp({xv.data() + b * n, n}, {g.data() + b * n, n}, tmp);
        for (std::size_t i = 0; i < m; ++i) (*gu)[b * m + i] += tmp[i];
      }
    }
    if (Tensor* gx = t.slot(ix))
      for (std::size_t b = 0; b < batch; ++b)
        op->hvp_accumulate({uv.data() + b * m, m}, {g.data() + b * n, n}, {gx->data() + b * n, n});
  });
}

/// Gradient of 0.5 ||F(x) - y||^2 as a differentiable program.
inline DiffTensor volterra_data_grad(const std::shared_ptr<const VolterraOperator>& op, const DiffTensor& x,
                                     const DiffTensor& y) {
  auto residual = sub(volterra_forward(op, x), y);
  return volterra_vjp(op, x, residual);
}

}  // namespace ad
}  // namespace dunets

#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every operation of one forward pass in topological order.
// Leaves are constants (no gradient), variables (gradient kept on the tape)
// or bound Parameters (gradient added into Parameter::grad by backward()).
// A tape is meant to be built, differentiated once and dropped.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dunets/tensor.hpp"

namespace dunets {

/// How a parameter is (re)initialized by init_params().
struct InitRule {
  enum class Kind { kZero, kConstant, kHeUniform };
  Kind kind = Kind::kZero;
  double value = 0.0;       // kConstant
  std::size_t fan_in = 1;   // kHeUniform
};

/// Trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  InitRule init;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    else grad.fill(0.0);
  }
};

namespace ad {

class Tape;

/// Handle to a value recorded on a tape.
class DiffTensor {
 public:
  DiffTensor() = default;
  DiffTensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  inline bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Accumulates the upstream gradient of node `self` into its inputs.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  DiffTensor constant(Tensor v) { return push(std::move(v), false, {}, nullptr, {}); }
  DiffTensor variable(Tensor v) { return push(std::move(v), true, {}, nullptr, {}); }

  /// Leaf bound to `p`; repeated calls on one tape reuse the same node.
  DiffTensor param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    auto h = push(p.value, true, {}, nullptr, &p);
    param_nodes_.emplace(&p, h.id());
    return h;
  }

  DiffTensor record(Tensor value, std::vector<std::size_t> inputs, Backward fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_.at(i).requires_grad;
    if (!needs) return push(std::move(value), false, {}, nullptr, nullptr);
    return push(std::move(value), true, std::move(inputs), std::move(fn), nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Upstream gradient of a node during backward().
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator of an input; nullptr when the input is not differentiable.
  Tensor* slot(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void backward(DiffTensor loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    if (!nodes_[loss.id()].requires_grad) return;
    slot(loss.id())->fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
        auto& pg = n.param->grad;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      }
    }
  }

  /// Gradient of the last backward() loss w.r.t. `x` (zeros if unreachable).
  Tensor grad(DiffTensor x) const {
    const auto& n = nodes_.at(x.id());
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Backward backward;
    Parameter* param = nullptr;
  };

  DiffTensor push(Tensor v, bool rg, std::vector<std::size_t> inputs, Backward fn, Parameter* p) {
    nodes_.push_back(Node{std::move(v), Tensor(), rg, std::move(inputs), std::move(fn), p});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& DiffTensor::value() const { return tape_->value(id_); }
inline bool DiffTensor::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(const DiffTensor& a, const DiffTensor& b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

/// b broadcasts against a when shapes match, b is a scalar, or b's shape is a suffix of a's.
inline void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b || shape_size(b) == 1) return;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return;
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class Fwd, class GradA, class GradB>
DiffTensor binary(const DiffTensor& a, const DiffTensor& b, const char* name, Fwd fwd, GradA ga, GradB gb) {
  Tape& tape = same_tape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_broadcast(av.shape(), bv.shape(), name);
  const std::size_t bs = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i % bs]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, bs, ga, gb](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    if (Tensor* gA = t.slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*gA)[i] += ga(g[i], x[i], y[i % bs]);
    if (Tensor* gB = t.slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gB)[i % bs] += gb(g[i], x[i], y[i % bs]);
  });
}

template <class Fwd, class Deriv>
DiffTensor unary_from_output(const DiffTensor& a, Fwd fwd, Deriv deriv_of_output) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, deriv_of_output](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& y = t.value(self);
    if (Tensor* gA = t.slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*gA)[i] += g[i] * deriv_of_output(y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

inline DiffTensor sub(const DiffTensor& a, const DiffTensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

inline DiffTensor mul(const DiffTensor& a, const DiffTensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline DiffTensor scale(const DiffTensor& a, double alpha) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (auto& v : out.values()) v *= alpha;
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, alpha](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (Tensor* gA = t.slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*gA)[i] += alpha * g[i];
  });
}

inline DiffTensor neg(const DiffTensor& a) { return scale(a, -1.0); }

inline DiffTensor sum(const DiffTensor& a) {
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.upstream(self)[0];
    if (Tensor* gA = t.slot(ia))
      for (auto& v : gA->values()) v += g;
  });
}

inline DiffTensor mean(const DiffTensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Nonlinearities

inline DiffTensor tanh(const DiffTensor& a) {
  return detail::unary_from_output(
      a, [](double x) { return std::tanh(x); }, [](double y) { return 1.0 - y * y; });
}

inline DiffTensor sigmoid(const DiffTensor& a) {
  return detail::unary_from_output(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double y) { return y * (1.0 - y); });
}

/// prelu(x) = x for x >= 0, slope[c] * x otherwise; channel axis is rank-2.
inline DiffTensor prelu(const DiffTensor& x, const DiffTensor& slope) {
  if (!slope.valid()) throw std::invalid_argument("prelu: missing slope");
  Tape& tape = detail::same_tape(x, slope, "prelu");
  const Tensor& xv = x.value();
  const Tensor& sv = slope.value();
  if (xv.rank() < 2 || xv.dim(xv.rank() - 2) != sv.size())
    throw std::invalid_argument("prelu: need one slope per channel, input " + shape_str(xv.shape()) + " slope " +
                                shape_str(sv.shape()));
  const std::size_t channels = sv.size();
  const std::size_t len = xv.dim(xv.rank() - 1);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double s = sv[(i / len) % channels];
    out[i] = xv[i] >= 0.0 ? xv[i] : s * xv[i];
  }
  const std::size_t ix = x.id(), is = slope.id();
  return tape.record(std::move(out), {ix, is}, [ix, is, channels, len](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ix);
    const Tensor& sv = t.value(is);
    Tensor* gx = t.slot(ix);
    Tensor* gs = t.slot(is);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t c = (i / len) % channels;
      if (xv[i] >= 0.0) {
        if (gx) (*gx)[i] += g[i];
      } else {
        if (gx) (*gx)[i] += sv[c] * g[i];
        if (gs) (*gs)[c] += xv[i] * g[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear maps

/// y = W x for x of shape [n] or a batch [B x n].
inline DiffTensor matvec(const DiffTensor& w, const DiffTensor& x) {
  Tape& tape = detail::same_tape(w, x, "matvec");
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.rank() > 2 || xv.dim(xv.rank() - 1) != wv.dim(1))
    throw std::invalid_argument("matvec: dimension mismatch " + shape_str(wv.shape()) + " * " +
                                shape_str(xv.shape()));
  const std::size_t m = wv.dim(0), n = wv.dim(1);
  const std::size_t batch = xv.rank() == 2 ? xv.dim(0) : 1;
  Tensor out(xv.rank() == 2 ? Shape{batch, m} : Shape{m});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = xv.data() + b * n;
    double* yb = out.data() + b * m;
    for (std::size_t i = 0; i < m; ++i) {
      const double* wi = wv.data() + i * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += wi[j] * xb[j];
      yb[i] = s;
    }
  }
  const std::size_t iw = w.id(), ix = x.id();
  return tape.record(std::move(out), {iw, ix}, [iw, ix, m, n, batch](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& wv = t.value(iw);
    const Tensor& xv = t.value(ix);
    if (Tensor* gw = t.slot(iw)) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i) {
          const double gi = g[b * m + i];
          double* row = gw->data() + i * n;
          const double* xb = xv.data() + b * n;
          for (std::size_t j = 0; j < n; ++j) row[j] += gi * xb[j];
        }
    }
    if (Tensor* gx = t.slot(ix)) {
      for (std::size_t b = 0; b < batch; ++b) {
        double* gxb = gx->data() + b * n;
        for (std::size_t i = 0; i < m; ++i) {
          const double gi = g[b * m + i];
          const double* wi = wv.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) gxb[j] += gi * wi[j];
        }
      }
    }
  });
}

/// Same-padded (zeros) 1-D cross-correlation with bias.
/// input [C_in x N] or [B x C_in x N], kernel [C_out x C_in x k] with k odd, bias [C_out].
inline DiffTensor conv1d(const DiffTensor& input, const DiffTensor& kernel, const DiffTensor& bias) {
  Tape& tape = detail::same_tape(input, kernel, "conv1d");
  detail::same_tape(input, bias, "conv1d");
  const Tensor& xv = input.value();
  const Tensor& kv = kernel.value();
  const Tensor& bv = bias.value();
  if (kv.rank() != 3) throw std::invalid_argument("conv1d: kernel must be [C_out x C_in x k], got " + shape_str(kv.shape()));
  const std::size_t co = kv.dim(0), ci = kv.dim(1), k = kv.dim(2);
  if (k % 2 == 0) throw std::invalid_argument("conv1d: kernel extent must be odd, got " + std::to_string(k));
  if (xv.rank() < 2 || xv.rank() > 3 || xv.dim(xv.rank() - 2) != ci)
    throw std::invalid_argument("conv1d: channel mismatch, input " + shape_str(xv.shape()) + " kernel " +
                                shape_str(kv.shape()));
  if (bv.size() != co)
    throw std::invalid_argument("conv1d: bias " + shape_str(bv.shape()) + " does not match " + std::to_string(co) +
                                " output channels");
  const std::size_t n = xv.dim(xv.rank() - 1);
  const std::size_t batch = xv.rank() == 3 ? xv.dim(0) : 1;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out(xv.rank() == 3 ? Shape{batch, co, n} : Shape{co, n});

  // Valid output range for tap j: n_out in [lo, hi) with 0 <= n_out + j - pad < n.
  auto range = [n, pad](std::size_t j, std::size_t& lo, std::size_t& hi) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j) - pad;
    lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
    hi = off > 0 ? (static_cast<std::size_t>(off) >= n ? 0 : n - static_cast<std::size_t>(off)) : n;
    if (lo > hi) lo = hi;
  };

  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < co; ++o) {
      double* yo = out.data() + (b * co + o) * n;
      for (std::size_t p = 0; p < n; ++p) yo[p] = bv[o];
      for (std::size_t c = 0; c < ci; ++c) {
        const double* xc = xv.data() + (b * ci + c) * n;
        const double* w = kv.data() + (o * ci + c) * k;
        for (std::size_t j = 0; j < k; ++j) {
          std::size_t lo, hi;
          range(j, lo, hi);
          const double wj = w[j];
          const double* src = xc + (static_cast<std::ptrdiff_t>(j) - pad);
          for (std::size_t p = lo; p < hi; ++p) yo[p] += wj * src[p];
        }
      }
    }

  const std::size_t ix = input.id(), ik = kernel.id(), ib = bias.id();
  return tape.record(std::move(out), {ix, ik, ib},
                     [ix, ik, ib, batch, co, ci, k, n, pad, range](Tape& t, std::size_t self) {
                       const Tensor& g = t.upstream(self);
                       const Tensor& xv = t.value(ix);
                       const Tensor& kv = t.value(ik);
                       Tensor* gx = t.slot(ix);
                       Tensor* gk = t.slot(ik);
                       Tensor* gb = t.slot(ib);
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t o = 0; o < co; ++o) {
                           const double* go = g.data() + (b * co + o) * n;
                           if (gb) {
                             double s = 0.0;
                             for (std::size_t p = 0; p < n; ++p) s += go[p];
                             (*gb)[o] += s;
                           }
                           for (std::size_t c = 0; c < ci; ++c) {
                             const std::size_t xoff = (b * ci + c) * n;
                             const std::size_t woff = (o * ci + c) * k;
                             for (std::size_t j = 0; j < k; ++j) {
                               std::size_t lo, hi;
                               range(j, lo, hi);
                               const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
                               if (gk) {
                                 const double* src = xv.data() + xoff + shift;
                                 double s = 0.0;
                                 for (std::size_t p = lo; p < hi; ++p) s += go[p] * src[p];
                                 (*gk)[woff + j] += s;
                               }
                               if (gx) {
                                 const double wj = kv[woff + j];
                                 double* dst = gx->data() + xoff + shift;
                                 for (std::size_t p = lo; p < hi; ++p) dst[p] += wj * go[p];
                               }
                             }
                           }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline DiffTensor reshape(const DiffTensor& a, Shape shape) {
  Tape& tape = *a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (Tensor* gA = t.slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*gA)[i] += g[i];
  });
}

/// Stacks parts along the channel axis (rank-2); leading and spatial extents must agree.
inline DiffTensor concat_channels(const std::vector<DiffTensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no parts");
  Tape& tape = *parts.front().tape();
  const Shape& s0 = parts.front().shape();
  if (s0.size() < 2) throw std::invalid_argument("concat_channels: parts need a channel axis, got " + shape_str(s0));
  const std::size_t r = s0.size();
  const std::size_t len = s0[r - 1];
  const std::size_t outer = shape_size(s0) / (s0[r - 2] * len);
  std::size_t total = 0;
  std::vector<std::size_t> ids, chans;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw std::invalid_argument("concat_channels: parts on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == r && s[r - 1] == len;
    for (std::size_t d = 0; ok && d + 2 < r; ++d) ok = s[d] == s0[d];
    if (!ok)
      throw std::invalid_argument("concat_channels: extent mismatch " + shape_str(s0) + " vs " + shape_str(s));
    ids.push_back(p.id());
    chans.push_back(s[r - 2]);
    total += s[r - 2];
  }
  Shape os = s0;
  os[r - 2] = total;
  Tensor out(os);
  for (std::size_t b = 0; b < outer; ++b) {
    std::size_t coff = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
      const double* src = parts[q].value().data() + b * chans[q] * len;
      std::copy(src, src + chans[q] * len, out.data() + (b * total + coff) * len);
      coff += chans[q];
    }
  }
  return tape.record(std::move(out), ids, [ids, chans, total, len, outer](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    std::size_t coff = 0;
    for (std::size_t q = 0; q < ids.size(); ++q) {
      if (Tensor* gp = t.slot(ids[q])) {
        for (std::size_t b = 0; b < outer; ++b) {
          const double* src = g.data() + (b * total + coff) * len;
          double* dst = gp->data() + b * chans[q] * len;
          for (std::size_t i = 0; i < chans[q] * len; ++i) dst[i] += src[i];
        }
      }
      coff += chans[q];
    }
  });
}

/// Channels [begin, begin+count) along axis rank-2.
inline DiffTensor slice_channels(const DiffTensor& a, std::size_t begin, std::size_t count) {
  Tape& tape = *a.tape();
  const Shape& s = a.shape();
  if (s.size() < 2 || count == 0 || begin + count > s[s.size() - 2])
    throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") out of bounds for " + shape_str(s));
  const std::size_t r = s.size();
  const std::size_t len = s[r - 1], chans = s[r - 2];
  const std::size_t outer = shape_size(s) / (chans * len);
  Shape os = s;
  os[r - 2] = count;
  Tensor out(os);
  for (std::size_t b = 0; b < outer; ++b) {
    const double* src = a.value().data() + (b * chans + begin) * len;
    std::copy(src, src + count * len, out.data() + b * count * len);
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, begin, count, chans, len, outer](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (Tensor* gA = t.slot(ia))
      for (std::size_t b = 0; b < outer; ++b) {
        const double* src = g.data() + b * count * len;
        double* dst = gA->data() + (b * chans + begin) * len;
        for (std::size_t i = 0; i < count * len; ++i) dst[i] += src[i];
      }
  });
}

}  // namespace ad
}  // namespace dunets

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dunets/autodiff.hpp"
#include "dunets/rng.hpp"
#include "dunets/tensor.hpp"

namespace dunets {

/// Owns the trainable parameters of one model. Addresses are stable.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter& add(std::string name, Shape shape, InitRule init = {}) {
    for (const auto& p : params_)
      if (p.name == name) throw std::invalid_argument("duplicate parameter name " + name);
    params_.push_back(Parameter{std::move(name), Tensor(shape), Tensor(shape), init});
    return params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  void restore(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].shape() != params_[i].value.shape())
        throw std::invalid_argument("restore: shape mismatch for " + params_[i].name);
      params_[i].value = values[i];
    }
  }

 private:
  std::deque<Parameter> params_;
};

inline InitRule he_uniform(std::size_t fan_in) { return {InitRule::Kind::kHeUniform, 0.0, fan_in}; }
inline InitRule constant_init(double v) { return {InitRule::Kind::kConstant, v, 1}; }
inline InitRule zero_init() { return {}; }

/// Applies every parameter's InitRule. He-uniform draws U(-b, b) with b = sqrt(6 / fan_in),
/// i.e. variance 2 / fan_in. Each parameter gets its own stream derived from (seed, index).
inline void init_params(ParamStore& store, std::uint64_t seed) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    switch (p.init.kind) {
      case InitRule::Kind::kZero: p.value.fill(0.0); break;
      case InitRule::Kind::kConstant: p.value.fill(p.init.value); break;
      case InitRule::Kind::kHeUniform: {
        Rng rng(derive_seed(seed, 0x1417, i));
        const double bound = std::sqrt(6.0 / static_cast<double>(p.init.fan_in));
        for (auto& v : p.value.values()) v = rng.uniform(-bound, bound);
        break;
      }
    }
    p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Convolution stacks

struct ConvLayer {
  Parameter* kernel = nullptr;  // [C_out x C_in x k]
  Parameter* bias = nullptr;    // [C_out]
  Parameter* slope = nullptr;   // [C_out], PReLU; null for a linear layer

  std::size_t in_channels() const { return kernel->value.dim(1); }
  std::size_t out_channels() const { return kernel->value.dim(0); }
};

inline ConvLayer make_conv_layer(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                                 std::size_t k, bool activation, bool zero_kernel = false) {
  ConvLayer l;
  l.kernel = &store.add(prefix + ".kernel", {out, in, k}, zero_kernel ? zero_init() : he_uniform(in * k));
  l.bias = &store.add(prefix + ".bias", {out});
  if (activation) l.slope = &store.add(prefix + ".prelu", {out}, constant_init(0.25));
  return l;
}

inline ad::DiffTensor conv_layer_forward(ad::Tape& tape, const ConvLayer& l, const ad::DiffTensor& x) {
  auto y = ad::conv1d(x, tape.param(*l.kernel), tape.param(*l.bias));
  return l.slope ? ad::prelu(y, tape.param(*l.slope)) : y;
}

/// conv -> PReLU -> ... -> conv (linear). The last layer is zero-initialized.
struct ConvStack {
  std::vector<ConvLayer> layers;

  std::size_t in_channels() const { return layers.front().in_channels(); }
  std::size_t out_channels() const { return layers.back().out_channels(); }
};

/// `hidden` lists the widths of the activated layers; e.g. {32, 32} gives three convolutions.
inline ConvStack make_conv_stack(ParamStore& store, const std::string& prefix, std::size_t in,
                                 const std::vector<std::size_t>& hidden, std::size_t out, std::size_t k = 3) {
  ConvStack s;
  std::size_t c = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    s.layers.push_back(make_conv_layer(store, prefix + ".conv" + std::to_string(i), c, hidden[i], k, true));
    c = hidden[i];
  }
  s.layers.push_back(
      make_conv_layer(store, prefix + ".conv" + std::to_string(hidden.size()), c, out, k, false, true));
  return s;
}

inline ad::DiffTensor conv_stack_forward(ad::Tape& tape, const ConvStack& stack, const ad::DiffTensor& x) {
  const auto& s = x.shape();
  if (s.size() < 2 || s[s.size() - 2] != stack.in_channels())
    throw std::invalid_argument("conv stack expects " + std::to_string(stack.in_channels()) +
                                " input channels, got " + shape_str(s));
  ad::DiffTensor h = x;
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    if (i > 0 && stack.layers[i].in_channels() != stack.layers[i - 1].out_channels())
      throw std::invalid_argument("conv stack: layer channel counts do not chain");
    h = conv_layer_forward(tape, stack.layers[i], h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// LSTM stack for recurrent momentum

struct LstmLayerParams {
  // candidate, forget, input and output gates: hidden-to-gate, input-to-gate, bias
  Parameter *w_hc, *w_gc, *b_c;
  Parameter *w_hf, *w_gf, *b_f;
  Parameter *w_hi, *w_gi, *b_i;
  Parameter *w_ho, *w_go, *b_o;

  std::size_t hidden() const { return w_hc->value.dim(0); }
  std::size_t input() const { return w_gc->value.dim(1); }
};

struct LstmStackParams {
  std::vector<LstmLayerParams> layers;
  Parameter* w_hg = nullptr;  // [d x n]
  Parameter* b_g = nullptr;   // [d]

  std::size_t num_layers() const { return layers.size(); }
  std::size_t hidden() const { return layers.front().hidden(); }
  std::size_t input() const { return layers.front().input(); }
};

inline LstmStackParams make_lstm_stack(ParamStore& store, const std::string& prefix, std::size_t input,
                                       std::size_t hidden, std::size_t num_layers) {
  if (num_layers == 0 || hidden == 0 || input == 0) throw std::invalid_argument("lstm stack: empty dimensions");
  LstmStackParams s;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t in = l == 0 ? input : hidden;
    const std::string p = prefix + ".layer" + std::to_string(l) + ".";
    auto gate = [&](const char* g, double bias) {
      Parameter* wh = &store.add(p + "W_h" + g, {hidden, hidden}, he_uniform(hidden));
      Parameter* wg = &store.add(p + "W_g" + g, {hidden, in}, he_uniform(in));
      Parameter* b = &store.add(p + "b_" + g, {hidden}, constant_init(bias));
      return std::array<Parameter*, 3>{wh, wg, b};
    };
    LstmLayerParams lp{};
    auto c = gate("c", 0.0);
    auto f = gate("f", 1.0);
    auto i = gate("i", 0.0);
    auto o = gate("o", 0.0);
    lp.w_hc = c[0], lp.w_gc = c[1], lp.b_c = c[2];
    lp.w_hf = f[0], lp.w_gf = f[1], lp.b_f = f[2];
    lp.w_hi = i[0], lp.w_gi = i[1], lp.b_i = i[2];
    lp.w_ho = o[0], lp.w_go = o[1], lp.b_o = o[2];
    s.layers.push_back(lp);
  }
  s.w_hg = &store.add(prefix + ".W_hg", {input, hidden}, he_uniform(hidden));
  s.b_g = &store.add(prefix + ".b_g", {input});
  return s;
}

/// Hidden and cell state per layer, each [n] or [B x n].
struct LstmState {
  std::vector<ad::DiffTensor> h, c;
};

inline LstmState zero_lstm_state(ad::Tape& tape, const LstmStackParams& params, std::size_t batch = 0) {
  LstmState s;
  for (const auto& l : params.layers) {
    const Shape shape = batch ? Shape{batch, l.hidden()} : Shape{l.hidden()};
    s.h.push_back(tape.constant(Tensor(shape)));
    s.c.push_back(tape.constant(Tensor(shape)));
  }
  return s;
}

struct CellOutput {
  ad::DiffTensor z, h, c;
};

inline CellOutput lstm_cell_step(ad::Tape& tape, const LstmLayerParams& p, const ad::DiffTensor& z_in,
                                 const ad::DiffTensor& h, const ad::DiffTensor& c) {
  const auto& zs = z_in.shape();
  if (zs.back() != p.input() || h.shape().back() != p.hidden() || c.shape() != h.shape())
    throw std::invalid_argument("lstm cell: dimension mismatch, input " + shape_str(zs) + " hidden " +
                                shape_str(h.shape()) + " cell " + shape_str(c.shape()));
  auto pre = [&](Parameter* wh, Parameter* wg, Parameter* b) {
    return ad::add(ad::add(ad::matvec(tape.param(*wh), h), ad::matvec(tape.param(*wg), z_in)), tape.param(*b));
  };
  auto cand = ad::tanh(pre(p.w_hc, p.w_gc, p.b_c));
  auto f = ad::sigmoid(pre(p.w_hf, p.w_gf, p.b_f));
  auto i = ad::sigmoid(pre(p.w_hi, p.w_gi, p.b_i));
  auto o = ad::sigmoid(pre(p.w_ho, p.w_go, p.b_o));
  auto c_next = ad::add(ad::mul(f, c), ad::mul(i, cand));
  auto h_next = ad::mul(o, ad::tanh(c_next));
  return {h_next, h_next, c_next};
}

/// One recurrent step: g [d] or [B x d] -> velocity in the same space; `state` is advanced.
inline ad::DiffTensor rma_forward(ad::Tape& tape, const LstmStackParams& params, const ad::DiffTensor& g,
                                  LstmState& state) {
  if (state.h.size() != params.num_layers() || state.c.size() != params.num_layers())
    throw std::invalid_argument("rma_forward: state has " + std::to_string(state.h.size()) + " layers, stack has " +
                                std::to_string(params.num_layers()));
  if (g.shape().back() != params.input())
    throw std::invalid_argument("rma_forward: gradient " + shape_str(g.shape()) + " does not match input size " +
                                std::to_string(params.input()));
  ad::DiffTensor z = g;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    auto out = lstm_cell_step(tape, params.layers[l], z, state.h[l], state.c[l]);
    state.h[l] = out.h;
    state.c[l] = out.c;
    z = out.z;
  }
  return ad::add(ad::matvec(tape.param(*params.w_hg), z), tape.param(*params.b_g));
}

}  // namespace dunets

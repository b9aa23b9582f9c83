#pragma once

// Unrolled reconstruction networks over the Volterra forward map.
//
//   lpgd / lpgdsw:  g = grad 0.5||F(x) - y||^2,   x <- x + Psi_t([x, d(g)])
//   lpd:            u <- u + Gamma_t([u, F(x^(2)), y]),  g = J(x^(1))' u^(1),
//                   x <- x + Lambda_t([x, d(g)])
//
// where d(g) is g itself, the explicit momentum velocity, or the LSTM velocity.
// Every block is residual with a zero-initialized last layer, so a freshly
// initialized model returns x0 = 0.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dunets/autodiff.hpp"
#include "dunets/checkpoint.hpp"
#include "dunets/io.hpp"
#include "dunets/layers.hpp"
#include "dunets/volterra.hpp"

namespace dunets {

enum class Variant { kLpgd, kLpgdsw, kLpd };
enum class Momentum { kNone, kMa, kRma };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::kLpgd: return "lpgd";
    case Variant::kLpgdsw: return "lpgdsw";
    case Variant::kLpd: return "lpd";
  }
  return "?";
}

inline const char* to_string(Momentum m) {
  switch (m) {
    case Momentum::kNone: return "none";
    case Momentum::kMa: return "ma";
    case Momentum::kRma: return "rma";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "lpgd") return Variant::kLpgd;
  if (s == "lpgdsw") return Variant::kLpgdsw;
  if (s == "lpd") return Variant::kLpd;
  throw std::invalid_argument("unknown model '" + s + "' (expected lpgd, lpgdsw or lpd)");
}

inline Momentum parse_momentum(const std::string& s) {
  if (s == "none") return Momentum::kNone;
  if (s == "ma") return Momentum::kMa;
  if (s == "rma") return Momentum::kRma;
  throw std::invalid_argument("unknown momentum '" + s + "' (expected none, ma or rma)");
}

/// Unroll counts that give the variants roughly equal parameter budgets.
inline std::size_t default_unrolls(Variant v, Momentum m) {
  switch (v) {
    case Variant::kLpgd: return m == Momentum::kRma ? 20 : 43;
    case Variant::kLpgdsw: return 20;
    case Variant::kLpd: return m == Momentum::kRma ? 10 : 22;
  }
  return 0;
}

struct ModelConfig {
  Variant variant = Variant::kLpd;
  Momentum momentum = Momentum::kNone;
  std::size_t unrolls = 22;
  std::size_t n_primal = 5;
  std::size_t n_dual = 5;
  std::size_t width = 32;
  std::size_t kernel = 3;
  std::size_t lstm_layers = 1;
  std::size_t lstm_hidden = 50;
  double gamma = 0.9;
  double eta = 1e-3;
  /// Multiplies the raw gradient before it is fed to the primal block (momentum none only).
  double direction_scale = 1.0;
  /// Concat + conv combiner in front of each primal block; on for RMA.
  bool fuse_direction = false;

  static ModelConfig defaults(Variant v, Momentum m) {
    ModelConfig c;
    c.variant = v;
    c.momentum = m;
    c.unrolls = default_unrolls(v, m);
    c.fuse_direction = m == Momentum::kRma;
    return c;
  }

  std::size_t primal_channels() const { return variant == Variant::kLpd ? n_primal : 1; }
};

/// Explicit momentum: v <- gamma v - eta g, starting from v = 0.
struct MomentumMA {
  Tensor v;
  double gamma = 0.9;
  double eta = 1e-3;

  const Tensor& step(const Tensor& g) {
    if (v.empty()) v = Tensor(g.shape());
    if (v.shape() != g.shape())
      throw std::invalid_argument("ma_step: velocity " + shape_str(v.shape()) + " vs gradient " +
                                  shape_str(g.shape()));
    for (std::size_t i = 0; i < g.size(); ++i) v[i] = gamma * v[i] - eta * g[i];
    return v;
  }
};

namespace ad {
inline DiffTensor ma_step(const DiffTensor& v, const DiffTensor& g, double gamma, double eta) {
  return sub(scale(v, gamma), scale(g, eta));
}
}  // namespace ad

/// Per-iteration snapshots; index 0 is the initialization.
struct ReconstructionTrace {
  std::vector<Tensor> x, u, v;
};

/// Channel-concatenates the primal state with the direction and maps it to `width` features.
inline ad::DiffTensor fuse_direction(ad::Tape& tape, const ConvLayer& fusion, const ad::DiffTensor& x_channels,
                                     const ad::DiffTensor& v) {
  return conv_layer_forward(tape, fusion, ad::concat_channels({x_channels, v}));
}

class UnrollModel {
 public:
  UnrollModel(ModelConfig cfg, std::shared_ptr<const VolterraOperator> op)
      : cfg_(cfg), op_(std::move(op)), store_(std::make_unique<ParamStore>()) {
    if (!op_) throw std::invalid_argument("UnrollModel: missing forward operator");
    if (cfg_.variant == Variant::kLpd && (cfg_.n_primal < 2 || cfg_.n_dual < 1))
      throw std::invalid_argument("UnrollModel: lpd needs n_primal >= 2 and n_dual >= 1");
    build();
  }

  UnrollModel(UnrollModel&&) = default;
  UnrollModel& operator=(UnrollModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  const std::shared_ptr<const VolterraOperator>& op() const { return op_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  std::size_t count_params() const { return store_->scalar_count(); }

  void init(std::uint64_t seed) { init_params(*store_, seed); }

  /// y [m] or [B x m] -> x_T [n] or [B x n].
  ad::DiffTensor reconstruct(ad::Tape& tape, const ad::DiffTensor& y, ReconstructionTrace* trace = nullptr) const {
    const auto& ys = y.shape();
    const std::size_t m = op_->m(), n = op_->n();
    if (ys.empty() || ys.size() > 2 || ys.back() != m)
      throw std::invalid_argument("reconstruct: observation " + shape_str(ys) + " does not match operator output " +
                                  std::to_string(m));
    const bool batched = ys.size() == 2;
    const std::size_t batch = batched ? ys[0] : 1;
    const ad::DiffTensor yb = ad::reshape(y, {batch, m});
    auto out = cfg_.variant == Variant::kLpd ? run_lpd(tape, yb, batch, trace) : run_lpgd(tape, yb, batch, trace);
    return batched ? out : ad::reshape(out, {n});
  }

  Tensor reconstruct(const Tensor& y, ReconstructionTrace* trace = nullptr) const {
    ad::Tape tape;
    return reconstruct(tape, tape.constant(y), trace).value();
  }

 private:
  struct Block {
    std::optional<ConvLayer> fusion;
    ConvStack primal;
    ConvStack dual;  // lpd only
  };

  void build() {
    const bool lpd = cfg_.variant == Variant::kLpd;
    const std::size_t pc = cfg_.primal_channels();
    const std::size_t blocks = cfg_.variant == Variant::kLpgdsw ? std::min<std::size_t>(cfg_.unrolls, 1)
                                                                 : cfg_.unrolls;
    for (std::size_t t = 0; t < blocks; ++t) {
      const std::string p = cfg_.variant == Variant::kLpgdsw ? "shared" : "iter" + std::to_string(t);
      Block b;
      if (lpd)
        b.dual = make_conv_stack(*store_, p + ".dual", cfg_.n_dual + 2, {cfg_.width}, cfg_.n_dual, cfg_.kernel);
      std::size_t primal_in = pc + 1;
      if (cfg_.fuse_direction) {
        b.fusion = make_conv_layer(*store_, p + ".fusion", pc + 1, cfg_.width, cfg_.kernel, true);
        primal_in = cfg_.width;
      }
      b.primal = make_conv_stack(*store_, p + ".primal", primal_in, {cfg_.width, cfg_.width}, pc, cfg_.kernel);
      blocks_.push_back(std::move(b));
    }
    if (cfg_.momentum == Momentum::kRma)
      lstm_ = make_lstm_stack(*store_, "rma", op_->n(), cfg_.lstm_hidden, cfg_.lstm_layers);
  }

  const Block& block(std::size_t t) const { return blocks_[cfg_.variant == Variant::kLpgdsw ? 0 : t]; }

  struct Direction {
    ad::DiffTensor velocity;
    std::optional<LstmState> lstm;
  };

  Direction start_direction(ad::Tape& tape, std::size_t batch) const {
    Direction d;
    if (cfg_.momentum == Momentum::kMa) d.velocity = tape.constant(Tensor({batch, op_->n()}));
    if (cfg_.momentum == Momentum::kRma) d.lstm = zero_lstm_state(tape, *lstm_, batch);
    return d;
  }

  ad::DiffTensor next_direction(ad::Tape& tape, Direction& d, const ad::DiffTensor& g) const {
    switch (cfg_.momentum) {
      case Momentum::kNone: return cfg_.direction_scale == 1.0 ? g : ad::scale(g, cfg_.direction_scale);
      case Momentum::kMa: d.velocity = ad::ma_step(d.velocity, g, cfg_.gamma, cfg_.eta); return d.velocity;
      case Momentum::kRma: return rma_forward(tape, *lstm_, g, *d.lstm);
    }
    return g;
  }

  ad::DiffTensor primal_update(ad::Tape& tape, const Block& b, const ad::DiffTensor& x,
                               const ad::DiffTensor& dir, std::size_t batch) const {
    const auto dir3 = ad::reshape(dir, {batch, 1, op_->n()});
    const auto features = b.fusion ? fuse_direction(tape, *b.fusion, x, dir3) : ad::concat_channels({x, dir3});
    return ad::add(x, conv_stack_forward(tape, b.primal, features));
  }

  static void snap(ReconstructionTrace* tr, const ad::DiffTensor& x, const ad::DiffTensor* u,
                   const ad::DiffTensor* v) {
    if (!tr) return;
    tr->x.push_back(x.value());
    if (u) tr->u.push_back(u->value());
    if (v && v->valid()) tr->v.push_back(v->value());
  }

  ad::DiffTensor run_lpgd(ad::Tape& tape, const ad::DiffTensor& y, std::size_t batch,
                          ReconstructionTrace* trace) const {
    const std::size_t n = op_->n();
    ad::DiffTensor x = tape.constant(Tensor({batch, 1, n}));
    Direction d = start_direction(tape, batch);
    snap(trace, x, nullptr, nullptr);
    for (std::size_t t = 0; t < cfg_.unrolls; ++t) {
      const auto g = ad::volterra_data_grad(op_, ad::reshape(x, {batch, n}), y);
      const auto dir = next_direction(tape, d, g);
      x = primal_update(tape, block(t), x, dir, batch);
      snap(trace, x, nullptr, &dir);
    }
    return ad::reshape(x, {batch, n});
  }

  ad::DiffTensor run_lpd(ad::Tape& tape, const ad::DiffTensor& y, std::size_t batch,
                         ReconstructionTrace* trace) const {
    const std::size_t n = op_->n(), m = op_->m();
    ad::DiffTensor x = tape.constant(Tensor({batch, cfg_.n_primal, n}));
    ad::DiffTensor u = tape.constant(Tensor({batch, cfg_.n_dual, m}));
    const auto y3 = ad::reshape(y, {batch, 1, m});
    Direction d = start_direction(tape, batch);
    snap(trace, x, &u, nullptr);
    for (std::size_t t = 0; t < cfg_.unrolls; ++t) {
      const Block& b = block(t);
      const auto x2 = ad::reshape(ad::slice_channels(x, 1, 1), {batch, n});
      const auto fx2 = ad::reshape(ad::volterra_forward(op_, x2), {batch, 1, m});
      u = ad::add(u, conv_stack_forward(tape, b.dual, ad::concat_channels({u, fx2, y3})));
      const auto x1 = ad::reshape(ad::slice_channels(x, 0, 1), {batch, n});
      const auto u1 = ad::reshape(ad::slice_channels(u, 0, 1), {batch, m});
      const auto g = ad::volterra_vjp(op_, x1, u1);
      const auto dir = next_direction(tape, d, g);
      x = primal_update(tape, b, x, dir, batch);
      snap(trace, x, &u, &dir);
    }
    return ad::reshape(ad::slice_channels(x, 0, 1), {batch, n});
  }

  ModelConfig cfg_;
  std::shared_ptr<const VolterraOperator> op_;
  std::unique_ptr<ParamStore> store_;
  std::vector<Block> blocks_;
  std::optional<LstmStackParams> lstm_;
};

// ---------------------------------------------------------------------------
// Model checkpoints: checkpoint.manifest (key=value) + checkpoint.params

inline io::Manifest model_manifest(const UnrollModel& model) {
  const auto& c = model.config();
  io::Manifest m;
  m["format"] = "dunets-model-1";
  m["variant"] = to_string(c.variant);
  m["momentum"] = to_string(c.momentum);
  m["T"] = std::to_string(c.unrolls);
  m["n_primal"] = std::to_string(c.n_primal);
  m["n_dual"] = std::to_string(c.n_dual);
  m["width"] = std::to_string(c.width);
  m["kernel"] = std::to_string(c.kernel);
  m["L"] = std::to_string(c.lstm_layers);
  m["n"] = std::to_string(c.lstm_hidden);
  m["gamma"] = io::fmt_double(c.gamma);
  m["eta"] = io::fmt_double(c.eta);
  m["direction_scale"] = io::fmt_double(c.direction_scale);
  m["fuse_direction"] = c.fuse_direction ? "1" : "0";
  m["operator_fingerprint"] = model.op()->fingerprint();
  m["param_count"] = std::to_string(model.count_params());
  return m;
}

inline ModelConfig config_from_manifest(const io::Manifest& m, const std::string& origin) {
  auto get = [&](const char* k) { return io::require(m, k, origin); };
  if (get("format") != "dunets-model-1") throw io::IoError(origin + ": unsupported model format");
  ModelConfig c;
  c.variant = parse_variant(get("variant"));
  c.momentum = parse_momentum(get("momentum"));
  c.unrolls = std::stoul(get("T"));
  c.n_primal = std::stoul(get("n_primal"));
  c.n_dual = std::stoul(get("n_dual"));
  c.width = std::stoul(get("width"));
  c.kernel = std::stoul(get("kernel"));
  c.lstm_layers = std::stoul(get("L"));
  c.lstm_hidden = std::stoul(get("n"));
  c.gamma = std::stod(get("gamma"));
  c.eta = std::stod(get("eta"));
  c.direction_scale = std::stod(get("direction_scale"));
  c.fuse_direction = get("fuse_direction") == "1";
  return c;
}

/// Raised when a checkpoint's operator does not match the data it is used with.
class FingerprintMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void save_model(const UnrollModel& model, const std::filesystem::path& dir,
                       const io::Manifest& extra = {}) {
  auto m = model_manifest(model);
  for (const auto& [k, v] : extra) m.emplace(k, v);
  io::write_file(dir / "checkpoint.manifest", io::format_manifest(m, "dunets model checkpoint"));
  save_params(model.params(), dir / "checkpoint.params");
}

inline io::Manifest read_model_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.manifest";
  return io::parse_manifest(io::read_file(path), path.string());
}

inline UnrollModel load_model(const std::filesystem::path& dir, std::shared_ptr<const VolterraOperator> op) {
  const auto m = read_model_manifest(dir);
  const auto origin = (dir / "checkpoint.manifest").string();
  const auto& fp = io::require(m, "operator_fingerprint", origin);
  if (fp != op->fingerprint())
    throw FingerprintMismatch("checkpoint operator " + fp + " does not match dataset operator " + op->fingerprint());
  UnrollModel model(config_from_manifest(m, origin), std::move(op));
  load_params(model.params(), dir / "checkpoint.params");
  return model;
}

}  // namespace dunets

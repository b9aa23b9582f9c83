// Acceptance gate: one PASS/FAIL line per criterion.
//   acceptance [--extended] [--only 1,2,...]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <string>

#include "cli_runner.hpp"
#include "dunets/experiment.hpp"
#include "oracles.hpp"

using namespace dunets;
using ad::DiffTensor;
using ad::Tape;
namespace fs = std::filesystem;

namespace {

// Tolerances
constexpr double kOpTol = 1e-5;
constexpr double kEndToEndTol = 1e-4;
constexpr double kFdStep = 1e-6;
constexpr int kOpCases = 100;
constexpr double kAdjointTol = 1e-10;
constexpr int kAdjointCases = 1000;
constexpr double kClosedFormTol = 1e-12;
constexpr std::size_t kMaxMomentumSteps = 50;
constexpr double kParityTol = 0.15;
constexpr double kGradientSuiteSeconds = 120.0;
constexpr double kTrendMinutes = 30.0;
constexpr double kFullProtocolImprovement = 0.04;

struct Outcome {
  enum Status { kPass, kFail, kSkip } status = kFail;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Outcome::kPass : Outcome::kFail, std::move(detail)}; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::shared_ptr<const VolterraOperator> shared_op(double a, std::uint64_t seed, OperatorGeometry g = {}) {
  return std::make_shared<const VolterraOperator>(make_operator(a, seed, g));
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  std::string worst_op;
  std::set<std::string> names;
  auto check = [&](const std::string& name, const oracle::Program& f, const std::vector<Tensor>& in) {
    names.insert(name);
    const double e = oracle::check_inputs(f, in, rng, kFdStep);
    if (!(e <= worst)) {
      worst = e;
      worst_op = name;
    }
  };
  auto op = shared_op(1.5, 3, {21, 5, 4});
  for (int c = 0; c < kOpCases; ++c) {
    const Tensor a = oracle::random_tensor(rng, {3, 4}), b = oracle::random_tensor(rng, {4});
    check("add", [](Tape&, const auto& in) { return ad::add(in[0], in[1]); }, {a, b});
    check("sub", [](Tape&, const auto& in) { return ad::sub(in[0], in[1]); }, {a, b});
    check("mul", [](Tape&, const auto& in) { return ad::mul(in[0], in[1]); }, {a, b});
    check("scale", [](Tape&, const auto& in) { return ad::scale(in[0], -0.7); }, {a});
    check("neg", [](Tape&, const auto& in) { return ad::neg(in[0]); }, {a});
    check("sum", [](Tape&, const auto& in) { return ad::sum(ad::mul(in[0], in[0])); }, {a});
    check("mean", [](Tape&, const auto& in) { return ad::mean(ad::mul(in[0], in[0])); }, {a});
    const Tensor z = oracle::random_tensor(rng, {3, 5}, -3, 3);
    check("tanh", [](Tape&, const auto& in) { return ad::tanh(in[0]); }, {z});
    check("sigmoid", [](Tape&, const auto& in) { return ad::sigmoid(in[0]); }, {z});
    check("prelu", [](Tape&, const auto& in) { return ad::prelu(in[0], in[1]); },
          {oracle::random_away_from_zero(rng, {2, 3, 5}), oracle::random_tensor(rng, {3}, 0.0, 0.5)});
    check("matvec", [](Tape&, const auto& in) { return ad::matvec(in[0], in[1]); },
          {oracle::random_tensor(rng, {4, 3}), oracle::random_tensor(rng, {2, 3})});
    check("conv1d", [](Tape&, const auto& in) { return ad::conv1d(in[0], in[1], in[2]); },
          {oracle::random_tensor(rng, {2, 3, 6}), oracle::random_tensor(rng, {4, 3, 3}), oracle::random_tensor(rng, {4})});
    const Tensor p = oracle::random_tensor(rng, {2, 2, 3}), q = oracle::random_tensor(rng, {2, 1, 3});
    check("concat", [](Tape&, const auto& in) { return ad::concat_channels({in[0], in[1], in[0]}); }, {p, q});
    check("slice", [](Tape&, const auto& in) { return ad::slice_channels(in[0], 1, 1); }, {p});
    check("reshape", [](Tape&, const auto& in) { return ad::reshape(in[0], {12}); }, {p});
    const Tensor x = oracle::random_tensor(rng, {2, 21}), u = oracle::random_tensor(rng, {2, 5});
    check("volterra_forward", [&](Tape&, const auto& in) { return ad::volterra_forward(op, in[0]); }, {x});
    check("volterra_vjp", [&](Tape&, const auto& in) { return ad::volterra_vjp(op, in[0], in[1]); }, {x, u});
    check("volterra_data_grad", [&](Tape&, const auto& in) { return ad::volterra_data_grad(op, in[0], in[1]); },
          {x, u});
    check("ma_step", [](Tape&, const auto& in) { return ad::ma_step(in[0], in[1], 0.9, 1e-3); },
          {oracle::random_tensor(rng, {2, 7}), oracle::random_tensor(rng, {2, 7})});
    check("mse_loss", [](Tape&, const auto& in) { return mse_loss(in[0], in[1]); },
          {oracle::random_tensor(rng, {3, 7}), oracle::random_tensor(rng, {3, 7})});

    // parameterized layers: every parameter and the input
    ParamStore store;
    auto conv = make_conv_layer(store, "c", 3, 4, 3, true);
    auto lstm = make_lstm_stack(store, "l", 6, 4, 2);
    oracle::randomize(store, rng, 0.8);
    conv.slope->value = oracle::random_tensor(rng, {4}, 0.0, 0.5);
    const Tensor cx = oracle::random_tensor(rng, {2, 3, 6}), g1 = oracle::random_tensor(rng, {2, 6}),
                 g2 = oracle::random_tensor(rng, {2, 6});
    auto layer_loss = [&](Tape& t) {
      auto y = conv_layer_forward(t, conv, t.constant(cx));
      auto state = zero_lstm_state(t, lstm, 2);
      auto v1 = rma_forward(t, lstm, t.constant(g1), state);
      auto v2 = rma_forward(t, lstm, t.constant(g2), state);
      return ad::add(ad::sum(ad::mul(y, y)), ad::sum(ad::mul(v2, ad::tanh(v1))));
    };
    names.insert("conv_layer+lstm");
    const double e = oracle::check_params(store, layer_loss, kFdStep);
    if (!(e <= worst)) {
      worst = e;
      worst_op = "conv_layer+lstm";
    }
  }

  // composed T=3 LPD-RMA miniature, every parameter
  auto cfg = ModelConfig::defaults(Variant::kLpd, Momentum::kRma);
  cfg.unrolls = 3;
  cfg.width = 5;
  cfg.n_primal = 3;
  cfg.n_dual = 2;
  cfg.lstm_hidden = 6;
  UnrollModel model(cfg, op);
  oracle::randomize(model.params(), rng, 0.4);
  const Tensor y = oracle::random_tensor(rng, {2, 5}, -0.5, 0.5), xs = oracle::random_tensor(rng, {2, 21}, -0.5, 0.5);
  const double e2e = oracle::check_params(
      model.params(),
      [&](Tape& t) {
        const auto r = ad::sub(model.reconstruct(t, t.constant(y)), t.constant(xs));
        return ad::sum(ad::mul(r, r));
      },
      kFdStep);
  const double secs = seconds_since(t0);
  return verdict(worst <= kOpTol && e2e <= kEndToEndTol && secs < kGradientSuiteSeconds,
                 std::to_string(names.size()) + " ops x " + std::to_string(kOpCases) + " cases, worst op error " +
                     fmt("%.2e", worst) + " (" + worst_op + "), T=3 LPD-RMA end-to-end " + fmt("%.2e", e2e) + " over " +
                     std::to_string(model.count_params()) + " parameters, " + fmt("%.1f", secs) + " s");
}

Outcome adjoints() {
  Rng rng(202);
  double conv_worst = 0.0, volterra_worst = 0.0;
  for (int c = 0; c < kAdjointCases; ++c) {
    const std::size_t b = 1 + rng.below(3), ci = 1 + rng.below(4), co = 1 + rng.below(4), n = 1 + rng.below(12);
    const std::size_t k = 2 * rng.below(3) + 1;
    const Tensor x = oracle::random_tensor(rng, {b, ci, n}), w = oracle::random_tensor(rng, {co, ci, k}),
                 u = oracle::random_tensor(rng, {b, co, n});
    Tape t;
    auto vx = t.variable(x);
    auto y = ad::conv1d(vx, t.constant(w), t.constant(Tensor({co})));
    t.backward(ad::sum(ad::mul(y, t.constant(u))));
    const double lhs = dot(y.value().values(), u.values()), rhs = dot(x.values(), t.grad(vx).values());
    conv_worst = std::max(conv_worst, std::abs(lhs - rhs) / std::max({1.0, std::abs(lhs), std::abs(rhs)}));
  }
  for (int c = 0; c < kAdjointCases; ++c) {
    const auto op = make_operator(rng.uniform(0, 4), c);
    std::vector<double> x(53), d(53), u(12);
    for (auto* v : {&x, &d}) for (auto& e : *v) e = rng.uniform(-1, 1);
    for (auto& e : u) e = rng.uniform(-1, 1);
    // F is quadratic: the unit-step central difference is the Jacobian action
    std::vector<double> xp(x), xm(x);
    for (std::size_t j = 0; j < 53; ++j) xp[j] += d[j], xm[j] -= d[j];
    const auto yp = op.forward(xp), ym = op.forward(xm);
    double lhs = 0.0;
    for (std::size_t i = 0; i < 12; ++i) lhs += 0.5 * (yp[i] - ym[i]) * u[i];
    const double rhs = dot(d, op.vjp(x, u));
    volterra_worst = std::max(volterra_worst, std::abs(lhs - rhs) / std::max({1.0, std::abs(lhs), std::abs(rhs)}));
  }
  return verdict(conv_worst <= kAdjointTol && volterra_worst <= kAdjointTol,
                 std::to_string(kAdjointCases) + " cases each, conv1d " + fmt("%.2e", conv_worst) + ", Volterra vjp " +
                     fmt("%.2e", volterra_worst));
}

Outcome momentum_closed_form() {
  Rng rng(303);
  double worst = 0.0;
  for (int c = 0; c < 200; ++c) {
    const double gamma = rng.uniform(0, 1), eta = rng.uniform(1e-4, 1);
    const std::size_t steps = 1 + rng.below(kMaxMomentumSteps);
    MomentumMA ma{Tensor(), gamma, eta};
    std::vector<Tensor> gs;
    for (std::size_t t = 0; t < steps; ++t) {
      gs.push_back(oracle::random_tensor(rng, {53}, -10, 10));
      ma.step(gs.back());
      for (std::size_t j = 0; j < 53; ++j) {
        double e = 0.0;
        for (std::size_t i = 0; i <= t; ++i) e -= std::pow(gamma, static_cast<double>(t - i)) * eta * gs[i][j];
        worst = std::max(worst, std::abs(ma.v[j] - e) / std::max(1.0, std::abs(e)));
      }
    }
  }
  return verdict(worst <= kClosedFormTol, "200 gradient sequences of up to " + std::to_string(kMaxMomentumSteps) +
                                              " steps, worst deviation " + fmt("%.2e", worst));
}

Outcome lstm_degenerate() {
  Rng rng(404);
  std::size_t checks = 0, mismatches = 0;
  for (std::size_t layers = 1; layers <= 3; ++layers)
    for (std::size_t hidden : {1, 10, 50}) {
      ParamStore store;
      auto s = make_lstm_stack(store, "rma", 53, hidden, layers);
      for (auto& p : store) p.value.fill(0.0);
      const Tensor beta = oracle::random_tensor(rng, {53}, -2, 2);
      s.b_g->value = beta;
      Tape t;
      LstmState state;
      for (std::size_t l = 0; l < layers; ++l) {
        state.h.push_back(t.constant(oracle::random_tensor(rng, {hidden}, -3, 3)));
        state.c.push_back(t.constant(oracle::random_tensor(rng, {hidden}, -3, 3)));
      }
      for (int k = 0; k < 20; ++k) {
        const auto v = rma_forward(t, s, t.constant(oracle::random_tensor(rng, {53}, -100, 100)), state);
        ++checks;
        if (!(v.value() == beta)) ++mismatches;
      }
    }
  return verdict(mismatches == 0, std::to_string(checks) + " calls over L in 1..3, n in {1,10,50}, " +
                                      std::to_string(mismatches) + " differ from b_g");
}

Outcome residual_identity() {
  auto op = shared_op(1.0, 0);
  Tensor y({4, 12});
  Rng rng(505);
  for (auto& v : y.values()) v = rng.uniform(-2, 2);
  std::size_t ok = 0, total = 0;
  for (auto v : {Variant::kLpgd, Variant::kLpgdsw, Variant::kLpd})
    for (auto m : {Momentum::kNone, Momentum::kMa, Momentum::kRma})
      for (std::uint64_t seed : {0, 1}) {
        UnrollModel model(ModelConfig::defaults(v, m), op);
        model.init(seed);
        ++total;
        if (model.reconstruct(y) == Tensor({4, 53})) ++ok;
      }
  return verdict(ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                                  " (variant x momentum x init seed) return x0 exactly");
}

struct TrendRow {
  double lpd = 0.0, rma = 0.0;
};

std::vector<TrendRow> trend_runs(double a, const std::vector<std::uint64_t>& seeds, std::size_t epochs,
                                 std::array<std::size_t, 3> counts, std::size_t t_lpd, std::size_t t_rma) {
  DatasetOptions opt;
  opt.counts = counts;
  const auto ds = gen_dataset(a, 0, opt);
  std::vector<TrendRow> out;
  for (auto seed : seeds) {
    TrendRow r;
    for (auto m : {Momentum::kNone, Momentum::kRma}) {
      auto cfg = ModelConfig::defaults(Variant::kLpd, m);
      cfg.unrolls = m == Momentum::kRma ? t_rma : t_lpd;
      UnrollModel model(cfg, ds.op);
      model.init(seed);
      TrainConfig tc;
      tc.epochs = epochs;
      tc.seed = seed;
      train(model, ds, tc);
      const double mse = evaluate(model, ds.split(SplitKind::kTest)).mean;
      (m == Momentum::kRma ? r.rma : r.lpd) = mse;
      std::fprintf(stderr, "  a=%g seed=%llu %s T=%zu test mse %.6g\n", a, static_cast<unsigned long long>(seed),
                   m == Momentum::kRma ? "lpd-rma" : "lpd", cfg.unrolls, mse);
    }
    out.push_back(r);
  }
  return out;
}

double sample_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double e : v) m += e;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double e : v) ss += (e - m) * (e - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

Outcome trend() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto hard = trend_runs(2.0, seeds, 5, {2000, 500, 500}, 11, 5);
  const auto easy = trend_runs(0.0, seeds, 5, {2000, 500, 500}, 11, 5);
  int wins = 0;
  double lpd2 = 0, rma2 = 0;
  std::string per_seed;
  for (const auto& r : hard) {
    wins += r.rma < r.lpd;
    lpd2 += r.lpd / 3.0;
    rma2 += r.rma / 3.0;
    per_seed += " " + fmt("%.4g", r.rma) + "/" + fmt("%.4g", r.lpd);
  }
  std::vector<double> lpd0, rma0;
  for (const auto& r : easy) lpd0.push_back(r.lpd), rma0.push_back(r.rma);
  const double m_lpd0 = (lpd0[0] + lpd0[1] + lpd0[2]) / 3.0, m_rma0 = (rma0[0] + rma0[1] + rma0[2]) / 3.0;
  const double s1 = sample_std(lpd0), s2 = sample_std(rma0);
  const double pooled = std::sqrt((s1 * s1 + s2 * s2) / 2.0);
  const double minutes = seconds_since(t0) / 60.0;
  const bool ok = wins >= 2 && rma2 < lpd2 && std::abs(m_rma0 - m_lpd0) < pooled && minutes < kTrendMinutes;
  return verdict(ok, "a=2 RMA/LPD per seed" + per_seed + ", RMA lower in " + std::to_string(wins) +
                         "/3, means " + fmt("%.5g", rma2) + " vs " + fmt("%.5g", lpd2) + "; a=0 |dMSE| " +
                         fmt("%.3g", std::abs(m_rma0 - m_lpd0)) + " vs pooled std " + fmt("%.3g", pooled) + "; " +
                         fmt("%.1f", minutes) + " min");
}

Outcome full_protocol(bool extended) {
  if (!extended) return {Outcome::kSkip, "full protocol (10000/1000/1000, 20 epochs) runs with --extended"};
  DatasetOptions opt;
  const auto ds = gen_dataset(1.0, 0, opt);
  double mse[3];
  const Momentum modes[3] = {Momentum::kNone, Momentum::kMa, Momentum::kRma};
  for (int i = 0; i < 3; ++i) {
    UnrollModel model(ModelConfig::defaults(Variant::kLpd, modes[i]), ds.op);
    model.init(0);
    TrainConfig tc;
    train(model, ds, tc, {nullptr, [&](std::size_t e, double v, double s) {
                            std::fprintf(stderr, "  lpd-%s epoch %zu val %.6g (%.0fs)\n", to_string(modes[i]), e + 1,
                                         v, s);
                          }});
    mse[i] = evaluate(model, ds.split(SplitKind::kTest)).mean;
  }
  const double gain = (mse[0] - mse[2]) / mse[0];
  const bool ok = mse[2] < mse[0] && mse[2] < mse[1] && gain >= kFullProtocolImprovement;
  return verdict(ok, "LPD " + fmt("%.3e", mse[0]) + " / LPD-MA " + fmt("%.3e", mse[1]) + " / LPD-RMA " +
                         fmt("%.3e", mse[2]) + " (reference 3.65E-02 / 3.71E-02 / 3.35E-02), RMA gain " +
                         fmt("%.1f", 100 * gain) + "% (reference 8.0%)");
}

Outcome parity() {
  auto op = shared_op(1.0, 0);
  auto count = [&](Variant v, Momentum m, std::size_t T) {
    auto c = ModelConfig::defaults(v, m);
    c.unrolls = T;
    return static_cast<double>(UnrollModel(c, op).count_params());
  };
  const double lpd = count(Variant::kLpd, Momentum::kNone, 22), lpd_rma = count(Variant::kLpd, Momentum::kRma, 10);
  const double lpgd = count(Variant::kLpgd, Momentum::kNone, 43),
               lpgd_rma = count(Variant::kLpgd, Momentum::kRma, 20);
  const double d1 = std::abs(lpd_rma - lpd) / lpd, d2 = std::abs(lpgd_rma - lpgd) / lpgd;
  return verdict(d1 <= kParityTol && d2 <= kParityTol,
                 "LPD-RMA T=10 " + fmt("%.0f", lpd_rma) + " vs LPD T=22 " + fmt("%.0f", lpd) + " (" +
                     fmt("%.1f", 100 * d1) + "%), LPGD-RMA T=20 " + fmt("%.0f", lpgd_rma) + " vs LPGD T=43 " +
                     fmt("%.0f", lpgd) + " (" + fmt("%.1f", 100 * d2) + "%)");
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dunets_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome determinism() {
  const auto dir = scratch("determinism");
  const std::string env = "DUNETS_RESULTS=" + cli::quote((dir / "results").string());
  const auto data = (dir / "data").string();
  auto r = cli::run("gen-data --a 1 --counts 64,32,32 --out " + cli::quote(data), env);
  if (r.code != 0) return verdict(false, "gen-data failed: " + r.err);
  std::size_t compared = 0;
  std::string bad;
  for (const char* model : {"--model lpd --momentum rma --T 3", "--model lpgd --momentum ma --T 4",
                            "--model lpgdsw --momentum none --T 4"}) {
    std::vector<fs::path> outs;
    for (int rep = 0; rep < 2; ++rep) {
      const auto out = dir / ("run" + std::to_string(compared) + "_" + std::to_string(rep));
      r = cli::run(std::string("train ") + model + " --epochs 2 --batch 16 --seed 3 --quiet --data " +
                       cli::quote(data) + " --out " + cli::quote(out.string()),
                   env);
      if (r.code != 0) return verdict(false, std::string("train failed for ") + model + ": " + r.err);
      outs.push_back(out);
    }
    for (const char* f : {"checkpoint.params", "checkpoint.manifest", "history.csv", "record.csv"})
      if (io::read_file(outs[0] / f) != io::read_file(outs[1] / f)) bad += std::string(" ") + model + ":" + f;
    ++compared;
  }
  fs::remove_all(dir);
  return verdict(bad.empty(), std::to_string(compared) +
                                  " models trained twice through the CLI; checkpoints, manifests and histories " +
                                  (bad.empty() ? std::string("bit-identical") : "differ:" + bad));
}

Outcome round_trips() {
  const auto dir = scratch("roundtrip");
  std::vector<std::string> bad;
  // datasets
  DatasetOptions opt;
  opt.counts = {40, 10, 10};
  opt.noise_sigma = 0.01;
  const auto ds = gen_dataset(2.0, 4, opt);
  save_dataset(ds, dir / "ds");
  const auto back = load_dataset(dir / "ds");
  for (int s = 0; s < 3; ++s)
    if (!(back.splits[s].x == ds.splits[s].x) || !(back.splits[s].y == ds.splits[s].y)) bad.push_back("dataset split");
  if (back.operator_fingerprint() != ds.operator_fingerprint()) bad.push_back("dataset operator");
  save_dataset(back, dir / "ds2");
  for (const auto& e : fs::directory_iterator(dir / "ds"))
    if (io::read_file(e.path()) != io::read_file(dir / "ds2" / e.path().filename()))
      bad.push_back("dataset file " + e.path().filename().string());
  // checkpoints
  Rng rng(606);
  std::size_t models = 0;
  for (auto v : {Variant::kLpgd, Variant::kLpgdsw, Variant::kLpd})
    for (auto m : {Momentum::kNone, Momentum::kMa, Momentum::kRma}) {
      auto cfg = ModelConfig::defaults(v, m);
      cfg.unrolls = 3;
      UnrollModel model(cfg, ds.op);
      oracle::randomize(model.params(), rng, 1.0);
      const auto p = dir / ("ckpt" + std::to_string(models++));
      save_model(model, p);
      const auto loaded = load_model(p, ds.op);
      if (loaded.params().snapshot() != model.params().snapshot()) bad.push_back(std::string("checkpoint ") + to_string(v));
      save_model(loaded, p / "again");
      if (io::read_file(p / "checkpoint.params") != io::read_file(p / "again" / "checkpoint.params") ||
          io::read_file(p / "checkpoint.manifest") != io::read_file(p / "again" / "checkpoint.manifest"))
        bad.push_back("checkpoint bytes");
      const auto& te = ds.split(SplitKind::kTest);
      if (!(loaded.reconstruct(te.y) == model.reconstruct(te.y))) bad.push_back("checkpoint reconstruction");
    }
  // sweep interrupted by --limit, then resumed
  const std::string env = "DUNETS_RESULTS=" + cli::quote((dir / "results").string());
  const std::string sweep = "sweep unroll --grid 1,2 --models lpgd-none,lpd-rma --seeds 0-1 --counts 24,8,8 "
                            "--epochs 1 --batch 8 --quiet --out ";
  const auto full = dir / "sweep_full", resumed = dir / "sweep_resumed";
  auto r = cli::run(sweep + cli::quote(full.string()), env);
  if (r.code != 0) bad.push_back("sweep failed: " + r.err);
  for (int limit : {3, 2}) {
    r = cli::run(sweep + cli::quote(resumed.string()) + " --limit " + std::to_string(limit), env);
    if (r.code != 0) bad.push_back("limited sweep failed: " + r.err);
  }
  r = cli::run(sweep + cli::quote(resumed.string()), env);
  if (r.code != 0) bad.push_back("resumed sweep failed: " + r.err);
  for (const char* f : {"results.csv", "summary.csv"})
    if (!fs::exists(full / f) || io::read_file(full / f) != io::read_file(resumed / f))
      bad.push_back(std::string("sweep ") + f);
  fs::remove_all(dir);
  std::string detail = "dataset, " + std::to_string(models) + " checkpoints, and an 8-run sweep resumed after two "
                       "--limit interruptions";
  if (bad.empty()) return verdict(true, detail + " all match");
  for (const auto& b : bad) detail += "; mismatch: " + b;
  return verdict(false, detail);
}

}  // namespace

int main(int argc, char** argv) {
  bool extended = false;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--extended") {
      extended = true;
    } else if (a == "--only" && i + 1 < argc) {
      for (const auto& s : exp::split_list(argv[++i])) only.insert(std::stoi(s));
    } else {
      std::fprintf(stderr, "usage: acceptance [--extended] [--only 1,2,...]\n");
      return 1;
    }
  }
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_suite},  {2, adjoints}, {3, momentum_closed_form}, {4, lstm_degenerate},
      {5, residual_identity}, {6, trend}, {7, [&] { return full_protocol(extended); }}, {8, parity},
      {9, determinism}, {10, round_trips}};
  int failures = 0;
  for (const auto& [n, run] : criteria) {
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {Outcome::kFail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Outcome::kPass ? "PASS" : o.status == Outcome::kSkip ? "SKIP" : "FAIL";
    failures += o.status == Outcome::kFail;
    std::printf("%s criterion %d: %s\n", tag, n, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

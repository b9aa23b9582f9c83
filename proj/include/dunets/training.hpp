#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dunets/autodiff.hpp"
#include "dunets/dataset.hpp"
#include "dunets/io.hpp"
#include "dunets/optim.hpp"
#include "dunets/rng.hpp"
#include "dunets/unrolling.hpp"

namespace dunets {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr0 = 1e-3;
  double clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 250;
};

struct StepRecord {
  long step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;    // before clipping
  double applied_norm = 0.0; // after clipping, as seen by the optimizer
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> val_loss;       // one per epoch
  std::vector<double> epoch_seconds;  // wall clock, not persisted
  std::size_t best_epoch = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(long step, double lr, double grad_norm)
      : std::runtime_error(message(step, lr, grad_norm)), step_(step), lr_(lr), grad_norm_(grad_norm) {}
  long step() const { return step_; }
  double lr() const { return lr_; }
  double grad_norm() const { return grad_norm_; }

 private:
  static std::string message(long step, double lr, double norm) {
    std::ostringstream os;
    os << "non-finite training loss at step " << step << " (lr " << lr << ", last gradient norm " << norm << ")";
    return os.str();
  }
  long step_;
  double lr_, grad_norm_;
};

/// Mean over samples of the per-element mean squared error.
inline ad::DiffTensor mse_loss(const ad::DiffTensor& xhat, const ad::DiffTensor& x) {
  if (xhat.shape() != x.shape())
    throw std::invalid_argument("mse_loss: shape mismatch " + shape_str(xhat.shape()) + " vs " +
                                shape_str(x.shape()));
  const auto r = ad::sub(xhat, x);
  return ad::mean(ad::mul(r, r));
}

struct MseStats {
  double mean = 0.0;
  double std = 0.0;  // over samples, n-1 denominator
  std::size_t count = 0;
};

inline std::vector<double> per_sample_mse(const UnrollModel& model, const Split& split, std::size_t batch = 250) {
  const std::size_t count = split.count();
  if (count == 0) throw std::invalid_argument("evaluate: empty split");
  const std::size_t n = split.x.dim(1), m = split.y.dim(1);
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t lo = 0; lo < count; lo += batch) {
    const std::size_t hi = std::min(count, lo + batch);
    Tensor y({hi - lo, m});
    std::copy(split.y.data() + lo * m, split.y.data() + hi * m, y.data());
    const Tensor xhat = model.reconstruct(y);
    for (std::size_t r = 0; r < hi - lo; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = xhat[r * n + j] - split.x[(lo + r) * n + j];
        s += d * d;
      }
      out.push_back(s / static_cast<double>(n));
    }
  }
  return out;
}

inline MseStats summarize(const std::vector<double>& v) {
  MseStats s;
  s.count = v.size();
  if (v.empty()) return s;
  for (double e : v) s.mean += e;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double e : v) ss += (e - s.mean) * (e - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline MseStats evaluate(const UnrollModel& model, const Split& split, std::size_t batch = 250) {
  return summarize(per_sample_mse(model, split, batch));
}

using StepCallback = std::function<void(const StepRecord&)>;
using EpochCallback = std::function<void(std::size_t epoch, double val_loss, double seconds)>;

struct TrainCallbacks {
  StepCallback on_step;
  EpochCallback on_epoch;
};

/// Minibatch Adam with cosine-annealed rate and global-norm clipping. After every epoch the
/// validation loss is recorded; the parameters of the best epoch are restored at the end.
/// Parameters are never projected or clamped. Initialization is left to the caller.
inline TrainHistory train(UnrollModel& model, const Split& train_split, const Split& val_split,
                          const TrainConfig& cfg, const TrainCallbacks& cb = {}) {
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw std::invalid_argument("train: epochs and batch size must be positive");
  if (!(cfg.lr0 > 0.0)) throw std::invalid_argument("train: initial rate must be positive");
  const std::size_t count = train_split.count();
  if (count == 0) throw std::invalid_argument("train: empty training split");
  const std::size_t n = train_split.x.dim(1), m = train_split.y.dim(1);
  if (n != model.op()->n() || m != model.op()->m())
    throw std::invalid_argument("train: data dimensions do not match the model operator");

  const std::size_t steps_per_epoch = (count + cfg.batch_size - 1) / cfg.batch_size;
  const CosineSchedule sched{cfg.lr0, static_cast<long>(cfg.epochs * steps_per_epoch)};
  AdamState adam;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.eps = cfg.eps;

  ParamStore& params = model.params();
  TrainHistory hist;
  std::vector<Tensor> best;
  double best_val = std::numeric_limits<double>::infinity();
  long step = 0;
  double last_norm = 0.0;
  std::vector<std::size_t> order(count);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, 0xe90c, epoch));
    for (std::size_t i = count - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

    for (std::size_t lo = 0; lo < count; lo += cfg.batch_size) {
      const std::size_t hi = std::min(count, lo + cfg.batch_size);
      const std::size_t b = hi - lo;
      Tensor xb({b, n}), yb({b, m});
      for (std::size_t r = 0; r < b; ++r) {
        std::copy_n(train_split.x.data() + order[lo + r] * n, n, xb.data() + r * n);
        std::copy_n(train_split.y.data() + order[lo + r] * m, m, yb.data() + r * m);
      }
      const double lr = sched.rate(step);
      params.zero_grad();
      double loss;
      {
        ad::Tape tape;
        const auto xhat = model.reconstruct(tape, tape.constant(std::move(yb)));
        const auto l = mse_loss(xhat, tape.constant(std::move(xb)));
        loss = l.value().item();
        if (!std::isfinite(loss)) throw TrainingDiverged(step, lr, last_norm);
        tape.backward(l);
      }
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.loss = loss;
      rec.grad_norm = clip_global_norm(params, cfg.clip);
      rec.applied_norm = global_grad_norm(params);
      if (!std::isfinite(rec.grad_norm)) throw TrainingDiverged(step, lr, rec.grad_norm);
      last_norm = rec.grad_norm;
      adam_step(params, adam, lr);
      hist.steps.push_back(rec);
      if (cb.on_step) cb.on_step(rec);
      ++step;
    }

    const double val = evaluate(model, val_split, cfg.eval_batch).mean;
    if (!std::isfinite(val)) throw TrainingDiverged(step, sched.rate(step), last_norm);
    hist.val_loss.push_back(val);
    if (val < best_val) {
      best_val = val;
      best = params.snapshot();
      hist.best_epoch = epoch;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epoch_seconds.push_back(secs);
    if (cb.on_epoch) cb.on_epoch(epoch, val, secs);
  }
  params.restore(best);
  return hist;
}

inline TrainHistory train(UnrollModel& model, const PairedDataset& data, const TrainConfig& cfg,
                          const TrainCallbacks& cb = {}) {
  if (data.operator_fingerprint() != model.op()->fingerprint())
    throw FingerprintMismatch("dataset operator " + data.operator_fingerprint() + " does not match the model's");
  return train(model, data.split(SplitKind::kTrain), data.split(SplitKind::kVal), cfg, cb);
}

/// step,epoch,lr,train_loss,val_loss; val_loss is filled on the last step of each epoch.
inline std::string history_csv(const TrainHistory& h) {
  std::string out = "step,epoch,lr,train_loss,val_loss\n";
  for (std::size_t i = 0; i < h.steps.size(); ++i) {
    const auto& s = h.steps[i];
    const bool last = i + 1 == h.steps.size() || h.steps[i + 1].epoch != s.epoch;
    out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + io::fmt_double(s.lr) + "," +
           io::fmt_double(s.loss) + "," + (last ? io::fmt_double(h.val_loss.at(s.epoch)) : std::string()) + "\n";
  }
  return out;
}

}  // namespace dunets

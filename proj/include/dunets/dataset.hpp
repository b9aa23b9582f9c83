#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dunets/io.hpp"
#include "dunets/rng.hpp"
#include "dunets/tensor.hpp"
#include "dunets/volterra.hpp"

namespace dunets {

/// Free-boundary 1-D total-variation prior draw: Laplace-increment random walk, then mean-centered.
inline std::vector<double> sample_tv_prior(std::size_t n, double scale, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("sample_tv_prior: need n >= 2");
  if (!(scale > 0.0)) throw std::invalid_argument("sample_tv_prior: scale must be positive");
  Rng rng(seed);
  std::vector<double> x(n, 0.0);
  for (std::size_t j = 1; j < n; ++j) x[j] = x[j - 1] + rng.laplace(scale);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  for (double& v : x) v -= mean;
  return x;
}

enum class SplitKind { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(SplitKind s) {
  switch (s) {
    case SplitKind::kTrain: return "train";
    case SplitKind::kVal: return "val";
    case SplitKind::kTest: return "test";
  }
  return "?";
}

inline SplitKind parse_split(const std::string& s) {
  if (s == "train") return SplitKind::kTrain;
  if (s == "val" || s == "validation") return SplitKind::kVal;
  if (s == "test") return SplitKind::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

/// Paired rows: x [count x n], y [count x m].
struct Split {
  std::string name;
  Tensor x, y;

  std::size_t count() const { return x.empty() ? 0 : x.dim(0); }

  /// Rows picked by index, in the given order.
  Split rows(const std::vector<std::size_t>& idx) const {
    if (idx.empty()) throw std::invalid_argument("split: empty row selection");
    const std::size_t n = x.dim(1), m = y.dim(1);
    Split out{name, Tensor({idx.size(), n}), Tensor({idx.size(), m})};
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(x.data() + idx[r] * n, n, out.x.data() + r * n);
      std::copy_n(y.data() + idx[r] * m, m, out.y.data() + r * m);
    }
    return out;
  }
};

struct DatasetOptions {
  OperatorGeometry geometry{};
  std::array<std::size_t, 3> counts{10000, 1000, 1000};
  double tv_scale = 0.1;
  double noise_sigma = 0.0;
};

struct PairedDataset {
  double a = 0.0;
  std::uint64_t seed = 0;
  DatasetOptions options;
  std::shared_ptr<const VolterraOperator> op;
  std::array<Split, 3> splits;

  const Split& split(SplitKind s) const { return splits[static_cast<int>(s)]; }
  const std::string& operator_fingerprint() const { return fingerprint_; }

  void set_operator(std::shared_ptr<const VolterraOperator> o) {
    op = std::move(o);
    fingerprint_ = op->fingerprint();
  }

 private:
  std::string fingerprint_;
};

/// Per-sample streams are seeded from (seed, split, index), so the result does not depend on
/// generation order. Observations are noiseless unless options.noise_sigma > 0.
inline PairedDataset gen_dataset(double a, std::uint64_t seed, const DatasetOptions& opt = {}) {
  for (auto c : opt.counts)
    if (c == 0) throw std::invalid_argument("gen_dataset: split counts must be positive");
  PairedDataset ds;
  ds.a = a;
  ds.seed = seed;
  ds.options = opt;
  ds.set_operator(std::make_shared<VolterraOperator>(make_operator(a, seed, opt.geometry)));
  const std::size_t n = ds.op->n(), m = ds.op->m();
  for (int s = 0; s < 3; ++s) {
    const std::size_t count = opt.counts[s];
    Split sp{split_name(static_cast<SplitKind>(s)), Tensor({count, n}), Tensor({count, m})};
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint64_t sample_seed = derive_seed(seed, 0x5a3b1e00 + static_cast<std::uint64_t>(s), i);
      auto x = sample_tv_prior(n, opt.tv_scale, sample_seed);
      std::copy(x.begin(), x.end(), sp.x.data() + i * n);
      ds.op->forward(x, {sp.y.data() + i * m, m});
      if (opt.noise_sigma > 0.0) {
        Rng noise(derive_seed(sample_seed, 0x7015e));
        for (std::size_t j = 0; j < m; ++j) sp.y[i * m + j] += opt.noise_sigma * noise.normal();
      }
    }
    ds.splits[s] = std::move(sp);
  }
  return ds;
}

/// Deterministic subset of round(fraction * count) rows (at least one), kept in original order.
inline Split subsample(const Split& split, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample: fraction must be in (0, 1]");
  const std::size_t count = split.count();
  std::size_t keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  keep = std::clamp<std::size_t>(keep, 1, count);
  if (keep == count) return split;
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x5ab5));
  for (std::size_t i = count - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return split.rows(idx);
}

namespace detail {
inline std::string dataset_manifest_name() { return "manifest.txt"; }
}  // namespace detail

/// Directory layout: manifest.txt plus <split>_x.bin / <split>_y.bin (raw little-endian doubles).
inline void save_dataset(const PairedDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::Manifest m;
  m["format"] = "dunets-dataset-1";
  m["n"] = std::to_string(ds.op->n());
  m["m"] = std::to_string(ds.op->m());
  m["k"] = std::to_string(ds.op->k());
  m["s"] = std::to_string(ds.op->stride());
  m["a"] = io::fmt_double(ds.a);
  m["b"] = io::fmt_double(ds.op->b());
  m["seed"] = std::to_string(ds.seed);
  m["operator_seed"] = std::to_string(ds.seed);
  m["tv_scale"] = io::fmt_double(ds.options.tv_scale);
  m["noise_sigma"] = io::fmt_double(ds.options.noise_sigma);
  m["count_train"] = std::to_string(ds.options.counts[0]);
  m["count_val"] = std::to_string(ds.options.counts[1]);
  m["count_test"] = std::to_string(ds.options.counts[2]);
  m["operator_fingerprint"] = ds.operator_fingerprint();
  io::write_file(dir / detail::dataset_manifest_name(), io::format_manifest(m, "dunets paired dataset"));
  for (const auto& sp : ds.splits) {
    io::write_doubles(dir / (sp.name + "_x.bin"), sp.x.values());
    io::write_doubles(dir / (sp.name + "_y.bin"), sp.y.values());
  }
}

inline PairedDataset load_dataset(const std::filesystem::path& dir) {
  const auto origin = (dir / detail::dataset_manifest_name()).string();
  const auto m = io::parse_manifest(io::read_file(dir / detail::dataset_manifest_name()), origin);
  auto get = [&](const char* k) { return io::require(m, k, origin); };
  if (get("format") != "dunets-dataset-1") throw io::IoError(origin + ": unsupported format " + get("format"));
  PairedDataset ds;
  ds.a = std::stod(get("a"));
  ds.seed = std::stoull(get("seed"));
  ds.options.geometry = {std::stoul(get("n")), std::stoul(get("k")), std::stoul(get("s"))};
  ds.options.tv_scale = std::stod(get("tv_scale"));
  ds.options.noise_sigma = std::stod(get("noise_sigma"));
  ds.options.counts = {std::stoul(get("count_train")), std::stoul(get("count_val")), std::stoul(get("count_test"))};
  ds.set_operator(std::make_shared<VolterraOperator>(
      make_operator(ds.a, std::stoull(get("operator_seed")), ds.options.geometry)));
  if (ds.operator_fingerprint() != get("operator_fingerprint"))
    throw io::IoError(origin + ": operator fingerprint mismatch (stored " + get("operator_fingerprint") +
                      ", rebuilt " + ds.operator_fingerprint() + ")");
  const std::size_t n = ds.op->n(), mm = ds.op->m();
  if (std::stoul(get("m")) != mm) throw io::IoError(origin + ": observation length does not match geometry");
  for (int s = 0; s < 3; ++s) {
    const std::string name = split_name(static_cast<SplitKind>(s));
    const std::size_t count = ds.options.counts[s];
    ds.splits[s] = Split{name, Tensor({count, n}, io::read_doubles(dir / (name + "_x.bin"), count * n)),
                         Tensor({count, mm}, io::read_doubles(dir / (name + "_y.bin"), count * mm))};
  }
  return ds;
}

}  // namespace dunets

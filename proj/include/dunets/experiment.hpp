#pragma once

// Run records, the results table, resumable sweeps and report rendering.
//
// A run directory holds checkpoint.manifest, checkpoint.params, history.csv and
// record.csv; record.csv is written last and marks the run complete. The results
// table carries no wall-clock data so that it is reproducible byte for byte; timing
// goes to runtime.csv next to it.

#include <sys/file.h>
#include <unistd.h>
#include <fcntl.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "dunets/dataset.hpp"
#include "dunets/io.hpp"
#include "dunets/training.hpp"
#include "dunets/unrolling.hpp"
#include "dunets/volterra.hpp"

namespace dunets::exp {

namespace fs = std::filesystem;

inline constexpr const char* kMseNorm = "per_element";

struct RunConfig {
  ModelConfig model = ModelConfig::defaults(Variant::kLpd, Momentum::kNone);
  TrainConfig train;
  double a = 1.0;
  std::uint64_t data_seed = 0;
  std::array<std::size_t, 3> counts{10000, 1000, 1000};
  double tv_scale = 0.1;
  double noise_sigma = 0.0;
  std::string operator_fingerprint;
  double data_fraction = 1.0;

  std::string model_name() const { return to_string(model.variant); }
  std::string series() const { return std::string(to_string(model.variant)) + "-" + to_string(model.momentum); }
};

inline RunConfig run_for_dataset(const PairedDataset& ds, Variant v, Momentum m) {
  RunConfig c;
  c.model = ModelConfig::defaults(v, m);
  c.a = ds.a;
  c.data_seed = ds.seed;
  c.counts = ds.options.counts;
  c.tv_scale = ds.options.tv_scale;
  c.noise_sigma = ds.options.noise_sigma;
  c.operator_fingerprint = ds.operator_fingerprint();
  return c;
}

/// Every field that can change a run's outcome, in a fixed order.
inline std::string canonical(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  using io::fmt_double;
  std::ostringstream os;
  os << "run-v1"
     << ";variant=" << to_string(m.variant) << ";momentum=" << to_string(m.momentum) << ";T=" << m.unrolls
     << ";n_primal=" << m.n_primal << ";n_dual=" << m.n_dual << ";width=" << m.width << ";kernel=" << m.kernel
     << ";L=" << m.lstm_layers << ";hidden=" << m.lstm_hidden << ";gamma=" << fmt_double(m.gamma)
     << ";eta=" << fmt_double(m.eta) << ";direction_scale=" << fmt_double(m.direction_scale)
     << ";fuse=" << m.fuse_direction << ";epochs=" << t.epochs << ";batch=" << t.batch_size
     << ";lr0=" << fmt_double(t.lr0) << ";clip=" << fmt_double(t.clip) << ";beta1=" << fmt_double(t.beta1)
     << ";beta2=" << fmt_double(t.beta2) << ";eps=" << fmt_double(t.eps) << ";seed=" << t.seed
     << ";a=" << fmt_double(c.a) << ";data_seed=" << c.data_seed << ";counts=" << c.counts[0] << ","
     << c.counts[1] << "," << c.counts[2] << ";tv_scale=" << fmt_double(c.tv_scale)
     << ";noise=" << fmt_double(c.noise_sigma) << ";operator=" << c.operator_fingerprint
     << ";data_fraction=" << fmt_double(c.data_fraction) << ";repeat=train-seed";
  return os.str();
}

inline std::string fingerprint(const RunConfig& c) {
  Fnv1a h;
  h.str(canonical(c));
  return h.hex();
}

/// Run configuration stored in the checkpoint manifest under "run." keys.
inline io::Manifest run_manifest(const RunConfig& c) {
  io::Manifest m;
  m["run.fingerprint"] = fingerprint(c);
  m["run.epochs"] = std::to_string(c.train.epochs);
  m["run.batch_size"] = std::to_string(c.train.batch_size);
  m["run.lr0"] = io::fmt_double(c.train.lr0);
  m["run.clip"] = io::fmt_double(c.train.clip);
  m["run.beta1"] = io::fmt_double(c.train.beta1);
  m["run.beta2"] = io::fmt_double(c.train.beta2);
  m["run.eps"] = io::fmt_double(c.train.eps);
  m["run.seed"] = std::to_string(c.train.seed);
  m["run.a"] = io::fmt_double(c.a);
  m["run.data_seed"] = std::to_string(c.data_seed);
  m["run.counts"] = std::to_string(c.counts[0]) + "," + std::to_string(c.counts[1]) + "," + std::to_string(c.counts[2]);
  m["run.tv_scale"] = io::fmt_double(c.tv_scale);
  m["run.noise_sigma"] = io::fmt_double(c.noise_sigma);
  m["run.data_fraction"] = io::fmt_double(c.data_fraction);
  return m;
}

inline std::array<std::size_t, 3> parse_counts(const std::string& s) {
  std::array<std::size_t, 3> out{};
  std::istringstream in(s);
  std::string tok;
  std::size_t i = 0;
  while (std::getline(in, tok, ',')) {
    if (i == 3 || tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("counts must be three positive integers train,val,test: '" + s + "'");
    out[i++] = std::stoul(tok);
    if (out[i - 1] == 0) throw std::invalid_argument("counts must be positive: '" + s + "'");
  }
  if (i != 3) throw std::invalid_argument("counts must be three positive integers train,val,test: '" + s + "'");
  return out;
}

inline RunConfig run_from_manifest(const io::Manifest& m, const std::string& origin) {
  RunConfig c;
  c.model = config_from_manifest(m, origin);
  auto get = [&](const char* k) { return io::require(m, k, origin); };
  c.train.epochs = std::stoul(get("run.epochs"));
  c.train.batch_size = std::stoul(get("run.batch_size"));
  c.train.lr0 = std::stod(get("run.lr0"));
  c.train.clip = std::stod(get("run.clip"));
  c.train.beta1 = std::stod(get("run.beta1"));
  c.train.beta2 = std::stod(get("run.beta2"));
  c.train.eps = std::stod(get("run.eps"));
  c.train.seed = std::stoull(get("run.seed"));
  c.a = std::stod(get("run.a"));
  c.data_seed = std::stoull(get("run.data_seed"));
  c.counts = parse_counts(get("run.counts"));
  c.tv_scale = std::stod(get("run.tv_scale"));
  c.noise_sigma = std::stod(get("run.noise_sigma"));
  c.data_fraction = std::stod(get("run.data_fraction"));
  c.operator_fingerprint = get("operator_fingerprint");
  if (fingerprint(c) != get("run.fingerprint"))
    throw io::IoError(origin + ": run fingerprint does not match the stored configuration");
  return c;
}

// ---------------------------------------------------------------------------
// CSV tables (no quoting; cells never contain commas)

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::invalid_argument("table has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
  bool has(const std::string& name) const { return std::find(header.begin(), header.end(), name) != header.end(); }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Table parse_csv(const std::string& text, const std::string& origin) {
  Table t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (first) {
      t.header = std::move(cells);
      first = false;
      continue;
    }
    if (cells.size() != t.header.size())
      throw io::IoError(origin + ": row has " + std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (first) throw io::IoError(origin + ": missing header");
  return t;
}

inline std::string format_csv(const Table& t) {
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s + "\n";
  };
  std::string out = join(t.header);
  for (const auto& r : t.rows) out += join(r);
  return out;
}

inline Table read_csv(const fs::path& path) { return parse_csv(io::read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Records

struct ExperimentRecord {
  RunConfig config;
  std::string fingerprint;
  std::string split = "test";
  MseStats stats;
  std::string history_path;
  std::string started, finished;
  double seconds = 0.0;
};

inline const std::vector<std::string>& results_header() {
  static const std::vector<std::string> h{"fingerprint", "model", "momentum", "T",          "L",
                                          "hidden",      "a",     "data_fraction", "seed", "epochs",
                                          "batch_size",  "dataset", "split",      "mse_norm", "mse_mean",
                                          "mse_std"};
  return h;
}

inline const std::vector<std::string>& runtime_header() {
  static const std::vector<std::string> h{"fingerprint", "split", "history", "started", "finished", "seconds"};
  return h;
}

inline std::vector<std::string> result_row(const ExperimentRecord& r) {
  const auto& c = r.config;
  return {r.fingerprint,
          to_string(c.model.variant),
          to_string(c.model.momentum),
          std::to_string(c.model.unrolls),
          std::to_string(c.model.lstm_layers),
          std::to_string(c.model.lstm_hidden),
          io::fmt_double(c.a),
          io::fmt_double(c.data_fraction),
          std::to_string(c.train.seed),
          std::to_string(c.train.epochs),
          std::to_string(c.train.batch_size),
          c.operator_fingerprint,
          r.split,
          kMseNorm,
          io::fmt_double(r.stats.mean),
          io::fmt_double(r.stats.std)};
}

inline std::vector<std::string> runtime_row(const ExperimentRecord& r) {
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.3f", r.seconds);
  return {r.fingerprint, r.split, r.history_path, r.started, r.finished, secs};
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Exclusive advisory lock on a hidden sibling of path for the lifetime of the object.
class FileLock {
 public:
  explicit FileLock(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto lock = (path.parent_path() / ("." + path.filename().string() + ".lock")).string();
    fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw io::IoError("cannot open lock file " + lock);
    ::flock(fd_, LOCK_EX);
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

inline std::mutex& table_mutex() {
  static std::mutex m;
  return m;
}

/// Inserts rows into the CSV at path, replacing rows with the same (fingerprint, split) and keeping
/// the file sorted by that key.
inline void upsert_rows(const fs::path& path, const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& rows, bool replace = true) {
  std::lock_guard<std::mutex> guard(table_mutex());
  FileLock lock(path);
  Table t;
  if (fs::exists(path)) {
    t = read_csv(path);
    if (t.header != header) throw io::IoError(path.string() + ": unexpected header");
  } else {
    t.header = header;
  }
  const std::size_t fp = t.col("fingerprint"), sp = t.col("split");
  std::map<std::pair<std::string, std::string>, std::vector<std::string>> keyed;
  for (auto& r : t.rows) keyed[{r[fp], r[sp]}] = std::move(r);
  for (const auto& r : rows)
    if (replace || !keyed.count({r[fp], r[sp]})) keyed[{r[fp], r[sp]}] = r;
  t.rows.clear();
  for (auto& [k, r] : keyed) t.rows.push_back(std::move(r));
  const auto tmp = path.string() + ".tmp";
  io::write_file(tmp, format_csv(t));
  fs::rename(tmp, path);
}

/// Upserts the result row; the runtime row is only replaced when replace_runtime is set, so a
/// re-evaluation keeps the timing of the original training.
inline void append_record(const fs::path& results_csv, const ExperimentRecord& r, bool replace_runtime = true) {
  upsert_rows(results_csv, results_header(), {result_row(r)});
  upsert_rows(results_csv.parent_path() / "runtime.csv", runtime_header(), {runtime_row(r)}, replace_runtime);
}

inline ExperimentRecord read_record(const fs::path& run_dir) {
  const auto m = read_model_manifest(run_dir);
  ExperimentRecord r;
  r.config = run_from_manifest(m, (run_dir / "checkpoint.manifest").string());
  r.fingerprint = fingerprint(r.config);
  const Table t = read_csv(run_dir / "record.csv");
  if (t.rows.size() != 1 || t.header != results_header())
    throw io::IoError((run_dir / "record.csv").string() + ": malformed record");
  const auto& row = t.rows[0];
  if (row[t.col("fingerprint")] != r.fingerprint)
    throw io::IoError((run_dir / "record.csv").string() + ": fingerprint does not match checkpoint");
  r.split = row[t.col("split")];
  r.stats.mean = std::stod(row[t.col("mse_mean")]);
  r.stats.std = std::stod(row[t.col("mse_std")]);
  r.history_path = (run_dir / "history.csv").string();
  if (fs::exists(run_dir / "runtime.csv")) {
    const Table rt = read_csv(run_dir / "runtime.csv");
    if (!rt.rows.empty() && rt.header == runtime_header()) {
      r.started = rt.rows[0][3];
      r.finished = rt.rows[0][4];
      r.seconds = std::stod(rt.rows[0][5]);
    }
  }
  return r;
}

inline bool run_complete(const fs::path& run_dir) { return fs::exists(run_dir / "record.csv"); }

// ---------------------------------------------------------------------------
// Single run

using LogFn = std::function<void(const std::string&)>;

/// Trains, evaluates on the test split, and writes the run directory. The caller checks for
/// collisions; files already present are overwritten.
inline ExperimentRecord run_experiment(const RunConfig& cfg, const PairedDataset& ds, const fs::path& out_dir,
                                       const LogFn& log = {}) {
  if (ds.operator_fingerprint() != cfg.operator_fingerprint)
    throw FingerprintMismatch("run expects operator " + cfg.operator_fingerprint + ", dataset has " +
                              ds.operator_fingerprint());
  ExperimentRecord rec;
  rec.config = cfg;
  rec.fingerprint = fingerprint(cfg);
  rec.started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();

  UnrollModel model(cfg.model, ds.op);
  model.init(cfg.train.seed);
  const Split& full = ds.split(SplitKind::kTrain);
  const Split train_split = cfg.data_fraction < 1.0 ? subsample(full, cfg.data_fraction, cfg.data_seed) : full;
  TrainCallbacks cb;
  if (log)
    cb.on_epoch = [&](std::size_t epoch, double val, double secs) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu val %.6g (%.1fs)", rec.fingerprint.c_str(), epoch + 1,
                    cfg.train.epochs, val, secs);
      log(buf);
    };
  const TrainHistory hist = train(model, train_split, ds.split(SplitKind::kVal), cfg.train, cb);
  rec.stats = evaluate(model, ds.split(SplitKind::kTest), cfg.train.eval_batch);

  fs::create_directories(out_dir);
  auto extra = run_manifest(cfg);
  extra["best_epoch"] = std::to_string(hist.best_epoch);
  save_model(model, out_dir, extra);
  io::write_file(out_dir / "history.csv", history_csv(hist));
  rec.history_path = (out_dir / "history.csv").string();
  rec.finished = utc_now();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_file(out_dir / "runtime.csv", format_csv({runtime_header(), {runtime_row(rec)}}));
  io::write_file(out_dir / "record.csv", format_csv({results_header(), {result_row(rec)}}));
  return rec;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepKind { kA, kDatasize, kRmaStructure, kUnroll };

inline SweepKind parse_sweep_kind(const std::string& s) {
  if (s == "a") return SweepKind::kA;
  if (s == "datasize") return SweepKind::kDatasize;
  if (s == "rma-structure") return SweepKind::kRmaStructure;
  if (s == "unroll") return SweepKind::kUnroll;
  throw std::invalid_argument("unknown sweep kind '" + s + "' (expected a, datasize, rma-structure or unroll)");
}

inline const char* to_string(SweepKind k) {
  switch (k) {
    case SweepKind::kA: return "a";
    case SweepKind::kDatasize: return "datasize";
    case SweepKind::kRmaStructure: return "rma-structure";
    case SweepKind::kUnroll: return "unroll";
  }
  return "?";
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, sep)) {
    const auto b = tok.find_first_not_of(" \t"), e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) throw std::invalid_argument("empty entry in list '" + s + "'");
    out.push_back(tok.substr(b, e - b + 1));
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

inline double parse_number(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

inline std::size_t parse_positive(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || std::stoul(s) == 0)
    throw std::invalid_argument("expected a positive integer, got '" + s + "'");
  return std::stoul(s);
}

/// "0-9" and "0,1,2" forms, combinable: "0-2,7".
inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& tok : split_list(s)) {
    const auto dash = tok.find('-');
    auto num = [&](const std::string& t) {
      if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
        throw std::invalid_argument("bad seed '" + tok + "'");
      return std::stoull(t);
    };
    if (dash == std::string::npos) {
      out.push_back(num(tok));
    } else {
      const auto lo = num(tok.substr(0, dash)), hi = num(tok.substr(dash + 1));
      if (hi < lo) throw std::invalid_argument("bad seed range '" + tok + "'");
      for (auto v = lo; v <= hi; ++v) out.push_back(v);
    }
  }
  return out;
}

/// "lpd-rma", "lpgdsw-ma", or a bare variant meaning no momentum.
inline std::pair<Variant, Momentum> parse_model(const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos) return {parse_variant(s), Momentum::kNone};
  return {parse_variant(s.substr(0, dash)), parse_momentum(s.substr(dash + 1))};
}

/// "10%" or "0.1".
inline double parse_fraction(const std::string& s) {
  const double v = !s.empty() && s.back() == '%' ? parse_number(s.substr(0, s.size() - 1)) / 100.0 : parse_number(s);
  if (!(v > 0.0 && v <= 1.0)) throw std::invalid_argument("data fraction must be in (0, 1]: '" + s + "'");
  return v;
}

inline std::string default_grid(SweepKind k) {
  switch (k) {
    case SweepKind::kA: return "0,1,2,4";
    case SweepKind::kDatasize: return "10%,25%,50%,100%";
    case SweepKind::kRmaStructure: return "1,2,3x30,50,70";
    case SweepKind::kUnroll: return "5,10,15,20,25";
  }
  return "";
}

inline std::string default_models(SweepKind k) {
  switch (k) {
    case SweepKind::kA: return "lpgd-none,lpgd-ma,lpgd-rma,lpgdsw-none,lpgdsw-ma,lpgdsw-rma,lpd-none,lpd-ma,lpd-rma";
    case SweepKind::kDatasize: return "lpd-none,lpd-ma,lpd-rma";
    case SweepKind::kRmaStructure: return "lpd-rma";
    case SweepKind::kUnroll: return "lpd-none,lpd-ma,lpd-rma";
  }
  return "";
}

struct SweepSpec {
  SweepKind kind = SweepKind::kA;
  std::string grid;    // empty: default for the kind
  std::string models;  // empty: default for the kind
  std::string seeds = "0-9";
  double a = 1.0;      // fixed a for kinds other than "a"
  std::size_t unrolls = 0;  // 0: per-model default
  std::array<std::size_t, 3> counts{10000, 1000, 1000};
  std::uint64_t data_seed = 0;
  TrainConfig train;
  std::size_t jobs = 1;
  std::size_t limit = 0;  // 0: no limit; otherwise stop after this many new runs
  fs::path out;
};

inline std::vector<RunConfig> expand_sweep(const SweepSpec& spec) {
  const std::string grid = spec.grid.empty() ? default_grid(spec.kind) : spec.grid;
  std::vector<std::pair<Variant, Momentum>> models;
  for (const auto& m : split_list(spec.models.empty() ? default_models(spec.kind) : spec.models))
    models.push_back(parse_model(m));
  const auto seeds = parse_seeds(spec.seeds);

  auto base = [&](Variant v, Momentum m) {
    RunConfig c;
    c.model = ModelConfig::defaults(v, m);
    if (spec.unrolls) c.model.unrolls = spec.unrolls;
    c.train = spec.train;
    c.a = spec.a;
    c.data_seed = spec.data_seed;
    c.counts = spec.counts;
    return c;
  };
  std::vector<std::function<void(RunConfig&)>> cells;
  switch (spec.kind) {
    case SweepKind::kA:
      for (const auto& g : split_list(grid)) {
        const double a = parse_number(g);
        cells.push_back([a](RunConfig& c) { c.a = a; });
      }
      break;
    case SweepKind::kDatasize:
      for (const auto& g : split_list(grid)) {
        const double f = parse_fraction(g);
        cells.push_back([f](RunConfig& c) { c.data_fraction = f; });
      }
      break;
    case SweepKind::kUnroll:
      for (const auto& g : split_list(grid)) {
        const std::size_t t = parse_positive(g);
        cells.push_back([t](RunConfig& c) { c.model.unrolls = t; });
      }
      break;
    case SweepKind::kRmaStructure: {
      const auto x = grid.find('x');
      if (x == std::string::npos) throw std::invalid_argument("rma-structure grid must look like 1,2,3x30,50,70");
      for (const auto& ls : split_list(grid.substr(0, x)))
        for (const auto& ns : split_list(grid.substr(x + 1))) {
          const std::size_t l = parse_positive(ls), n = parse_positive(ns);
          cells.push_back([l, n](RunConfig& c) {
            c.model.lstm_layers = l;
            c.model.lstm_hidden = n;
          });
        }
      break;
    }
  }
  std::vector<RunConfig> out;
  for (const auto& cell : cells)
    for (const auto& [v, m] : models) {
      if (spec.kind == SweepKind::kRmaStructure && m != Momentum::kRma)
        throw std::invalid_argument("rma-structure sweeps only apply to rma models");
      for (auto seed : seeds) {
        RunConfig c = base(v, m);
        cell(c);
        c.train.seed = seed;
        out.push_back(c);
      }
    }
  return out;
}

inline std::string dataset_dir_name(double a, std::uint64_t seed, const std::array<std::size_t, 3>& counts) {
  return "a" + io::fmt_double(a) + "-seed" + std::to_string(seed) + "-n" + std::to_string(counts[0]) + "_" +
         std::to_string(counts[1]) + "_" + std::to_string(counts[2]);
}

/// Loads the dataset from dir if present, otherwise generates and saves it.
inline PairedDataset ensure_dataset(const fs::path& dir, double a, std::uint64_t seed,
                                    const std::array<std::size_t, 3>& counts) {
  DatasetOptions opt;
  opt.counts = counts;
  if (fs::exists(dir / "manifest.txt")) {
    auto ds = load_dataset(dir);
    if (ds.a != a || ds.seed != seed || ds.options.counts != counts)
      throw io::IoError(dir.string() + ": existing dataset does not match the requested settings");
    return ds;
  }
  auto ds = gen_dataset(a, seed, opt);
  save_dataset(ds, dir);
  return ds;
}

struct SweepOutcome {
  std::size_t total = 0;
  std::size_t skipped = 0;   // already complete
  std::size_t completed = 0; // run in this invocation
  std::size_t pending = 0;   // left for a later invocation because of the limit
  std::vector<std::pair<std::string, std::string>> failed;  // fingerprint, message
};

/// Rebuilds results.csv and runtime.csv from the completed run directories, sorted by fingerprint.
inline std::size_t rebuild_results(const fs::path& out) {
  std::vector<std::vector<std::string>> rows, times;
  const auto runs = out / "runs";
  if (fs::exists(runs)) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(runs))
      if (e.is_directory() && run_complete(e.path())) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const auto r = read_record(d);
      rows.push_back(result_row(r));
      times.push_back(runtime_row(r));
    }
  }
  Table t{results_header(), rows};
  std::sort(t.rows.begin(), t.rows.end());
  io::write_file(out / "results.csv", format_csv(t));
  Table rt{runtime_header(), times};
  std::sort(rt.rows.begin(), rt.rows.end());
  io::write_file(out / "runtime.csv", format_csv(rt));
  return rows.size();
}

inline Table aggregate(const Table& in);

/// Runs every cell not yet complete under out/runs/<fingerprint>, at most spec.jobs at a time.
inline SweepOutcome run_sweep(const SweepSpec& spec, const LogFn& log = {}) {
  if (spec.out.empty()) throw std::invalid_argument("sweep: output directory required");
  if (spec.jobs == 0) throw std::invalid_argument("sweep: jobs must be positive");
  auto cells = expand_sweep(spec);
  fs::create_directories(spec.out / "runs");

  std::map<double, PairedDataset> datasets;
  for (auto& c : cells) {
    auto it = datasets.find(c.a);
    if (it == datasets.end())
      it = datasets
               .emplace(c.a, ensure_dataset(spec.out / "data" / dataset_dir_name(c.a, c.data_seed, c.counts), c.a,
                                            c.data_seed, c.counts))
               .first;
    c.operator_fingerprint = it->second.operator_fingerprint();
  }

  SweepOutcome res;
  res.total = cells.size();
  std::set<std::string> seen;
  std::vector<const RunConfig*> todo;
  for (const auto& c : cells) {
    const auto fp = fingerprint(c);
    if (!seen.insert(fp).second) continue;
    if (run_complete(spec.out / "runs" / fp)) {
      ++res.skipped;
      continue;
    }
    todo.push_back(&c);
  }
  res.total = seen.size();
  if (spec.limit && todo.size() > spec.limit) {
    res.pending = todo.size() - spec.limit;
    todo.resize(spec.limit);
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto say = [&](const std::string& s) {
    if (!log) return;
    std::lock_guard<std::mutex> g(mu);
    log(s);
  };
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const RunConfig& c = *todo[i];
      const auto fp = fingerprint(c);
      try {
        const auto rec = run_experiment(c, datasets.at(c.a), spec.out / "runs" / fp, say);
        append_record(spec.out / "results.csv", rec);
        char buf[200];
        std::snprintf(buf, sizeof buf, "done %s %s T=%zu L=%zu n=%zu a=%s frac=%s seed=%llu test mse %.6g",
                      fp.c_str(), c.series().c_str(), c.model.unrolls, c.model.lstm_layers, c.model.lstm_hidden,
                      io::fmt_double(c.a).c_str(), io::fmt_double(c.data_fraction).c_str(),
                      static_cast<unsigned long long>(c.train.seed), rec.stats.mean);
        say(buf);
        std::lock_guard<std::mutex> g(mu);
        ++res.completed;
      } catch (const std::exception& e) {
        say("failed " + fp + ": " + e.what());
        std::lock_guard<std::mutex> g(mu);
        res.failed.emplace_back(fp, e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::min(spec.jobs, todo.size()); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  std::sort(res.failed.begin(), res.failed.end());

  rebuild_results(spec.out);
  const Table results = read_csv(spec.out / "results.csv");
  if (!results.rows.empty()) io::write_file(spec.out / "summary.csv", format_csv(aggregate(results)));
  return res;
}

// ---------------------------------------------------------------------------
// Aggregation and rendering

inline const std::vector<std::string>& cell_columns() {
  static const std::vector<std::string> c{"model",  "momentum",   "T",       "L",     "hidden",  "a",
                                          "data_fraction", "epochs", "batch_size", "dataset", "split", "mse_norm"};
  return c;
}

inline const std::vector<std::string>& summary_header() {
  static const std::vector<std::string> h = [] {
    auto v = cell_columns();
    v.insert(v.end(), {"n_runs", "mse_mean", "mse_std"});
    return v;
  }();
  return h;
}

/// Orders numerically when both cells parse as numbers, lexically otherwise.
inline bool cell_less(const std::string& a, const std::string& b) {
  char* ea = nullptr;
  char* eb = nullptr;
  const double da = std::strtod(a.c_str(), &ea), db = std::strtod(b.c_str(), &eb);
  const bool na = !a.empty() && *ea == '\0', nb = !b.empty() && *eb == '\0';
  if (na && nb && da != db) return da < db;
  if (na != nb) return na;
  return a < b;
}

/// Mean and n-1 standard deviation of the test MSE across runs of each cell. Raw result rows count
/// as single runs; rows that are already aggregated are combined by their run counts, and a cell
/// holding a single row is passed through verbatim, so aggregate(aggregate(t)) == aggregate(t).
inline Table aggregate(const Table& in) {
  if (in.rows.empty()) throw std::invalid_argument("no results to aggregate");
  const bool summarized = in.has("n_runs");
  std::vector<std::size_t> key_idx;
  for (const auto& c : cell_columns()) key_idx.push_back(in.col(c));
  const std::size_t mean_i = in.col("mse_mean"), std_i = in.col("mse_std");
  const std::size_t n_i = summarized ? in.col("n_runs") : 0;

  auto key_less = [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(), cell_less);
  };
  std::map<std::vector<std::string>, std::vector<std::size_t>, decltype(key_less)> groups(key_less);
  for (std::size_t r = 0; r < in.rows.size(); ++r) {
    std::vector<std::string> key;
    for (auto i : key_idx) key.push_back(in.rows[r][i]);
    groups[key].push_back(r);
  }
  Table out{summary_header(), {}};
  for (const auto& [key, idx] : groups) {
    auto row = key;
    if (idx.size() == 1) {
      const auto& src = in.rows[idx[0]];
      row.push_back(summarized ? src[n_i] : "1");
      row.push_back(src[mean_i]);
      row.push_back(summarized ? src[std_i] : "0");
    } else {
      double total = 0.0, weighted = 0.0;
      std::vector<std::array<double, 3>> parts;
      for (auto r : idx) {
        const auto& src = in.rows[r];
        const double n = summarized ? parse_number(src[n_i]) : 1.0;
        const double m = parse_number(src[mean_i]);
        const double s = summarized ? parse_number(src[std_i]) : 0.0;
        parts.push_back({n, m, s});
        total += n;
        weighted += n * m;
      }
      const double mean = weighted / total;
      double ss = 0.0;
      for (const auto& [n, m, s] : parts) ss += (n - 1.0) * s * s + n * (m - mean) * (m - mean);
      const double sd = total > 1.0 ? std::sqrt(ss / (total - 1.0)) : 0.0;
      row.push_back(std::to_string(static_cast<long long>(total)));
      row.push_back(io::fmt_double(mean));
      row.push_back(io::fmt_double(sd));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline Table load_results(const fs::path& path) {
  Table t = read_csv(path);
  if (t.rows.empty()) throw io::IoError(path.string() + ": no results");
  return t;
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, mean mse), sorted by x
};

struct PlotData {
  std::string x_column;
  std::vector<Series> series;
};

/// Picks the swept column (the first that varies within a model series) and groups the cells into
/// series. Columns other than the swept one that also vary become part of the series label.
inline PlotData plot_data(const Table& summary) {
  static const std::vector<std::string> candidates{"a", "data_fraction", "T", "L", "hidden"};
  const std::size_t model_i = summary.col("model"), mom_i = summary.col("momentum");
  const std::size_t mean_i = summary.col("mse_mean");
  auto base = [&](const std::vector<std::string>& r) { return r[model_i] + "-" + r[mom_i]; };
  auto varies_within = [&](const std::string& col) {
    const std::size_t c = summary.col(col);
    std::map<std::string, std::set<std::string>> vals;
    for (const auto& r : summary.rows) vals[base(r)].insert(r[c]);
    for (const auto& [k, v] : vals)
      if (v.size() > 1) return true;
    return false;
  };
  PlotData pd;
  for (const auto& c : candidates)
    if (varies_within(c)) {
      pd.x_column = c;
      break;
    }
  if (pd.x_column.empty()) pd.x_column = "a";
  std::vector<std::string> extra;
  for (const auto& c : candidates)
    if (c != pd.x_column && varies_within(c)) extra.push_back(c);
  if (summary.has("split") && varies_within("split")) extra.push_back("split");

  const std::size_t x_i = summary.col(pd.x_column);
  std::map<std::string, Series> by_label;
  std::vector<std::string> order;
  for (const auto& r : summary.rows) {
    std::string label = base(r);
    for (const auto& e : extra) label += " " + e + "=" + r[summary.col(e)];
    auto [it, fresh] = by_label.try_emplace(label);
    if (fresh) {
      it->second.label = label;
      order.push_back(label);
    }
    it->second.points.emplace_back(parse_number(r[x_i]), parse_number(r[mean_i]));
  }
  for (const auto& l : order) {
    auto s = by_label[l];
    std::sort(s.points.begin(), s.points.end());
    pd.series.push_back(std::move(s));
  }
  return pd;
}

inline std::string render_svg(const Table& summary) {
  const PlotData pd = plot_data(summary);
  const double W = 720, H = 440, left = 80, right = 200, top = 40, bottom = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : pd.series)
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x1 <= x0) x0 -= 0.5, x1 += 0.5;
  if (y1 <= y0) {
    const double pad = y0 == 0.0 ? 1.0 : std::abs(y0) * 0.05;
    y0 -= pad, y1 += pad;
  }
  const double ypad = (y1 - y0) * 0.08;
  y0 -= ypad, y1 += ypad;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  char buf[256];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << (left + (W - left - right) / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
     << "test MSE vs " << pd.x_column << "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", left,
                H - bottom, W - right, H - bottom);
  os << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", left, top,
                left, H - bottom);
  os << buf;
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%.3g</text>\n", px(xv),
                  H - bottom + 18, xv);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.3g</text>\n", left - 6,
                  py(yv) + 4, yv);
    os << buf;
  }
  os << "<text x=\"" << (left + (W - left - right) / 2) << "\" y=\"" << (H - 16) << "\" text-anchor=\"middle\">"
     << pd.x_column << "</text>\n";
  for (std::size_t s = 0; s < pd.series.size(); ++s) {
    const char* color = colors[s % 10];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pd.series[s].points.size(); ++i) {
      const auto& [x, y] = pd.series[s].points[i];
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(x), py(y));
      os << buf;
    }
    os << "\"><title>" << pd.series[s].label << "</title></polyline>\n";
    for (const auto& [x, y] : pd.series[s].points) {
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(x), py(y), color);
      os << buf;
    }
    const double ly = top + 16.0 * static_cast<double>(s);
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%g\" y=\"%.1f\" width=\"14\" height=\"4\" fill=\"%s\"/><text x=\"%g\" y=\"%.1f\">", W - right + 16,
                  ly, color, W - right + 36, ly + 6);
    os << buf << pd.series[s].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace dunets::exp

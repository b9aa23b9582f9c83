// dunets: dataset generation, training, evaluation, sweeps and reports for the
// Volterra deconvolution study.
//
// Exit codes: 0 success, 1 usage, 2 run failure, 3 fingerprint conflict.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "dunets/dataset.hpp"
#include "dunets/experiment.hpp"
#include "dunets/training.hpp"
#include "dunets/unrolling.hpp"

namespace fs = std::filesystem;
using namespace dunets;

namespace {

constexpr int kUsage = 1;
constexpr int kRunFailure = 2;
constexpr int kConflict = 3;

struct Conflict : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path results_root() {
  const char* env = std::getenv("DUNETS_RESULTS");
  return env && *env ? fs::path(env) : fs::path("results");
}

void log_err(const std::string& s) { std::cerr << s << std::endl; }

struct GenArgs {
  double a = 0.0;
  std::string counts = "10000,1000,1000";
  std::uint64_t seed = 0;
  std::string out;
  double tv_scale = 0.1;
  double noise = 0.0;
  bool force = false;
};

int cmd_gen_data(const GenArgs& g) {
  DatasetOptions opt;
  opt.counts = exp::parse_counts(g.counts);
  opt.tv_scale = g.tv_scale;
  opt.noise_sigma = g.noise;
  const fs::path out = g.out.empty() ? results_root() / "data" / exp::dataset_dir_name(g.a, g.seed, opt.counts)
                                     : fs::path(g.out);
  if (fs::exists(out / "manifest.txt") && !g.force)
    throw Conflict(out.string() + " already holds a dataset (use --force to overwrite)");
  const auto ds = gen_dataset(g.a, g.seed, opt);
  save_dataset(ds, out);
  std::cout << "dataset " << out.string() << "\n"
            << "  a=" << io::fmt_double(ds.a) << " seed=" << ds.seed << " n=" << ds.op->n() << " m=" << ds.op->m()
            << " k=" << ds.op->k() << " s=" << ds.op->stride() << "\n"
            << "  train=" << opt.counts[0] << " val=" << opt.counts[1] << " test=" << opt.counts[2] << "\n"
            << "  operator_fingerprint=" << ds.operator_fingerprint() << "\n";
  return 0;
}

struct TrainArgs {
  std::string model = "lpd";
  std::string momentum = "none";
  std::size_t T = 0;
  std::size_t L = 1;
  std::size_t n = 50;
  double gamma = 0.9;
  double eta = 1e-3;
  std::string data;
  std::uint64_t seed = 0;
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 1e-3;
  double fraction = 1.0;
  std::string out;
  std::string results;
  bool force = false;
  bool quiet = false;
};

fs::path results_file(const std::string& flag) {
  return flag.empty() ? results_root() / "results.csv" : fs::path(flag);
}

int cmd_train(const TrainArgs& t) {
  const auto ds = load_dataset(t.data);
  auto cfg = exp::run_for_dataset(ds, parse_variant(t.model), parse_momentum(t.momentum));
  if (t.T) cfg.model.unrolls = t.T;
  cfg.model.lstm_layers = t.L;
  cfg.model.lstm_hidden = t.n;
  cfg.model.gamma = t.gamma;
  cfg.model.eta = t.eta;
  cfg.train.seed = t.seed;
  cfg.train.epochs = t.epochs;
  cfg.train.batch_size = t.batch;
  cfg.train.lr0 = t.lr;
  cfg.data_fraction = t.fraction;
  if (!(t.fraction > 0.0 && t.fraction <= 1.0)) throw std::invalid_argument("--data-fraction must be in (0, 1]");
  const auto fp = exp::fingerprint(cfg);
  const fs::path out = t.out.empty() ? results_root() / "runs" / fp : fs::path(t.out);
  if (fs::exists(out / "checkpoint.manifest") && !t.force) {
    std::string held = "another run";
    try {
      held = "run " + io::require(read_model_manifest(out), "run.fingerprint", out.string());
    } catch (const std::exception&) {
    }
    throw Conflict(out.string() + " already holds " + held + " (this run is " + fp + "; use --force to overwrite)");
  }
  UnrollModel probe(cfg.model, ds.op);
  if (!t.quiet)
    log_err("training " + cfg.series() + " T=" + std::to_string(cfg.model.unrolls) + " (" +
            std::to_string(probe.count_params()) + " parameters) fingerprint " + fp);
  const auto rec = exp::run_experiment(cfg, ds, out, t.quiet ? exp::LogFn{} : exp::LogFn{log_err});
  exp::append_record(results_file(t.results), rec);
  std::printf("fingerprint=%s split=%s mse_mean=%s mse_std=%s count=%zu out=%s\n", rec.fingerprint.c_str(),
              rec.split.c_str(), io::fmt_double(rec.stats.mean).c_str(), io::fmt_double(rec.stats.std).c_str(),
              ds.split(SplitKind::kTest).count(), out.string().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split;
  std::string results;
};

int cmd_eval(const EvalArgs& e) {
  fs::path data = e.data;
  std::string split = e.split;
  // "--data <dataset>/val" names a split of the dataset directory.
  if (!fs::exists(data / "manifest.txt") && fs::exists(data.parent_path() / "manifest.txt")) {
    const auto name = data.filename().string();
    if (!split.empty() && split_name(parse_split(split)) != split_name(parse_split(name)))
      throw std::invalid_argument("--split " + split + " contradicts --data " + e.data);
    split = name;
    data = data.parent_path();
  }
  const SplitKind kind = parse_split(split.empty() ? "test" : split);
  const auto ds = load_dataset(data);
  const auto manifest = read_model_manifest(e.checkpoint);
  const auto model = load_model(e.checkpoint, ds.op);
  exp::ExperimentRecord rec;
  rec.config = exp::run_from_manifest(manifest, (fs::path(e.checkpoint) / "checkpoint.manifest").string());
  rec.fingerprint = exp::fingerprint(rec.config);
  rec.split = split_name(kind);
  rec.started = exp::utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  rec.stats = evaluate(model, ds.split(kind));
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.finished = exp::utc_now();
  rec.history_path = (fs::path(e.checkpoint) / "history.csv").string();
  exp::append_record(results_file(e.results), rec, false);
  std::printf("fingerprint=%s split=%s mse_mean=%s mse_std=%s count=%zu\n", rec.fingerprint.c_str(),
              rec.split.c_str(), io::fmt_double(rec.stats.mean).c_str(), io::fmt_double(rec.stats.std).c_str(),
              rec.stats.count);
  return 0;
}

struct SweepArgs {
  std::string kind;
  std::string grid;
  std::string seeds = "0-9";
  std::string models;
  double a = 1.0;
  std::size_t T = 0;
  std::string counts = "10000,1000,1000";
  std::uint64_t data_seed = 0;
  std::size_t epochs = 20;
  std::size_t batch = 32;
  std::size_t jobs = 1;
  std::size_t limit = 0;
  std::string out;
  bool quiet = false;
};

int cmd_sweep(const SweepArgs& s) {
  exp::SweepSpec spec;
  spec.kind = exp::parse_sweep_kind(s.kind);
  spec.grid = s.grid;
  spec.models = s.models;
  spec.seeds = s.seeds;
  spec.a = s.a;
  spec.unrolls = s.T;
  spec.counts = exp::parse_counts(s.counts);
  spec.data_seed = s.data_seed;
  spec.train.epochs = s.epochs;
  spec.train.batch_size = s.batch;
  spec.jobs = s.jobs;
  spec.limit = s.limit;
  spec.out = s.out.empty() ? results_root() / ("sweep-" + s.kind) : fs::path(s.out);
  const auto res = exp::run_sweep(spec, s.quiet ? exp::LogFn{} : exp::LogFn{log_err});
  std::printf("sweep %s: %zu runs, %zu already complete, %zu completed, %zu pending, %zu failed\n", s.kind.c_str(),
              res.total, res.skipped, res.completed, res.pending, res.failed.size());
  std::printf("results %s\n", (spec.out / "results.csv").string().c_str());
  if (fs::exists(spec.out / "summary.csv")) {
    std::printf("summary %s\n", (spec.out / "summary.csv").string().c_str());
    std::cout << io::read_file(spec.out / "summary.csv");
  }
  if (!res.failed.empty()) {
    std::fprintf(stderr, "failed runs:\n");
    for (const auto& [fp, msg] : res.failed) std::fprintf(stderr, "  %s: %s\n", fp.c_str(), msg.c_str());
    return kRunFailure;
  }
  return 0;
}

struct ReportArgs {
  std::string results;
  std::string format = "csv";
  std::string out;
};

int cmd_report(const ReportArgs& r) {
  const fs::path in = results_file(r.results);
  const auto summary = exp::aggregate(exp::load_results(in));
  const std::string csv = exp::format_csv(summary);
  if (r.format == "csv") {
    if (r.out.empty())
      std::cout << csv;
    else
      io::write_file(r.out, csv);
    return 0;
  }
  fs::path svg = r.out.empty() ? fs::path(in).replace_extension(".svg") : fs::path(r.out);
  fs::path side = fs::path(svg).replace_extension(".csv");
  if (fs::exists(side) && fs::equivalent(side, in)) side = fs::path(svg).replace_extension(".summary.csv");
  io::write_file(svg, exp::render_svg(summary));
  io::write_file(side, csv);
  std::printf("svg %s\ncsv %s\n", svg.string().c_str(), side.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep unrolling networks with recurrent momentum for the Volterra deconvolution study"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a paired dataset");
  g->add_option("--a", gen.a, "second-order coefficient")->required();
  g->add_option("--counts", gen.counts, "train,val,test sample counts")->capture_default_str();
  g->add_option("--seed", gen.seed, "dataset and operator seed")->capture_default_str();
  g->add_option("--out", gen.out, "output directory");
  g->add_option("--tv-scale", gen.tv_scale, "Laplace increment scale of the prior")->capture_default_str();
  g->add_option("--noise", gen.noise, "observation noise standard deviation")->capture_default_str();
  g->add_flag("--force", gen.force, "overwrite an existing dataset");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train one model");
  t->add_option("--model", tr.model)->check(CLI::IsMember({"lpgd", "lpgdsw", "lpd"}))->capture_default_str();
  t->add_option("--momentum", tr.momentum)->check(CLI::IsMember({"none", "ma", "rma"}))->capture_default_str();
  t->add_option("--T", tr.T, "unrolled iterations (default depends on model and momentum)");
  t->add_option("--L", tr.L, "LSTM layers")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--n", tr.n, "LSTM hidden size")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--gamma", tr.gamma, "MA momentum coefficient")->capture_default_str();
  t->add_option("--eta", tr.eta, "MA step size")->capture_default_str();
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--seed", tr.seed)->capture_default_str();
  t->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--batch", tr.batch)->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--lr", tr.lr, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--data-fraction", tr.fraction, "fraction of the training split")->capture_default_str();
  t->add_option("--out", tr.out, "run directory");
  t->add_option("--results", tr.results, "results CSV to update");
  t->add_flag("--force", tr.force, "overwrite an existing run directory");
  t->add_flag("--quiet", tr.quiet);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "run directory")->required();
  e->add_option("--data", ev.data, "dataset directory, or <dataset>/<split>")->required();
  e->add_option("--split", ev.split, "train, val or test (default test)");
  e->add_option("--results", ev.results, "results CSV to update");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "run a resumable grid of trainings");
  s->add_option("kind", sw.kind)->required()->check(CLI::IsMember({"a", "datasize", "rma-structure", "unroll"}));
  s->add_option("--grid", sw.grid, "grid values; rma-structure takes L-list x n-list, e.g. 1,2,3x30,50,70");
  s->add_option("--seeds", sw.seeds, "seed list or range")->capture_default_str();
  s->add_option("--models", sw.models, "comma list such as lpd-none,lpd-ma,lpd-rma");
  s->add_option("--a", sw.a, "coefficient for kinds other than a")->capture_default_str();
  s->add_option("--T", sw.T, "unrolled iterations for every model (default per model)");
  s->add_option("--counts", sw.counts)->capture_default_str();
  s->add_option("--data-seed", sw.data_seed)->capture_default_str();
  s->add_option("--epochs", sw.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--batch", sw.batch)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--jobs", sw.jobs)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--limit", sw.limit, "stop after this many new runs");
  s->add_option("--out", sw.out, "sweep directory");
  s->add_flag("--quiet", sw.quiet);

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "aggregate a results CSV");
  r->add_option("--results", rp.results, "results CSV");
  r->add_option("--format", rp.format)->check(CLI::IsMember({"csv", "svg"}))->capture_default_str();
  r->add_option("--out", rp.out, "output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_sweep(sw);
    if (*r) return cmd_report(rp);
  } catch (const Conflict& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kConflict;
  } catch (const FingerprintMismatch& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kConflict;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const TrainingDiverged& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRunFailure;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRunFailure;
  }
  return kUsage;
}

#include "structdrop/cli/commands.hpp"

#include "structdrop/cli/experiment_config.hpp"
#include "structdrop/distribution.hpp"
#include "structdrop/masked_gemm.hpp"
#include "structdrop/schedule.hpp"
#include "structdrop/train/cnn.hpp"
#include "structdrop/train/lstm.hpp"
#include "structdrop/train/mlp.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace structdrop::cli {

namespace fs = std::filesystem;
using nlohmann::json;

double GemmBenchRow::speedup() const
{
  return wall_ns_masked > 0 ? static_cast<double>(wall_ns_dense) / static_cast<double>(wall_ns_masked) : 0.0;
}

namespace {

std::string num(double v)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::int64_t median(std::vector<std::int64_t> v)
{
  std::sort(v.begin(), v.end());
  auto const n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

template <typename F>
std::int64_t time_ns(F &&f)
{
  auto const t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
}

void write_file(fs::path const &path, std::string const &text)
{
  if (path.has_parent_path()) { fs::create_directories(path.parent_path()); }
  std::ofstream f(path, std::ios::binary);
  if (!f) { throw FormatError("cannot write " + path.string()); }
  f << text;
  if (!f) { throw FormatError("write failed: " + path.string()); }
}

std::string timing_csv(TrainLog const &log)
{
  std::ostringstream os;
  os << "epoch,wall_ns\n";
  for (auto const &e : log.epochs) { os << e.epoch << ',' << e.wall_ns << '\n'; }
  return os.str();
}

} // namespace

GemmBenchRow bench_masked_gemm(Index m, Index k, Index n, Granularity g, double keep, int reps, TileConfig tile,
                               std::uint64_t seed)
{
  if (m < 1 || k < 1 || n < 1) { throw ParameterError("bench-gemm: dims must be >= 1"); }
  if (!(keep > 0.0 && keep <= 1.0)) { throw ParameterError("bench-gemm: keep must be in (0, 1]"); }
  if (reps < 1) { throw ParameterError("bench-gemm: reps must be >= 1"); }
  Index const space = pattern_space(g, m, k, tile);
  Index const dp = std::clamp<Index>(static_cast<Index>(std::llround(1.0 / keep)), 1, space);
  BinaryMask const mask = g == Granularity::Row ? row_mask(dp, 1, m) : tile_mask(dp, 1, m, k, tile);

  SeededRng rng(seed);
  Matrix<float> w(m, k);
  Matrix<float> x(k, n);
  for (Index i = 0; i < w.size(); ++i) { w.data()[i] = static_cast<float>(2.0 * rng.uniform() - 1.0); }
  for (Index i = 0; i < x.size(); ++i) { x.data()[i] = static_cast<float>(2.0 * rng.uniform() - 1.0); }
  MaskedGemmWorkspace<float> ws;

  GemmBenchRow row;
  row.m = m;
  row.k = k;
  row.n = n;
  row.granularity = g;
  row.keep = keep;
  // Warm-up sizes the workspace and faults in pages for both paths.
  auto warm = masked_matmul(w, x, mask, &ws);
  row.macs_performed = warm.macs_performed;
  row.macs_dense = warm.macs_dense;
  { auto d = gemm(w, x); (void)d; }

  std::vector<std::int64_t> dense_ns;
  std::vector<std::int64_t> masked_ns;
  for (int r = 0; r < reps; ++r) {
    dense_ns.push_back(time_ns([&] {
      auto d = gemm(w, x);
      (void)d;
    }));
    masked_ns.push_back(time_ns([&] {
      auto p = masked_matmul(w, x, mask, &ws);
      (void)p;
    }));
  }
  row.wall_ns_dense = median(dense_ns);
  row.wall_ns_masked = median(masked_ns);
  return row;
}

std::string bench_csv_header()
{
  return "M,K,N,granularity,keep_fraction,macs_performed,macs_dense,wall_ns_masked,wall_ns_dense,speedup";
}

std::string bench_csv_row(GemmBenchRow const &r)
{
  std::ostringstream os;
  os << r.m << ',' << r.k << ',' << r.n << ',' << to_string(r.granularity) << ',' << num(r.keep) << ','
     << r.macs_performed << ',' << r.macs_dense << ',' << r.wall_ns_masked << ',' << r.wall_ns_dense << ','
     << num(r.speedup());
  return os.str();
}

int resolve_threads(int flag)
{
  if (flag > 0) { return flag; }
  if (char const *env = std::getenv("MASKGEMM_THREADS")) {
    char *end = nullptr;
    long const v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) { return static_cast<int>(v); }
    throw ConfigError("MASKGEMM_THREADS must be a positive integer");
  }
  return 0;
}

namespace {

struct RunOutcome
{
  std::string name;
  TrainLog log;
};

struct RunParams
{
  std::uint64_t seed;
  double rate;
  Index batch;
};

double configured_rate(ExperimentConfig const &cfg)
{
  if (cfg.model == "mlp") { return cfg.mlp.mode == DropoutMode::None ? 0.0 : cfg.mlp.rates.front(); }
  if (cfg.model == "lstm") { return cfg.lstm.mode == DropoutMode::None ? 0.0 : cfg.lstm.rate; }
  if (cfg.cnn.mode == DropoutMode::None) { return 0.0; }
  return cfg.schedule.constant ? *cfg.schedule.constant : cfg.schedule.curve.mean_ratio;
}

TrainLog train_once(ExperimentConfig cfg, RunParams const &p, bool override_rate)
{
  cfg.train.seed = p.seed;
  cfg.train.batch_size = p.batch;
  if (cfg.model == "mlp") {
    if (override_rate) { cfg.mlp.rates = {p.rate}; }
    auto const [train, test] = cfg.images.load();
    cfg.mlp.inputs = train.images.cols();
    return train_mlp<Real>(cfg.mlp, cfg.train, train, test);
  }
  if (cfg.model == "lstm") {
    if (override_rate) { cfg.lstm.rate = p.rate; }
    auto const [train, valid] = cfg.text.load();
    return train_lstm<Real>(cfg.lstm, cfg.train, train, valid);
  }
  if (override_rate) {
    if (cfg.schedule.constant) {
      cfg.schedule.constant = p.rate;
    } else {
      cfg.schedule.curve.mean_ratio = p.rate;
    }
  }
  auto const [train, test] = cfg.images.load();
  return train_cnn<Real>(cfg.cnn, cfg.train, train, test, cfg.schedule.build(cfg.train.epochs));
}

std::string mode_name(ExperimentConfig const &cfg)
{
  if (cfg.model == "mlp") { return to_string(cfg.mlp.mode); }
  if (cfg.model == "lstm") { return to_string(cfg.lstm.mode); }
  return to_string(cfg.cnn.mode);
}

int cmd_train(ExperimentConfig const &cfg, std::ostream &out)
{
  fs::path const dir = cfg.output_dir;
  fs::create_directories(dir);
  write_file(dir / "config.resolved.json", resolved(cfg).dump(2) + "\n");

  auto const seeds = cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : cfg.seeds;
  bool const override_rate = !cfg.rates.empty();
  auto const rates = override_rate ? cfg.rates : std::vector<double>{configured_rate(cfg)};
  auto const batches = cfg.batch_sizes.empty() ? std::vector<Index>{cfg.train.batch_size} : cfg.batch_sizes;

  std::ostringstream summary;
  std::ostringstream timing;
  summary << "run,model,mode,seed,rate,batch_size,epochs," << (cfg.model == "lstm" ? "final_perplexity" : "final_acc")
          << ",macs,macs_dense,dropout_macs,dropout_macs_dense\n";
  timing << "run,wall_ns\n";
  for (auto seed : seeds) {
    for (double rate : rates) {
      for (Index batch : batches) {
        std::string const name = cfg.model + "-seed" + std::to_string(seed) + "-rate" + num(rate) + "-batch" +
                                 std::to_string(batch);
        TrainLog const log = train_once(cfg, {seed, rate, batch}, override_rate);
        write_file(dir / (name + ".jsonl"), to_jsonl(log, false));
        write_file(dir / (name + ".timing.csv"), timing_csv(log));
        auto const macs = log.total_macs();
        auto const dmacs = log.total_dropout_macs();
        std::int64_t wall = 0;
        for (auto const &e : log.epochs) { wall += e.wall_ns; }
        summary << name << ',' << cfg.model << ',' << mode_name(cfg) << ',' << seed << ',' << num(rate) << ','
                << batch << ',' << log.epochs.size() << ',' << num(log.final_metric()) << ',' << macs.performed
                << ',' << macs.dense << ',' << dmacs.performed << ',' << dmacs.dense << '\n';
        timing << name << ',' << wall << '\n';
        out << name << ": " << log.metric_name << '=' << num(log.final_metric()) << " dropout_macs=" << dmacs.performed
            << '/' << dmacs.dense << '\n';
      }
    }
  }
  write_file(dir / "summary.csv", summary.str());
  write_file(dir / "summary.timing.csv", timing.str());
  return Ok;
}

int cmd_ablate(ExperimentConfig const &cfg, std::string const &mode, std::ostream &out)
{
  if (mode != "weight-vs-input" && mode != "magnitude-parts") {
    throw ConfigError("ablate: --mode must be weight-vs-input or magnitude-parts");
  }
  if (cfg.cnn.mode != DropoutMode::None) { throw ConfigError("ablate: network.mode must be none"); }
  fs::path const dir = cfg.output_dir;
  fs::create_directories(dir);
  write_file(dir / "config.resolved.json", resolved(cfg).dump(2) + "\n");
  auto const [train, test] = cfg.images.load();
  auto const schedule = constant_schedule(std::max(cfg.train.epochs, 1), 0.0);
  auto const seeds = cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : cfg.seeds;

  auto run = [&](std::string const &name, Ablation const &ab, std::uint64_t seed) {
    CnnSpec spec = cfg.cnn;
    spec.ablation = ab;
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    TrainLog const log = train_cnn<Real>(spec, tc, train, test, schedule);
    write_file(dir / (name + ".jsonl"), to_jsonl(log, false));
    write_file(dir / (name + ".timing.csv"), timing_csv(log));
    return log.final_metric();
  };

  std::ostringstream summary;
  if (mode == "weight-vs-input") {
    summary << "seed,target,fraction,final_acc,baseline_acc\n";
    for (auto seed : seeds) {
      std::string const s = std::to_string(seed);
      double const base = run("baseline-seed" + s, {}, seed);
      for (double f : cfg.fractions) {
        for (auto kind : {AblationKind::RandomWeight, AblationKind::RandomInput}) {
          std::string const target = kind == AblationKind::RandomWeight ? "weight" : "input";
          double const acc = run(target + "-f" + num(f) + "-seed" + s, {kind, f}, seed);
          summary << seed << ',' << target << ',' << num(f) << ',' << num(acc) << ',' << num(base) << '\n';
          out << target << " fraction=" << num(f) << " seed=" << seed << " acc=" << num(acc)
              << " baseline=" << num(base) << '\n';
        }
      }
    }
  } else {
    summary << "seed,part,fraction,final_acc,baseline_acc,harm\n";
    for (auto seed : seeds) {
      std::string const s = std::to_string(seed);
      double const base = run("baseline-seed" + s, {}, seed);
      for (int part = 1; part <= cfg.parts; ++part) {
        for (double f : cfg.fractions) {
          Ablation const ab{AblationKind::MagnitudePart, f, cfg.parts, part};
          double const acc = run("part" + std::to_string(part) + "-f" + num(f) + "-seed" + s, ab, seed);
          summary << seed << ',' << part << ',' << num(f) << ',' << num(acc) << ',' << num(base) << ','
                  << num(base - acc) << '\n';
          out << "part=" << part << " fraction=" << num(f) << " seed=" << seed << " acc=" << num(acc)
              << " harm=" << num(base - acc) << '\n';
        }
      }
    }
  }
  write_file(dir / "summary.csv", summary.str());
  return Ok;
}

} // namespace

int run(std::vector<std::string> const &args, std::ostream &out, std::ostream &err)
{
  CLI::App app{"Structured dropout: pattern search, masked GEMM benchmarks and training experiments", "structdrop"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads for inner products (fallback: MASKGEMM_THREADS)")
    ->check(CLI::NonNegativeNumber);

  auto *search = app.add_subcommand("search", "Search a dropout-pattern distribution for a target rate");
  double target_rate = 0.5;
  Index dp_max = 64;
  double entropy_weight = 1e-3;
  double search_lr = 1.0;
  int max_steps = 10000;
  Index support_cap = 64;
  std::string search_out;
  search->add_option("--target-rate", target_rate, "Target global dropout rate p")->required();
  search->add_option("--dp-max", dp_max, "Number of candidate periods N")->required()->check(CLI::PositiveNumber);
  search->add_option("--entropy-weight", entropy_weight, "Entropy weight lambda_H")->capture_default_str();
  search->add_option("--learning-rate", search_lr, "Gradient step on the logits")->capture_default_str();
  search->add_option("--max-steps", max_steps, "Iteration cap")->capture_default_str();
  search->add_option("--support-cap", support_cap, "Largest period searched")->capture_default_str();
  search->add_option("--out", search_out, "Write the distribution JSON here (default: stdout)");

  auto *bench = app.add_subcommand("bench-gemm", "Time masked against dense matrix products");
  Index bm = 2048, bk = 2048, bn = 2048;
  std::string granularity = "row";
  std::vector<double> keeps{1.0, 0.5, 0.25};
  int reps = 5;
  Index tile_rows = 32, tile_cols = 32;
  std::string csv_path;
  std::uint64_t bench_seed = 1;
  bench->add_option("--m", bm, "Weight rows")->capture_default_str();
  bench->add_option("--k", bk, "Weight columns")->capture_default_str();
  bench->add_option("--n", bn, "Input columns")->capture_default_str();
  bench->add_option("--granularity", granularity, "row or tile")->check(CLI::IsMember({"row", "tile"}));
  bench->add_option("--keep", keeps, "Kept fraction(s); dp = round(1/keep)")->capture_default_str();
  bench->add_option("--reps", reps, "Repetitions; the median is reported")->capture_default_str();
  bench->add_option("--tile-rows", tile_rows, "Tile rows")->capture_default_str();
  bench->add_option("--tile-cols", tile_cols, "Tile columns")->capture_default_str();
  bench->add_option("--csv", csv_path, "CSV output (default: stdout)");
  bench->add_option("--seed", bench_seed, "Operand seed")->capture_default_str();

  auto *train = app.add_subcommand("train", "Train a model from a JSON experiment config");
  std::string model;
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed_flag = 0;
  bool seed_given = false;
  train->add_option("--model", model, "mlp, lstm or cnn")->required()->check(CLI::IsMember({"mlp", "lstm", "cnn"}));
  train->add_option("--config", config_path, "Experiment config")->required();
  train->add_option("--output-dir", out_dir, "Overrides output_dir");
  train->add_option("--seed", seed_flag, "Overrides seed");

  auto *ablate = app.add_subcommand("ablate", "CNN dropout-target ablations");
  std::string ablate_mode;
  ablate->add_option("--mode", ablate_mode, "weight-vs-input or magnitude-parts")
    ->required()
    ->check(CLI::IsMember({"weight-vs-input", "magnitude-parts"}));
  ablate->add_option("--config", config_path, "Experiment config")->required();
  ablate->add_option("--output-dir", out_dir, "Overrides output_dir");
  ablate->add_option("--seed", seed_flag, "Overrides seed");

  auto *sched = app.add_subcommand("schedule", "Emit a skew-normal dropout-ratio schedule");
  int epochs = 100;
  double mean = 0.4, floor = 0.1, ceiling = 0.6, mode_fraction = 0.4;
  std::vector<double> shapes{3.0};
  std::string plot_csv;
  sched->add_option("--epochs", epochs, "Epoch count E")->capture_default_str();
  sched->add_option("--mean", mean, "Target mean ratio")->capture_default_str();
  sched->add_option("--floor", floor, "p_min")->capture_default_str();
  sched->add_option("--ceiling", ceiling, "p_max")->capture_default_str();
  sched->add_option("--shape", shapes, "Skew lambda (repeatable for a sweep)")->capture_default_str();
  sched->add_option("--mode-fraction", mode_fraction, "Mode position as a fraction of E")->capture_default_str();
  sched->add_option("--plot-csv", plot_csv, "CSV output (default: stdout)");

  auto *digits = app.add_subcommand("gen-digits", "Write a synthetic digit dataset in IDX format");
  Index n_train = 60000, n_test = 10000;
  std::uint64_t data_seed = 7;
  std::string data_dir = "data";
  digits->add_option("--train", n_train, "Training images")->capture_default_str();
  digits->add_option("--test", n_test, "Test images")->capture_default_str();
  digits->add_option("--seed", data_seed, "Generator seed")->capture_default_str();
  digits->add_option("--out-dir", data_dir, "Destination directory")->capture_default_str();

  auto *text = app.add_subcommand("gen-text", "Write a synthetic character corpus");
  Index chars = 200000;
  std::string text_out = "corpus.txt";
  text->add_option("--chars", chars, "Length in bytes")->capture_default_str();
  text->add_option("--seed", data_seed, "Generator seed")->capture_default_str();
  text->add_option("--out", text_out, "Destination file")->capture_default_str();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
    seed_given = train->count("--seed") > 0 || ablate->count("--seed") > 0;
  } catch (CLI::CallForHelp const &) {
    out << app.help();
    return Ok;
  } catch (CLI::CallForAllHelp const &) {
    out << app.help("", CLI::AppFormatMode::All);
    return Ok;
  } catch (CLI::ParseError const &e) {
    err << "error: " << e.what() << '\n';
    return UserError;
  }

  try {
    if (int const t = resolve_threads(threads); t > 0) { Eigen::setNbThreads(t); }

    if (search->parsed()) {
      SearchConfig cfg;
      cfg.patterns = dp_max;
      cfg.target_rate = target_rate;
      cfg.entropy_weight = entropy_weight;
      cfg.learning_rate = search_lr;
      cfg.max_steps = max_steps;
      cfg.support_cap = support_cap;
      try {
        cfg.validate();
      } catch (ParameterError const &e) {
        err << "error: infeasible search: " << e.what() << '\n';
        return UserError;
      }
      SeededRng rng(1);
      auto const result = search_distribution(cfg, rng);
      json j = to_json(result.distribution);
      j["entropy"] = result.entropy;
      j["steps"] = result.steps;
      j["status"] = result.status == SearchStatus::Converged ? "converged" : "max_steps";
      if (search_out.empty()) {
        out << j.dump(2) << '\n';
      } else {
        write_file(search_out, j.dump(2) + "\n");
      }
      out << "achieved_rate=" << num(result.distribution.achieved_rate) << " entropy=" << num(result.entropy)
          << " steps=" << result.steps << '\n';
      return Ok;
    }

    if (bench->parsed()) {
      auto const g = granularity_from_string(granularity);
      std::ostringstream csv;
      csv << bench_csv_header() << '\n';
      for (double keep : keeps) {
        auto const row = bench_masked_gemm(bm, bk, bn, g, keep, reps, {tile_rows, tile_cols}, bench_seed);
        csv << bench_csv_row(row) << '\n';
      }
      if (csv_path.empty()) {
        out << csv.str();
      } else {
        write_file(csv_path, csv.str());
        out << csv.str();
      }
      return Ok;
    }

    if (train->parsed() || ablate->parsed()) {
      auto cfg = load_experiment(config_path, train->parsed() ? model : "cnn");
      if (!out_dir.empty()) { cfg.output_dir = out_dir; }
      if (seed_given) {
        cfg.train.seed = seed_flag;
        cfg.seeds.clear();
      }
      return train->parsed() ? cmd_train(cfg, out) : cmd_ablate(cfg, ablate_mode, out);
    }

    if (sched->parsed()) {
      std::ostringstream csv;
      bool const sweep = shapes.size() > 1;
      csv << (sweep ? "shape,epoch,ratio\n" : "epoch,ratio\n");
      for (double shape : shapes) {
        ScheduleConfig c;
        c.epochs = epochs;
        c.mean_ratio = mean;
        c.floor = floor;
        c.ceiling = ceiling;
        c.shape = shape;
        c.mode_fraction = mode_fraction;
        auto const s = build_schedule(c);
        for (int e = 1; e <= s.epochs(); ++e) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "%.17g", s.ratio(e));
          if (sweep) { csv << num(shape) << ','; }
          csv << e << ',' << buf << '\n';
        }
        (plot_csv.empty() ? err : out) << "shape=" << num(shape) << " amplitude=" << num(s.amplitude)
                                       << " achieved_mean=" << num(s.achieved_mean)
                                       << " clamped=" << (s.clamped ? "true" : "false") << '\n';
      }
      if (plot_csv.empty()) {
        out << csv.str();
      } else {
        write_file(plot_csv, csv.str());
      }
      return Ok;
    }

    if (digits->parsed()) {
      fs::path const dir = data_dir;
      fs::create_directories(dir);
      save_idx(synthetic_digits(n_train, data_seed), (dir / "train-images-idx3-ubyte").string(),
               (dir / "train-labels-idx1-ubyte").string());
      save_idx(synthetic_digits(n_test, mix64(data_seed)), (dir / "t10k-images-idx3-ubyte").string(),
               (dir / "t10k-labels-idx1-ubyte").string());
      out << "wrote " << n_train << " training and " << n_test << " test images to " << dir.string() << '\n';
      return Ok;
    }

    if (text->parsed()) {
      write_file(text_out, synthetic_text(chars, data_seed));
      out << "wrote " << chars << " bytes to " << text_out << '\n';
      return Ok;
    }
  } catch (FormatError const &e) {
    err << "error: " << e.what() << '\n';
    return UserError;
  } catch (std::invalid_argument const &e) {
    err << "error: " << e.what() << '\n';
    return UserError;
  } catch (fs::filesystem_error const &e) {
    err << "error: " << e.what() << '\n';
    return UserError;
  } catch (std::exception const &e) {
    err << "internal error: " << e.what() << '\n';
    return InternalError;
  }
  err << "error: no command\n";
  return UserError;
}

} // namespace structdrop::cli

#include "structdrop/cli/commands.hpp"
#include "structdrop/cli/experiment_config.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace structdrop;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result
{
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args)
{
  std::ostringstream out;
  std::ostringstream err;
  int const code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(std::string const &name)
{
  auto const p = fs::temp_directory_path() / ("structdrop_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(fs::path const &p)
{
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void put(fs::path const &p, json const &j)
{
  std::ofstream(p) << j.dump(2);
}

json mlp_config()
{
  return {{"epochs", 2},
          {"batch_size", 16},
          {"learning_rate", 0.05},
          {"data", {{"synthetic", {{"train", 120}, {"test", 40}, {"seed", 3}}}}},
          {"network", {{"hidden", {24, 16}}, {"mode", "approx-row"}, {"rate", 0.5}}}};
}

json cnn_config()
{
  return {{"epochs", 2},
          {"batch_size", 16},
          {"learning_rate", 0.05},
          {"data", {{"synthetic", {{"train", 48}, {"test", 16}, {"seed", 3}}}}},
          {"network",
           {{"convs", {{{"out_channels", 4}, {"kernel", 5}, {"stride", 2}, {"padding", 2}}}},
            {"hidden", {16}},
            {"mode", "rsdp"},
            {"sensitivity", {{"region_rows", 14}, {"region_cols", 5}}}}},
          {"schedule", {{"constant", 0.0}}}};
}

/// Contents of the first `.jsonl` log in `dir`.
std::string run_log(fs::path const &dir)
{
  for (auto const &e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".jsonl") { return slurp(e.path()); }
  }
  return {};
}

} // namespace

TEST_CASE("help and argument errors")
{
  auto const help = invoke({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("search") != std::string::npos);
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({"search", "--dp-max", "4"}).code == 2);
  CHECK(invoke({"search", "--target-rate", "0.3", "--dp-max", "0"}).code == 2);
  CHECK(invoke({"train", "--model", "rnn", "--config", "x.json"}).code == 2);
}

TEST_CASE("search: feasible and infeasible targets")
{
  auto const dir = scratch("search");
  auto const path = (dir / "dist.json").string();
  auto const r = invoke({"search", "--target-rate", "0.5", "--dp-max", "2", "--entropy-weight", "0", "--out", path});
  REQUIRE(r.code == 0);
  auto const j = json::parse(slurp(path));
  auto const probs = j.at("probs").get<std::vector<double>>();
  REQUIRE(probs.size() == 2);
  // rate = probs[1] / 2, so the 0.01 rate tolerance bounds probs[0] by 0.02.
  CHECK(probs[0] <= 0.02);
  CHECK(probs[0] + probs[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(j.at("achieved_rate").get<double>() - 0.5) <= 0.01);
  CHECK(r.out.find("achieved_rate=") != std::string::npos);

  auto const bad = invoke({"search", "--target-rate", "0.99", "--dp-max", "2"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("infeasible") != std::string::npos);
  CHECK(invoke({"search", "--target-rate", "-0.1", "--dp-max", "4"}).code == 2);

  auto const first = invoke({"search", "--target-rate", "0.3", "--dp-max", "8"});
  auto const second = invoke({"search", "--target-rate", "0.3", "--dp-max", "8"});
  CHECK(first.code == 0);
  CHECK(first.out == second.out);
}

TEST_CASE("bench-gemm writes a csv row per keep fraction")
{
  auto const r = invoke({"bench-gemm", "--m", "64", "--k", "32", "--n", "16", "--keep", "0.5", "--keep", "0.25",
                         "--reps", "3", "--granularity", "row"});
  REQUIRE(r.code == 0);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  CHECK(line == cli::bench_csv_header());
  int rows = 0;
  while (std::getline(in, line)) { ++rows; }
  CHECK(rows == 2);

  auto const row = cli::bench_masked_gemm(64, 32, 16, Granularity::Row, 0.5, 3, {}, 1);
  CHECK(row.macs_dense == 64 * 32 * 16);
  CHECK(row.macs_performed == 32 * 32 * 16);
  auto const tile = cli::bench_masked_gemm(64, 64, 8, Granularity::Tile, 0.25, 2, {16, 16}, 1);
  CHECK(tile.macs_performed == tile.macs_dense / 4);
  CHECK(invoke({"bench-gemm", "--keep", "0"}).code == 2);
  CHECK(invoke({"bench-gemm", "--granularity", "diagonal"}).code == 2);
}

TEST_CASE("thread count resolution")
{
  ::unsetenv("MASKGEMM_THREADS");
  CHECK(cli::resolve_threads(0) == 0);
  CHECK(cli::resolve_threads(3) == 3);
  ::setenv("MASKGEMM_THREADS", "2", 1);
  CHECK(cli::resolve_threads(0) == 2);
  CHECK(cli::resolve_threads(5) == 5);
  ::setenv("MASKGEMM_THREADS", "two", 1);
  CHECK_THROWS_AS(cli::resolve_threads(0), cli::ConfigError);
  CHECK(invoke({"schedule", "--epochs", "5", "--mean", "0.3", "--floor", "0.1", "--ceiling", "0.6"}).code == 2);
  ::unsetenv("MASKGEMM_THREADS");
}

TEST_CASE("config parsing rejects unknown keys and bad values")
{
  CHECK_NOTHROW(cli::parse_experiment(mlp_config(), "mlp"));
  auto c = mlp_config();
  c["learnign_rate"] = 0.1;
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c["network"]["dropout"] = 0.5;
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c["network"]["rate"] = 1.0;
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c["network"]["mode"] = "sideways";
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c["epochs"] = "ten";
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c["model"] = "cnn";
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c["schedule"] = {{"constant", 0.2}};
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  c = mlp_config();
  c.erase("data");
  CHECK_THROWS_AS(cli::parse_experiment(c, "mlp"), cli::ConfigError);
  auto s = cnn_config();
  s["schedule"] = {{"constant", 0.2}, {"mean", 0.3}};
  CHECK_THROWS_AS(cli::parse_experiment(s, "cnn"), cli::ConfigError);
  s = cnn_config();
  s["schedule"] = {{"mean", 0.9}, {"floor", 0.1}, {"ceiling", 0.6}};
  CHECK_THROWS_AS(cli::parse_experiment(s, "cnn"), cli::ConfigError);
  CHECK_THROWS_AS(cli::load_experiment("/nonexistent/config.json", "mlp"), cli::ConfigError);
}

TEST_CASE("resolved configs parse back to themselves")
{
  for (auto const &[doc, model] : std::vector<std::pair<json, std::string>>{{mlp_config(), "mlp"},
                                                                           {cnn_config(), "cnn"}}) {
    auto const r = cli::resolved(cli::parse_experiment(doc, model));
    CHECK(cli::resolved(cli::parse_experiment(r, model)) == r);
  }
  json const lstm = {{"epochs", 1}, {"data", {{"synthetic", {{"chars", 4000}}}}}, {"network", {{"hidden", 8}}}};
  auto const r = cli::resolved(cli::parse_experiment(lstm, "lstm"));
  CHECK(r.at("batch_size") == 32);
  CHECK(cli::resolved(cli::parse_experiment(r, "lstm")) == r);
}

TEST_CASE("train: exit codes and byte-identical logs")
{
  auto const dir = scratch("train");
  put(dir / "mlp.json", mlp_config());
  auto const a = invoke({"train", "--model", "mlp", "--config", (dir / "mlp.json").string(), "--output-dir",
                         (dir / "a").string()});
  REQUIRE(a.code == 0);
  auto const b = invoke({"train", "--model", "mlp", "--config", (dir / "mlp.json").string(), "--output-dir",
                         (dir / "b").string()});
  REQUIRE(b.code == 0);
  auto const la = run_log(dir / "a");
  CHECK_FALSE(la.empty());
  CHECK(la == run_log(dir / "b"));
  CHECK(slurp(dir / "a" / "summary.csv") == slurp(dir / "b" / "summary.csv"));
  CHECK(fs::exists(dir / "a" / "config.resolved.json"));
  CHECK(std::count(la.begin(), la.end(), '\n') == 2);

  auto const c = invoke({"train", "--model", "mlp", "--config", (dir / "mlp.json").string(), "--output-dir",
                         (dir / "c").string(), "--seed", "9"});
  REQUIRE(c.code == 0);
  CHECK(run_log(dir / "c") != la);

  auto bad = mlp_config();
  bad["typo"] = 1;
  put(dir / "bad.json", bad);
  CHECK(invoke({"train", "--model", "mlp", "--config", (dir / "bad.json").string()}).code == 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(invoke({"train", "--model", "mlp", "--config", (dir / "broken.json").string()}).code == 2);
  CHECK(invoke({"train", "--model", "mlp", "--config", (dir / "missing.json").string()}).code == 2);

  auto idx = mlp_config();
  idx["data"] = {{"train_images", "/nonexistent/a"},
                 {"train_labels", "/nonexistent/b"},
                 {"test_images", "/nonexistent/c"},
                 {"test_labels", "/nonexistent/d"}};
  put(dir / "idx.json", idx);
  auto const missing = invoke({"train", "--model", "mlp", "--config", (dir / "idx.json").string(), "--output-dir",
                               (dir / "d").string()});
  CHECK(missing.code == 2);
}

TEST_CASE("train: sweeps write one log per combination")
{
  auto const dir = scratch("sweep");
  auto cfg = mlp_config();
  cfg["epochs"] = 1;
  cfg["sweep"] = {{"seeds", {1, 2}}, {"rates", {0.0, 0.5}}};
  put(dir / "cfg.json", cfg);
  REQUIRE(invoke({"train", "--model", "mlp", "--config", (dir / "cfg.json").string(), "--output-dir",
                  (dir / "out").string()})
            .code == 0);
  int logs = 0;
  for (auto const &e : fs::directory_iterator(dir / "out")) { logs += e.path().extension() == ".jsonl" ? 1 : 0; }
  CHECK(logs == 4);
  auto const summary = slurp(dir / "out" / "summary.csv");
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 5);
}

TEST_CASE("cnn: a constant zero schedule reproduces the baseline log")
{
  auto const dir = scratch("cnn");
  auto cfg = cnn_config();
  put(dir / "rsdp.json", cfg);
  cfg["network"]["mode"] = "none";
  cfg.erase("schedule");
  put(dir / "none.json", cfg);
  REQUIRE(invoke({"train", "--model", "cnn", "--config", (dir / "rsdp.json").string(), "--output-dir",
                  (dir / "rsdp").string()})
            .code == 0);
  REQUIRE(invoke({"train", "--model", "cnn", "--config", (dir / "none.json").string(), "--output-dir",
                  (dir / "none").string()})
            .code == 0);
  auto const a = run_log(dir / "rsdp");
  CHECK_FALSE(a.empty());
  CHECK(a == run_log(dir / "none"));
}

TEST_CASE("lstm trains from a synthetic corpus")
{
  auto const dir = scratch("lstm");
  json const cfg = {{"epochs", 1},
                    {"batch_size", 4},
                    {"learning_rate", 0.5},
                    {"data", {{"synthetic", {{"chars", 3000}}}}},
                    {"network", {{"hidden", 8}, {"seq_len", 8}, {"mode", "approx-tile"}, {"tile", {4, 4}}}}};
  put(dir / "lstm.json", cfg);
  auto const r = invoke({"train", "--model", "lstm", "--config", (dir / "lstm.json").string(), "--output-dir",
                         (dir / "out").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("perplexity=") != std::string::npos);
  CHECK(run_log(dir / "out").find("\"perplexity\"") != std::string::npos);
}

TEST_CASE("ablate runs on the cnn only without sensitivity dropout")
{
  auto const dir = scratch("ablate");
  auto cfg = cnn_config();
  cfg["epochs"] = 1;
  cfg["network"]["mode"] = "none";
  cfg["ablation"] = {{"fractions", {0.3}}, {"parts", 2}};
  put(dir / "cfg.json", cfg);
  auto const r = invoke({"ablate", "--mode", "magnitude-parts", "--config", (dir / "cfg.json").string(),
                         "--output-dir", (dir / "out").string()});
  REQUIRE(r.code == 0);
  auto const summary = slurp(dir / "out" / "summary.csv");
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 3);
  CHECK(invoke({"ablate", "--mode", "everything", "--config", (dir / "cfg.json").string(), "--output-dir",
                (dir / "x").string()})
          .code == 2);
  cfg["network"]["mode"] = "rsdp";
  put(dir / "rsdp.json", cfg);
  CHECK(invoke({"ablate", "--mode", "weight-vs-input", "--config", (dir / "rsdp.json").string(), "--output-dir",
                (dir / "y").string()})
          .code == 2);
}

TEST_CASE("schedule command")
{
  auto const r = invoke({"schedule", "--epochs", "30", "--mean", "0.3", "--floor", "0.1", "--ceiling", "0.6",
                         "--shape", "2"});
  REQUIRE(r.code == 0);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,ratio");
  int rows = 0;
  double sum = 0.0;
  while (std::getline(in, line)) {
    ++rows;
    sum += std::stod(line.substr(line.find(',') + 1));
  }
  CHECK(rows == 30);
  CHECK(std::abs(sum / 30 - 0.3) <= 1e-6);
  CHECK(r.err.find("clamped=false") != std::string::npos);

  auto const sweep = invoke({"schedule", "--epochs", "10", "--mean", "0.3", "--shape", "0", "--shape", "3"});
  REQUIRE(sweep.code == 0);
  CHECK(sweep.out.rfind("shape,epoch,ratio\n", 0) == 0);
  CHECK(std::count(sweep.out.begin(), sweep.out.end(), '\n') == 21);
  CHECK(invoke({"schedule", "--mean", "0.05", "--floor", "0.1"}).code == 2);
}

TEST_CASE("data generators")
{
  auto const dir = scratch("data");
  REQUIRE(invoke({"gen-digits", "--train", "20", "--test", "5", "--out-dir", dir.string()}).code == 0);
  auto const d = load_idx((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string());
  CHECK(d.size() == 20);
  auto const t = load_idx((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string());
  CHECK(t.size() == 5);
  REQUIRE(invoke({"gen-text", "--chars", "500", "--out", (dir / "t.txt").string()}).code == 0);
  CHECK(slurp(dir / "t.txt").size() == 500);
  CHECK(load_text((dir / "t.txt").string()).size() == 500);
}

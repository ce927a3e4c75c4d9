// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// `acceptance 4 6` runs only the listed criteria.

#include "model_gradchecks.hpp"
#include "oracles.hpp"

#include "structdrop/cli/commands.hpp"
#include "structdrop/distribution.hpp"
#include "structdrop/masked_gemm.hpp"
#include "structdrop/schedule.hpp"
#include "structdrop/sensitivity.hpp"
#include "structdrop/train/cnn.hpp"
#include "structdrop/train/mlp.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

using namespace structdrop;

namespace {

struct Verdict
{
  bool pass = false;
  std::string detail;
};

std::string fmt(char const *f, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Verdict masked_gemm_oracle()
{
  auto const t0 = std::chrono::steady_clock::now();
  SeededRng rng(2024);
  double worst = 0.0;
  int bad = 0;
  for (int t = 0; t < 200; ++t) {
    Index const m = 1 + static_cast<Index>(rng.below(256));
    Index const k = 1 + static_cast<Index>(rng.below(256));
    Index const n = 1 + static_cast<Index>(rng.below(256));
    bool const tiles = t % 2 == 1;
    TileConfig const tile{1 + static_cast<Index>(rng.below(32)), 1 + static_cast<Index>(rng.below(32))};
    Index const space = tiles ? pattern_space(Granularity::Tile, m, k, tile) : m;
    Index const dp = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::min<Index>(8, space))));
    Index const b = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(dp)));
    auto const mask = tiles ? tile_mask(dp, b, m, k, tile) : row_mask(dp, b, m);
    auto const w = oracle::random_matrix<double>(m, k, rng);
    auto const x = oracle::random_matrix<double>(k, n, rng);
    auto const got = masked_matmul(w, x, mask).output;
    auto const want = oracle::naive_matmul(oracle::zero_filled(w, mask), x);
    double e = 0.0;
    for (Index i = 0; i < got.size(); ++i) { e = std::max(e, oracle::rel_err(got.data()[i], want.data()[i])); }
    worst = std::max(worst, e);
    bad += e <= 1e-6 ? 0 : 1;
  }
  double const secs = seconds_since(t0);
  return {bad == 0 && secs < 60.0,
          fmt("%d/200 cases within 1e-6 (worst rel %.2e), %.1f s (limit 60 s)", 200 - bad, worst, secs)};
}

Verdict distribution_search()
{
  auto const t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::ostringstream d;
  for (Index n : {8, 64}) {
    for (double p : {0.3, 0.5, 0.7}) {
      SearchConfig cfg;
      cfg.patterns = n;
      cfg.target_rate = p;
      SeededRng rng(1);
      auto const with = search_distribution(cfg, rng);
      cfg.entropy_weight = 0.0;
      auto const without = search_distribution(cfg, rng);
      double const gap = std::abs(with.distribution.achieved_rate - p);
      double const gap0 = std::abs(without.distribution.achieved_rate - p);
      bool const here = gap <= 0.01 && gap0 <= 0.01 && with.entropy > without.entropy;
      ok = ok && here;
      d << fmt("N=%ld p=%.1f |err| %.4f H %.5f>%.5f%s; ", static_cast<long>(n), p, gap, with.entropy,
               without.entropy, here ? "" : " (miss)");
    }
  }
  double const secs = seconds_since(t0);
  d << fmt("%.1f s (limit 30 s)", secs);
  return {ok && secs < 30.0, d.str()};
}

Verdict statistical_equivalence()
{
  Index const rows = 60;
  int const draws = 100000;
  bool ok = true;
  double worst = 0.0;
  std::ostringstream d;
  for (double p : {0.3, 0.5, 0.7}) {
    SearchConfig cfg;
    cfg.patterns = pattern_space(Granularity::Row, rows, 1);
    cfg.target_rate = p;
    SeededRng rng(3);
    auto const dist = search_distribution(cfg, rng).distribution;
    double const pn = neuron_drop_probability(dist);
    bool const exact = pn == global_drop_rate(dist);
    std::vector<int> dropped(static_cast<std::size_t>(rows), 0);
    for (int i = 0; i < draws; ++i) {
      auto const mask = make_mask(sample_pattern(dist, Granularity::Row, rows, 1, {}, rng), rows, 1);
      for (Index r = 0; r < rows; ++r) { dropped[static_cast<std::size_t>(r)] += mask.kept(r) ? 0 : 1; }
    }
    double dev = 0.0;
    for (int c : dropped) { dev = std::max(dev, std::abs(c / static_cast<double>(draws) - pn)); }
    worst = std::max(worst, dev);
    ok = ok && exact && dev <= 0.02;
    d << fmt("p=%.1f p_n %.6f max row dev %.4f p_n==p_g %s; ", p, pn, dev, exact ? "yes" : "NO");
  }
  SeededRng rng(4);
  int unequal = 0;
  for (int t = 0; t < 1000; ++t) {
    Index const n = 1 + static_cast<Index>(rng.below(rows));
    Eigen::VectorXd v(n);
    for (Index i = 0; i < n; ++i) { v(i) = 3.0 * rng.normal(); }
    PatternDistribution dist;
    dist.probs = softmax(v);
    unequal += neuron_drop_probability(dist) == global_drop_rate(dist) ? 0 : 1;
  }
  ok = ok && unequal == 0;
  d << fmt("random distributions with p_n != p_g: %d/1000 (tol: rows +-0.02, exact equality)", unequal);
  return {ok, d.str()};
}

Verdict mac_reduction()
{
  auto const train = synthetic_digits(10000, 7);
  auto const test = synthetic_digits(200, 8);
  bool ok = true;
  std::ostringstream d;
  for (auto mode : {DropoutMode::ApproxRow, DropoutMode::ApproxTile}) {
    for (double p : {0.3, 0.5, 0.7}) {
      MlpSpec spec;
      spec.mode = mode;
      spec.rates = {p};
      spec.tile = {16, 16};
      TrainConfig cfg;
      cfg.epochs = 1;
      cfg.batch_size = 16;
      auto const log = train_mlp<Real>(spec, cfg, train, test);
      auto const m = log.epochs.front().dropout_macs;
      double const ratio = static_cast<double>(m.performed) / static_cast<double>(m.dense);
      double const rel = ratio / (1.0 - p) - 1.0;
      ok = ok && std::abs(rel) <= 0.05;
      d << fmt("%s p=%.1f MACs %.4f of dense (%+.2f%%); ", to_string(mode).c_str(), p, ratio, 100.0 * rel);
    }
  }
  d << "tol 5% of (1-p), 784-256-256-10, one 10k epoch";
  return {ok, d.str()};
}

Verdict gemm_speedup()
{
  int const threads = cli::resolve_threads(0);
  if (threads > 0) { Eigen::setNbThreads(threads); }
  std::vector<double> speed;
  for (double keep : {1.0, 0.5, 0.25}) {
    speed.push_back(cli::bench_masked_gemm(2048, 2048, 2048, Granularity::Row, keep, 5, {}, 1).speedup());
  }
  bool const monotone = speed[0] < speed[1] && speed[1] < speed[2];
  return {speed[1] >= 1.3 && monotone,
          fmt("2048^3 row masks, %d thread(s): keep 1.0 %.2fx, 0.5 %.2fx (floor 1.3x), 0.25 %.2fx; monotone %s",
              Eigen::nbThreads(), speed[0], speed[1], speed[2], monotone ? "yes" : "no")};
}

Verdict mlp_parity()
{
  auto const t0 = std::chrono::steady_clock::now();
  auto const train = synthetic_digits(10000, 7);
  auto const test = synthetic_digits(2000, mix64(7));
  double conventional = 0.0;
  double approx = 0.0;
  std::ostringstream d;
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = seed;
    MlpSpec spec;
    spec.rates = {0.5};
    spec.mode = DropoutMode::Bernoulli;
    double const b = train_mlp<Real>(spec, cfg, train, test).final_metric();
    spec.mode = DropoutMode::ApproxRow;
    double const a = train_mlp<Real>(spec, cfg, train, test).final_metric();
    conventional += b / 3.0;
    approx += a / 3.0;
    d << fmt("seed %lu bernoulli %.4f approx-row %.4f; ", static_cast<unsigned long>(seed), b, a);
  }
  double const gap = 100.0 * (conventional - approx);
  double const secs = seconds_since(t0);
  d << fmt("mean gap %.2f pp (limit 1.0), %.0f s (limit 600 s)", gap, secs);
  return {gap <= 1.0 && secs < 600.0, d.str()};
}

Verdict gradient_checks()
{
  auto const reports = oracle::all_gradient_checks(11);
  int failed = 0;
  int fewest = std::numeric_limits<int>::max();
  double worst = 0.0;
  std::string failing;
  for (auto const &r : reports) {
    fewest = std::min(fewest, r.checked);
    worst = std::max(worst, r.worst);
    if (!r.ok(20)) {
      ++failed;
      failing += " " + r.name;
    }
  }
  return {failed == 0 && !reports.empty(),
          fmt("%zu layer/mode checks, %d failed%s; >= %d params each (min 20), worst rel %.2e (tol 1e-4)",
              reports.size(), failed, failing.c_str(), fewest, worst)};
}

Verdict skew_normal()
{
  auto quad = [](SkewNormalParams const &p, std::function<double(double)> const &g) {
    return oracle::simpson([&](double y) { return g(y) * skew_pdf(y, p); }, p.location - 10 * p.scale,
                           p.location + 10 * p.scale, 40000);
  };
  double mass = 0.0;
  double moment = 0.0;
  for (double shape : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
    SkewNormalParams const p{0.4, 1.3, shape};
    mass = std::max(mass, std::abs(quad(p, [](double) { return 1.0; }) - 1.0));
    auto const m = skew_moments(p);
    double const mean = quad(p, [](double y) { return y; });
    double const var = quad(p, [&](double y) { return (y - mean) * (y - mean); });
    moment = std::max({moment, std::abs(m.mean - mean), std::abs(m.variance - var)});
  }
  SeededRng rng(8);
  double trip = 0.0;
  for (int t = 0; t < 1000; ++t) {
    double const mean = 200.0 * rng.uniform() - 100.0;
    double const sd = 0.01 + 10.0 * rng.uniform();
    double const shape = 20.0 * rng.uniform() - 10.0;
    auto const m = skew_moments(solve_location_scale(mean, sd, shape));
    trip = std::max({trip, std::abs(m.mean - mean), std::abs(m.variance - sd * sd)});
  }
  return {mass <= 1e-6 && moment <= 1e-6 && trip <= 1e-9,
          fmt("|mass-1| %.1e, moment err %.1e (tol 1e-6); round trip %.1e (tol 1e-9)", mass, moment, trip)};
}

Verdict bsdp_balance()
{
  SeededRng rng(910);
  int bad = 0;
  Index widest = 0;
  for (int t = 0; t < 1000; ++t) {
    Index const rows = 4 + static_cast<Index>(rng.below(80));
    Index const cols = 4 + static_cast<Index>(rng.below(80));
    TileConfig const tile{1 + static_cast<Index>(rng.below(4)), 1 + static_cast<Index>(rng.below(4))};
    Index const rr = 1 + static_cast<Index>(rng.below(8));
    Index const rc = 1 + static_cast<Index>(rng.below(8));
    double const m = 0.3 * rng.uniform();
    double const n = m + 1e-3 + (1.0 - m - 1e-3) * rng.uniform();
    Index const cells = ((rows + rr - 1) / rr) * ((cols + rc - 1) / rc);
    std::vector<Sensitivity> labels(static_cast<std::size_t>(cells));
    double const share = rng.uniform();
    for (auto &l : labels) { l = rng.uniform() < share ? Sensitivity::Sensitive : Sensitivity::Insensitive; }
    auto const mask = SensitivityMask::from_labels(rows, cols, rr, rc, labels, m, n);
    auto const counts = kept_per_group(bsdp_select(mask, rows, cols, tile, rng));
    auto const [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    widest = std::max(widest, *hi - *lo);
    bad += *hi - *lo <= 1 ? 0 : 1;
  }
  return {bad == 0, fmt("%d/1000 masks balanced; widest per-group spread %ld (limit 1)", 1000 - bad,
                        static_cast<long>(widest))};
}

Verdict ablation_direction()
{
  auto const train = synthetic_digits(10000, 7);
  auto const test = synthetic_digits(2000, mix64(7));
  TrainConfig cfg;
  cfg.epochs = 5;
  CnnSpec spec;
  auto const schedule = constant_schedule(cfg.epochs, 0.0);
  double const base = train_cnn<Real>(spec, cfg, train, test, schedule).final_metric();
  auto harm = [&](int part) {
    CnnSpec s = spec;
    s.ablation = {AblationKind::MagnitudePart, 0.4, 4, part};
    return base - train_cnn<Real>(s, cfg, train, test, schedule).final_metric();
  };
  double const largest = harm(1);
  double const smallest = harm(4);
  return {smallest < largest,
          fmt("baseline acc %.4f; 40%% of smallest quartile harms %.4f, of largest quartile %.4f", base, smallest,
              largest)};
}

struct Criterion
{
  int id;
  char const *name;
  std::function<Verdict()> run;
};

} // namespace

int main(int argc, char **argv)
{
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("criteria", only, "Criterion numbers to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  std::vector<Criterion> const all{
    {1, "masked-gemm oracle equivalence", masked_gemm_oracle},
    {2, "distribution search", distribution_search},
    {3, "statistical dropout equivalence", statistical_equivalence},
    {4, "MAC reduction", mac_reduction},
    {5, "masked GEMM speedup", gemm_speedup},
    {6, "MLP accuracy parity", mlp_parity},
    {7, "gradient checks", gradient_checks},
    {8, "skew-normal module", skew_normal},
    {9, "BSDP balance", bsdp_balance},
    {10, "sensitivity ablation direction", ablation_direction},
  };
  std::set<int> const wanted(only.begin(), only.end());
  int failures = 0;
  for (auto const &c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) { continue; }
    Verdict v;
    try {
      v = c.run();
    } catch (std::exception const &e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::printf("%s %d %s: %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

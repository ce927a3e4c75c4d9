#include "oracles.hpp"

#include "structdrop/error.hpp"
#include "structdrop/schedule.hpp"

#include <doctest.h>

#include <numeric>
#include <sstream>

using namespace structdrop;

namespace {

double quad(SkewNormalParams const &p, std::function<double(double)> const &g)
{
  return oracle::simpson([&](double y) { return g(y) * skew_pdf(y, p); }, p.location - 10 * p.scale,
                         p.location + 10 * p.scale, 40000);
}

ScheduleConfig reference_config()
{
  ScheduleConfig c;
  c.epochs = 100;
  c.floor = 0.1;
  c.ceiling = 0.6;
  c.mean_ratio = 0.4;
  c.shape = 3.0;
  return c;
}

int sign_changes(std::vector<double> const &v)
{
  int changes = 0;
  int prev = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    double const d = v[i] - v[i - 1];
    int const s = d > 0 ? 1 : (d < 0 ? -1 : 0);
    if (s == 0) { continue; }
    if (prev != 0 && s != prev) { ++changes; }
    prev = s;
  }
  return changes;
}

} // namespace

TEST_CASE("skew pdf examples")
{
  CHECK(skew_pdf(0.0, {}) == doctest::Approx(1.0 / std::sqrt(2.0 * std::numbers::pi)).epsilon(1e-15));
  SkewNormalParams const p{1.5, 0.7, 0.0};
  for (double y = -3.0; y <= 5.0; y += 0.25) {
    double const z = (y - p.location) / p.scale;
    CHECK(skew_pdf(y, p) == doctest::Approx(std::exp(-0.5 * z * z) / (p.scale * std::sqrt(2 * std::numbers::pi))));
  }
  CHECK_THROWS_AS(skew_pdf(0.0, {0.0, 0.0, 1.0}), ParameterError);
  CHECK(normal_cdf(0.0) == 0.5);
  CHECK(normal_cdf(-40.0) >= 0.0);
  CHECK(std::abs(normal_cdf(1.959963984540054) - 0.975) < 1e-12);
}

TEST_CASE("skew pdf integrates to one")
{
  for (double shape : {-5.0, -3.0, -1.0, 0.0, 1.0, 2.0, 3.0, 10.0}) {
    for (double scale : {0.3, 1.0, 12.0}) {
      SkewNormalParams const p{-2.0, scale, shape};
      CAPTURE(shape);
      CHECK(std::abs(quad(p, [](double) { return 1.0; }) - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("closed-form moments agree with quadrature")
{
  for (double shape : {-3.0, -1.0, 0.0, 1.0, 2.0, 3.0}) {
    SkewNormalParams const p{0.5, 1.7, shape};
    auto const m = skew_moments(p);
    double const mean = quad(p, [](double y) { return y; });
    double const var = quad(p, [&](double y) { return (y - mean) * (y - mean); });
    CAPTURE(shape);
    CHECK(std::abs(m.mean - mean) <= 1e-6);
    CHECK(std::abs(m.variance - var) <= 1e-6);
  }
  auto const flat = skew_moments({2.0, 3.0, 0.0});
  CHECK(flat.mean == 2.0);
  CHECK(flat.variance == 9.0);
  CHECK(skew_mean_factor(1e8) == doctest::Approx(std::sqrt(2.0 / std::numbers::pi)));
  CHECK(skew_variance_factor(1.0) == doctest::Approx(1.0 - 1.0 / std::numbers::pi));
}

TEST_CASE("solve_location_scale round trips")
{
  auto const zero = solve_location_scale(3.0, 0.5, 0.0);
  CHECK(zero.location == 3.0);
  CHECK(zero.scale == 0.5);

  auto const one = solve_location_scale(0.0, 1.0, 1.0);
  CHECK(one.scale == doctest::Approx(1.0 / std::sqrt(skew_variance_factor(1.0))));
  CHECK(one.location == doctest::Approx(-skew_mean_factor(1.0) * one.scale));

  auto const three = solve_location_scale(0.0, 0.2, 3.0);
  CHECK(three.scale == doctest::Approx(0.2 / std::sqrt(1.0 - 2.0 / std::numbers::pi * 0.9)));

  SeededRng rng(1);
  for (int t = 0; t < 500; ++t) {
    double const mean = 20.0 * rng.uniform() - 10.0;
    double const sd = 0.01 + 5.0 * rng.uniform();
    double const shape = 20.0 * rng.uniform() - 10.0;
    auto const m = skew_moments(solve_location_scale(mean, sd, shape));
    CHECK(std::abs(m.mean - mean) <= 1e-9);
    CHECK(std::abs(m.variance - sd * sd) <= 1e-9);
  }
  CHECK_THROWS_AS(solve_location_scale(0.0, 0.0, 1.0), ParameterError);
  CHECK_THROWS_AS(solve_location_scale(0.0, 1.0, std::numeric_limits<double>::infinity()), ParameterError);
}

TEST_CASE("standard mode maximizes the density")
{
  for (double shape : {-4.0, 0.0, 0.5, 3.0, 8.0}) {
    double const z = skew_standard_mode(shape);
    SkewNormalParams const unit{0.0, 1.0, shape};
    CHECK(skew_pdf(z, unit) >= skew_pdf(z - 1e-4, unit));
    CHECK(skew_pdf(z, unit) >= skew_pdf(z + 1e-4, unit));
  }
  CHECK(std::abs(skew_standard_mode(0.0)) < 1e-12);
}

TEST_CASE("reference schedule: unimodal with low ends, clamped at the ceiling")
{
  // With both ends held near p_min, the excess area under any such curve is
  // below 0.45 of its peak, so a mean excess of 0.3 under a peak excess of 0.5
  // cannot be met: the amplitude stops at p_max.
  auto const cfg = reference_config();
  auto const s = build_schedule(cfg);
  REQUIRE(s.epochs() == 100);
  CHECK(s.clamped);
  CHECK(sign_changes(s.ratios) == 1);
  CHECK(*std::max_element(s.ratios.begin(), s.ratios.end()) == doctest::Approx(cfg.ceiling).epsilon(1e-12));
  double const mean = std::accumulate(s.ratios.begin(), s.ratios.end(), 0.0) / 100.0;
  CHECK(s.achieved_mean == doctest::Approx(mean).epsilon(1e-12));
  CHECK(mean < cfg.mean_ratio);
  CHECK(s.ratio(1) <= 1.2 * cfg.floor);
  CHECK(s.ratio(100) <= 1.2 * cfg.floor);
  for (double r : s.ratios) {
    CHECK(r >= cfg.floor);
    CHECK(r <= cfg.ceiling + 1e-15);
  }
  auto const peak = std::max_element(s.ratios.begin(), s.ratios.end()) - s.ratios.begin() + 1;
  CHECK(std::abs(static_cast<double>(peak) - 40.0) <= 1.0);
}

TEST_CASE("amplitude matches bisection oracles")
{
  auto mean_gap = [](RatioSchedule const &s, double c) {
    double acc = 0.0;
    for (int e = 1; e <= s.config.epochs; ++e) { acc += s.config.floor + c * skew_pdf(e, s.params); }
    return acc / s.config.epochs - s.config.mean_ratio;
  };
  auto peak_gap = [](RatioSchedule const &s, double c) {
    double top = 0.0;
    for (int e = 1; e <= s.config.epochs; ++e) { top = std::max(top, s.config.floor + c * skew_pdf(e, s.params)); }
    return top - s.config.ceiling;
  };

  auto cfg = reference_config();
  cfg.mean_ratio = 0.25;
  auto const free = build_schedule(cfg);
  REQUIRE_FALSE(free.clamped);
  double const c = oracle::bisect([&](double x) { return mean_gap(free, x); }, 0.0, 1e3);
  CHECK(oracle::rel_err(free.amplitude, c) <= 1e-9);
  for (int e = 1; e <= cfg.epochs; ++e) {
    CHECK(std::abs(free.ratio(e) - (cfg.floor + c * skew_pdf(e, free.params))) <= 1e-9);
  }
  double const mean = std::accumulate(free.ratios.begin(), free.ratios.end(), 0.0) / cfg.epochs;
  CHECK(std::abs(mean - 0.25) <= 1e-6);

  auto const capped = build_schedule(reference_config());
  double const cap = oracle::bisect([&](double x) { return peak_gap(capped, x); }, 0.0, 1e3);
  CHECK(oracle::rel_err(capped.amplitude, cap) <= 1e-9);
}

TEST_CASE("schedules are unimodal and meet the mean for many configurations")
{
  SeededRng rng(2);
  int unclamped = 0;
  for (int t = 0; t < 200; ++t) {
    ScheduleConfig c;
    c.epochs = 5 + static_cast<int>(rng.below(200));
    c.floor = 0.3 * rng.uniform();
    c.ceiling = c.floor + (1.0 - c.floor) * (0.2 + 0.8 * rng.uniform());
    c.mean_ratio = c.floor + (c.ceiling - c.floor) * (0.05 + 0.5 * rng.uniform());
    c.shape = 6.0 * rng.uniform();
    c.mode_fraction = 0.2 + 0.6 * rng.uniform();
    auto const s = build_schedule(c);
    CAPTURE(t);
    CHECK(sign_changes(s.ratios) <= 1);
    for (double r : s.ratios) {
      CHECK(r >= 0.0);
      CHECK(r <= c.ceiling + 1e-15);
    }
    double const mean = std::accumulate(s.ratios.begin(), s.ratios.end(), 0.0) / c.epochs;
    CHECK(s.achieved_mean == doctest::Approx(mean).epsilon(1e-12));
    if (!s.clamped) {
      ++unclamped;
      CHECK(std::abs(mean - c.mean_ratio) <= 1e-6);
    } else {
      CHECK(mean <= c.mean_ratio);
    }
  }
  CHECK(unclamped > 100);
}

TEST_CASE("constant and symmetric schedules")
{
  ScheduleConfig c;
  c.epochs = 12;
  c.floor = c.ceiling = c.mean_ratio = 0.3;
  auto const flat = build_schedule(c);
  for (double r : flat.ratios) { CHECK(r == 0.3); }

  auto const zero = constant_schedule(7, 0.0);
  CHECK(zero.epochs() == 7);
  CHECK(zero.ratio(7) == 0.0);
  CHECK_THROWS_AS(zero.ratio(8), ParameterError);
  CHECK_THROWS_AS(zero.ratio(0), ParameterError);

  ScheduleConfig sym = reference_config();
  sym.shape = 0.0;
  sym.mode_fraction = 0.5;
  auto const bell = build_schedule(sym);
  for (int e = 1; e < sym.epochs; ++e) { CHECK(std::abs(bell.ratio(e) - bell.ratio(sym.epochs - e)) <= 1e-12); }
}

TEST_CASE("schedule parameter errors")
{
  auto c = reference_config();
  c.mean_ratio = 0.7;
  CHECK_THROWS_AS(build_schedule(c), ParameterError);
  c = reference_config();
  c.floor = 0.7;
  CHECK_THROWS_AS(build_schedule(c), ParameterError);
  c = reference_config();
  c.epochs = 0;
  CHECK_THROWS_AS(build_schedule(c), ParameterError);
  c = reference_config();
  c.mode_fraction = 1.0;
  CHECK_THROWS_AS(build_schedule(c), ParameterError);
  CHECK_THROWS_AS(constant_schedule(3, 1.5), ParameterError);
}

TEST_CASE("csv export")
{
  auto const s = constant_schedule(3, 0.25);
  std::ostringstream out;
  write_schedule_csv(out, s);
  CHECK(out.str() == "epoch,ratio\n1,0.25\n2,0.25\n3,0.25\n");

  auto const r = build_schedule(reference_config());
  std::ostringstream full;
  write_schedule_csv(full, r);
  std::istringstream in(full.str());
  std::string line;
  std::getline(in, line);
  int e = 0;
  while (std::getline(in, line)) {
    ++e;
    auto const comma = line.find(',');
    CHECK(std::stoi(line.substr(0, comma)) == e);
    CHECK(std::stod(line.substr(comma + 1)) == r.ratio(e));
  }
  CHECK(e == 100);
}

#include "structdrop/schedule.hpp"

#include "structdrop/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>

namespace structdrop {

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double skew_pdf(double y, SkewNormalParams const &params)
{
  if (!(params.scale > 0.0)) { throw ParameterError("skew_pdf: scale must be > 0"); }
  double const z = (y - params.location) / params.scale;
  return 2.0 / params.scale * normal_pdf(z) * normal_cdf(params.shape * z);
}

double skew_mean_factor(double shape)
{
  return std::sqrt(2.0 / std::numbers::pi) * shape / std::sqrt(1.0 + shape * shape);
}

double skew_variance_factor(double shape)
{
  return 1.0 - 2.0 / std::numbers::pi * shape * shape / (1.0 + shape * shape);
}

SkewMoments skew_moments(SkewNormalParams const &params)
{
  if (!(params.scale > 0.0)) { throw ParameterError("skew_moments: scale must be > 0"); }
  return {params.location + skew_mean_factor(params.shape) * params.scale,
          skew_variance_factor(params.shape) * params.scale * params.scale};
}

SkewNormalParams solve_location_scale(double target_mean, double target_std, double shape)
{
  if (!(target_std > 0.0)) { throw ParameterError("solve_location_scale: target std must be > 0"); }
  if (!std::isfinite(shape)) { throw ParameterError("solve_location_scale: shape must be finite"); }
  double const sigma = target_std / std::sqrt(skew_variance_factor(shape));
  return {target_mean - skew_mean_factor(shape) * sigma, sigma, shape};
}

double skew_standard_mode(double shape)
{
  // The log-density -z^2/2 + log Phi(shape z) is concave; bisect on its slope.
  auto slope = [shape](double z) {
    double const cdf = normal_cdf(shape * z);
    if (cdf == 0.0) { return std::numeric_limits<double>::infinity(); }
    return -z + shape * normal_pdf(shape * z) / cdf;
  };
  double lo = -3.0;
  double hi = 3.0;
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    double const mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) { break; }
    (slope(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double RatioSchedule::ratio(int epoch) const
{
  if (epoch < 1 || epoch > epochs()) { throw ParameterError("RatioSchedule: epoch out of range"); }
  return ratios[static_cast<std::size_t>(epoch - 1)];
}

namespace {

double mean_of(std::vector<double> const &v)
{
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

SkewNormalParams params_for_spread(double spread, double mode_epoch, double shape)
{
  SkewNormalParams p = solve_location_scale(0.0, spread, shape);
  p.location = mode_epoch - p.scale * skew_standard_mode(shape);
  return p;
}

} // namespace

RatioSchedule constant_schedule(int epochs, double ratio)
{
  if (epochs < 0) { throw ParameterError("schedule: epochs must be >= 0"); }
  if (!(ratio >= 0.0 && ratio <= 1.0)) { throw ParameterError("schedule: ratio must be in [0, 1]"); }
  RatioSchedule s;
  s.config.epochs = epochs;
  s.config.mean_ratio = ratio;
  s.config.floor = ratio;
  s.config.ceiling = ratio;
  s.ratios.assign(static_cast<std::size_t>(epochs), ratio);
  s.achieved_mean = ratio;
  return s;
}

RatioSchedule build_schedule(ScheduleConfig const &cfg)
{
  if (cfg.epochs < 1) { throw ParameterError("schedule: epochs must be >= 1"); }
  if (!(cfg.floor >= 0.0 && cfg.floor <= cfg.ceiling && cfg.ceiling <= 1.0)) {
    throw ParameterError("schedule: need 0 <= p_min <= p_max <= 1");
  }
  if (cfg.mean_ratio > cfg.ceiling) { throw ParameterError("schedule: mean ratio exceeds p_max"); }
  if (cfg.mean_ratio < cfg.floor) { throw ParameterError("schedule: mean ratio below p_min"); }
  if (!std::isfinite(cfg.shape)) { throw ParameterError("schedule: shape must be finite"); }
  if (!(cfg.mode_fraction > 0.0 && cfg.mode_fraction < 1.0)) {
    throw ParameterError("schedule: mode fraction must be in (0, 1)");
  }

  if (cfg.mean_ratio == cfg.floor || cfg.epochs < 3) {
    RatioSchedule s = constant_schedule(cfg.epochs, cfg.mean_ratio);
    s.config = cfg;
    return s;
  }

  int const E = cfg.epochs;
  double const mode_epoch = cfg.mode_fraction * E;
  double const headroom = cfg.ceiling - cfg.floor;
  double const end_slack = cfg.floor > 0.0 ? 0.2 * cfg.floor : 0.01;
  double const end_ratio = std::min(1.0, end_slack / headroom);

  auto end_fraction = [&](double spread) {
    SkewNormalParams const p = params_for_spread(spread, mode_epoch, cfg.shape);
    double const peak = skew_pdf(mode_epoch, p);
    return std::max(skew_pdf(1.0, p), skew_pdf(static_cast<double>(E), p)) / peak;
  };
  // Widest spread whose end epochs stay below end_ratio of the peak.
  double const end_bound = end_ratio * (1.0 - 1e-9);
  double lo = 1e-6 * E;
  double hi = 4.0 * E;
  for (int it = 0; it < 200; ++it) {
    double const mid = 0.5 * (lo + hi);
    (end_fraction(mid) <= end_bound ? lo : hi) = mid;
  }

  RatioSchedule s;
  s.config = cfg;
  s.params = params_for_spread(lo, mode_epoch, cfg.shape);
  std::vector<double> density(static_cast<std::size_t>(E));
  for (int e = 1; e <= E; ++e) { density[e - 1] = skew_pdf(static_cast<double>(e), s.params); }
  double const mean_density = mean_of(density);
  double const max_density = *std::max_element(density.begin(), density.end());

  s.amplitude = (cfg.mean_ratio - cfg.floor) / mean_density;
  double const cap = headroom / max_density;
  if (s.amplitude > cap) {
    s.amplitude = cap;
    s.clamped = true;
  }
  s.ratios.resize(density.size());
  for (std::size_t i = 0; i < density.size(); ++i) {
    s.ratios[i] = std::clamp(cfg.floor + s.amplitude * density[i], 0.0, 1.0);
  }
  s.achieved_mean = mean_of(s.ratios);
  return s;
}

void write_schedule_csv(std::ostream &out, RatioSchedule const &schedule)
{
  out << "epoch,ratio\n";
  char buf[64];
  for (int e = 1; e <= schedule.epochs(); ++e) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", e, schedule.ratio(e));
    out << buf;
  }
}

} // namespace structdrop

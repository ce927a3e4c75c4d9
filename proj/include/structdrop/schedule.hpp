#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace structdrop {

struct SkewNormalParams
{
  double location = 0.0; ///< mu
  double scale = 1.0;    ///< sigma > 0
  double shape = 0.0;    ///< lambda
};

struct SkewMoments
{
  double mean = 0.0;
  double variance = 0.0;
};

double normal_pdf(double z);
/// Standard normal CDF through std::erfc.
double normal_cdf(double z);

/// 2/sigma * phi(z) * Phi(lambda z), z = (y - mu)/sigma.
double skew_pdf(double y, SkewNormalParams const &params);

/// mu_0(lambda) = sqrt(2/pi) lambda / sqrt(1 + lambda^2).
double skew_mean_factor(double shape);
/// sigma_0^2(lambda) = 1 - mu_0(lambda)^2.
double skew_variance_factor(double shape);
SkewMoments skew_moments(SkewNormalParams const &params);

/// Invert skew_moments for a given shape.
SkewNormalParams solve_location_scale(double target_mean, double target_std, double shape);

/// argmax_z of the standard (mu = 0, sigma = 1) skew-normal density.
double skew_standard_mode(double shape);

struct ScheduleConfig
{
  int epochs = 1;
  double mean_ratio = 0.0; ///< target mean over epochs
  double floor = 0.0;      ///< p_min
  double ceiling = 1.0;    ///< p_max
  double shape = 3.0;      ///< lambda
  double mode_fraction = 0.4;
};

/// Per-epoch dropout ratio p(e) = p_min + c * f_Y(e).
///
/// The density's mode sits at mode_fraction * E. Its spread is the widest for
/// which both end epochs stay within 1.2x p_min (or within 0.01 of zero when
/// p_min = 0) even at the ceiling; c then meets the mean target, shrunk if the
/// peak would pass p_max, in which case `clamped` is set and achieved_mean
/// reports the mean actually obtained.
struct RatioSchedule
{
  ScheduleConfig config;
  SkewNormalParams params;
  double amplitude = 0.0; ///< c
  double achieved_mean = 0.0;
  bool clamped = false;
  std::vector<double> ratios; ///< ratios[e-1] = p(e)

  double ratio(int epoch) const;
  int epochs() const { return static_cast<int>(ratios.size()); }
};

RatioSchedule build_schedule(ScheduleConfig const &cfg);
RatioSchedule constant_schedule(int epochs, double ratio);

/// "epoch,ratio" rows.
void write_schedule_csv(std::ostream &out, RatioSchedule const &schedule);

} // namespace structdrop

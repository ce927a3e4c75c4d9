#include "structdrop/distribution.hpp"

#include "structdrop/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace structdrop {

void PatternDistribution::validate() const
{
  if (probs.size() < 1) { throw ParameterError("PatternDistribution: empty"); }
  if ((probs.array() < 0.0).any() || !probs.allFinite()) {
    throw ParameterError("PatternDistribution: probabilities must be finite and >= 0");
  }
  if (std::abs(probs.sum() - 1.0) > 1e-9) { throw ParameterError("PatternDistribution: probabilities must sum to 1"); }
}

Index SearchConfig::support() const { return std::max<Index>(1, std::min(patterns, support_cap)); }

void SearchConfig::validate() const
{
  if (patterns < 1) { throw ParameterError("search: pattern count must be >= 1"); }
  if (support_cap < 1) { throw ParameterError("search: support cap must be >= 1"); }
  if (!(learning_rate > 0.0)) { throw ParameterError("search: learning rate must be > 0"); }
  if (max_steps < 1) { throw ParameterError("search: max_steps must be >= 1"); }
  if (entropy_weight < 0.0) { throw ParameterError("search: entropy weight must be >= 0"); }
  if (!(target_rate >= 0.0 && target_rate < 1.0)) { throw ParameterError("search: target rate must be in [0, 1)"); }
  Index const n = support();
  double const reachable = static_cast<double>(n - 1) / static_cast<double>(n);
  bool const feasible = target_rate <= reachable;
  if (!feasible) {
    throw ParameterError("search: target rate " + std::to_string(target_rate) +
                         " is unreachable with periods up to " + std::to_string(n) + " (max " +
                         std::to_string(reachable) + ")");
  }
}

Eigen::VectorXd drop_rate_vector(Index n)
{
  if (n < 1) { throw ParameterError("drop_rate_vector: n must be >= 1"); }
  Eigen::VectorXd pu(n);
  for (Index i = 1; i <= n; ++i) { pu(i - 1) = static_cast<double>(i - 1) / static_cast<double>(i); }
  return pu;
}

namespace {

Eigen::VectorXd log_softmax(Eigen::VectorXd const &v)
{
  double const mx = v.maxCoeff();
  double const lse = mx + std::log((v.array() - mx).exp().sum());
  return v.array() - lse;
}

} // namespace

Eigen::VectorXd softmax(Eigen::VectorXd const &logits) { return log_softmax(logits).array().exp(); }

double entropy(Eigen::VectorXd const &probs)
{
  double h = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    if (probs(i) > 0.0) { h -= probs(i) * std::log(probs(i)); }
  }
  return h;
}

double search_loss(Eigen::VectorXd const &logits, double target_rate, double entropy_weight)
{
  Eigen::VectorXd const logd = log_softmax(logits);
  Eigen::VectorXd const d = logd.array().exp();
  Eigen::VectorXd const pu = drop_rate_vector(logits.size());
  double const gap = d.dot(pu) - target_rate;
  double const h = -(d.array() * logd.array()).sum();
  return gap * gap - entropy_weight * h;
}

Eigen::VectorXd search_gradient(Eigen::VectorXd const &logits, double target_rate, double entropy_weight)
{
  Eigen::VectorXd const logd = log_softmax(logits);
  Eigen::VectorXd const d = logd.array().exp();
  Eigen::VectorXd const pu = drop_rate_vector(logits.size());
  double const gap = d.dot(pu) - target_rate;
  // dL/dd_i, then through the softmax Jacobian diag(d) - d d^T.
  Eigen::VectorXd const g = 2.0 * gap * pu.array() + entropy_weight * (logd.array() + 1.0);
  return d.array() * (g.array() - d.dot(g));
}

SearchResult search_distribution(SearchConfig const &cfg, SeededRng & /*rng*/)
{
  cfg.validate();
  Index const n = cfg.support();
  SearchResult result;

  if (n == 1) {
    result.distribution.probs = Eigen::VectorXd::Ones(1);
    result.distribution.target_rate = cfg.target_rate;
    result.distribution.achieved_rate = 0.0;
    result.loss = 0.0;
    return result;
  }

  Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd best = v;
  double best_loss = std::numeric_limits<double>::infinity();
  double prev = std::numeric_limits<double>::quiet_NaN();
  result.status = SearchStatus::MaxSteps;

  for (int step = 0; step < cfg.max_steps; ++step) {
    double const loss = search_loss(v, cfg.target_rate, cfg.entropy_weight);
    if (cfg.record_history) { result.loss_history.push_back(loss); }
    if (loss < best_loss) {
      best_loss = loss;
      best = v;
    }
    result.steps = step + 1;
    if (step > 0 && std::abs(prev - loss) < cfg.convergence_tol) {
      result.status = SearchStatus::Converged;
      break;
    }
    prev = loss;
    v -= cfg.learning_rate * search_gradient(v, cfg.target_rate, cfg.entropy_weight);
  }

  result.distribution.probs = softmax(best);
  result.distribution.target_rate = cfg.target_rate;
  result.distribution.achieved_rate = global_drop_rate(result.distribution);
  result.loss = best_loss;
  result.entropy = entropy(result.distribution.probs);
  return result;
}

DropoutPattern sample_pattern(PatternDistribution const &dist, Granularity kind, Index rows, Index cols,
                              TileConfig tile, SeededRng &rng)
{
  Index const space = pattern_space(kind, rows, cols, tile);
  if (dist.patterns() > space) {
    throw ParameterError("sample_pattern: distribution has more periods (" + std::to_string(dist.patterns()) +
                         ") than the matrix admits (" + std::to_string(space) + ")");
  }
  double const u = rng.uniform();
  double acc = 0.0;
  Index period = dist.patterns();
  for (Index i = 0; i < dist.patterns(); ++i) {
    acc += dist.probs(i);
    if (u < acc) {
      period = i + 1;
      break;
    }
  }
  // Guard against rounding in the cumulative sum landing on a zero-probability tail.
  while (period > 1 && dist.probs(period - 1) == 0.0) { --period; }
  auto const bias = static_cast<Index>(rng.between(1, period));
  return DropoutPattern{kind, period, bias};
}

double neuron_drop_probability(PatternDistribution const &dist)
{
  double pn = 0.0;
  for (Index i = 1; i <= dist.patterns(); ++i) {
    // Unit u = i sits in the first full period; count the biases that drop it.
    Index dropped = 0;
    for (Index b = 1; b <= i; ++b) {
      if ((i - b) % i != 0) { ++dropped; }
    }
    double const pb = static_cast<double>(dropped) / static_cast<double>(i);
    pn += pb * dist.probs(i - 1);
  }
  return pn;
}

double global_drop_rate(PatternDistribution const &dist)
{
  Eigen::VectorXd const pu = drop_rate_vector(dist.patterns());
  double pg = 0.0;
  for (Index i = 0; i < dist.patterns(); ++i) { pg += dist.probs(i) * pu(i); }
  return pg;
}

nlohmann::json to_json(PatternDistribution const &dist)
{
  std::vector<double> probs(dist.probs.data(), dist.probs.data() + dist.probs.size());
  return {{"target_rate", dist.target_rate}, {"probs", probs}, {"achieved_rate", dist.achieved_rate}};
}

PatternDistribution distribution_from_json(nlohmann::json const &j)
{
  PatternDistribution dist;
  try {
    auto const probs = j.at("probs").get<std::vector<double>>();
    dist.probs = Eigen::Map<Eigen::VectorXd const>(probs.data(), static_cast<Index>(probs.size()));
    dist.target_rate = j.at("target_rate").get<double>();
    dist.achieved_rate = j.at("achieved_rate").get<double>();
  } catch (nlohmann::json::exception const &e) {
    throw FormatError(std::string("distribution json: ") + e.what());
  }
  dist.validate();
  return dist;
}

} // namespace structdrop

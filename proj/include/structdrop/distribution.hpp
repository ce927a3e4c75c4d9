#pragma once

#include "structdrop/patterns.hpp"
#include "structdrop/rng.hpp"
#include "structdrop/types.hpp"

#include <json.hpp>

#include <vector>

namespace structdrop {

/// Probability k_i of choosing period i (i = 1..N) and the rate it attains.
struct PatternDistribution
{
  Eigen::VectorXd probs;
  double target_rate = 0.0;
  double achieved_rate = 0.0;

  Index patterns() const { return probs.size(); }
  void validate() const;
};

struct SearchConfig
{
  Index patterns = 1;           ///< dp_max of the target matrix
  double target_rate = 0.0;
  double entropy_weight = 1e-3; ///< lambda_H
  double learning_rate = 1.0;
  int max_steps = 10000;
  double convergence_tol = 1e-10;
  /// Periods above this are not searched (their drop rates saturate near 1).
  Index support_cap = 64;
  bool record_history = false;

  Index support() const;
  void validate() const;
};

enum class SearchStatus
{
  Converged,
  MaxSteps ///< best-so-far distribution returned
};

struct SearchResult
{
  PatternDistribution distribution;
  SearchStatus status = SearchStatus::Converged;
  int steps = 0;
  double loss = 0.0;
  double entropy = 0.0;
  std::vector<double> loss_history;
};

/// p_u[i-1] = (i-1)/i.
Eigen::VectorXd drop_rate_vector(Index n);

double entropy(Eigen::VectorXd const &probs);
Eigen::VectorXd softmax(Eigen::VectorXd const &logits);

/// (d^T p_u - p)^2 - lambda_H * H(d) with d = softmax(logits).
double search_loss(Eigen::VectorXd const &logits, double target_rate, double entropy_weight);
/// Analytic gradient of search_loss with respect to the logits.
Eigen::VectorXd search_gradient(Eigen::VectorXd const &logits, double target_rate, double entropy_weight);

/// Full-batch gradient descent on the logits, starting from zero (uniform).
/// Throws ParameterError when target_rate > (N-1)/N.
SearchResult search_distribution(SearchConfig const &cfg, SeededRng &rng);

/// Draw period i with probability k_i, then a uniform bias in {1..i}.
DropoutPattern sample_pattern(PatternDistribution const &dist, Granularity kind, Index rows, Index cols,
                              TileConfig tile, SeededRng &rng);

/// Per-unit drop probability: sum_i k_i * P(unit dropped | period i), with the
/// conditional probability counted over the i equally likely biases.
double neuron_drop_probability(PatternDistribution const &dist);
/// Expected fraction of dropped units: d^T p_u.
double global_drop_rate(PatternDistribution const &dist);

nlohmann::json to_json(PatternDistribution const &dist);
PatternDistribution distribution_from_json(nlohmann::json const &j);

} // namespace structdrop

#pragma once

#include "structdrop/distribution.hpp"
#include "structdrop/train/data.hpp"
#include "structdrop/train/layers.hpp"
#include "structdrop/train/training_log.hpp"

#include <cstdint>
#include <vector>

namespace structdrop {

struct TrainConfig
{
  Index batch_size = 128;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int epochs = 10;
  std::uint64_t seed = 1;
  Index eval_batch = 1000;

  void validate() const;
};

/// Seed streams. Weight init, data order and dropout draws never share state,
/// so a run without dropout consumes exactly the same init/order draws.
enum class RngStream : std::uint64_t
{
  Init = 1,
  Order = 2,
  Dropout = 3,
  Search = 4
};

SeededRng stream_rng(std::uint64_t seed, RngStream s);

/// A support whose longest period drops more than `rate`: ceil(1/(1-rate)) + 1.
/// Short supports keep the per-iteration kept fraction near 1 - rate.
Index auto_support_cap(double rate);

/// Pattern distribution for a weight matrix at a drop rate. Rate 0 gives the
/// single-period distribution (dp = 1 always), i.e. no dropout.
/// A support cap of 0 selects auto_support_cap(rate).
PatternDistribution pattern_distribution_for(Granularity kind, Index rows, Index cols, TileConfig tile, double rate,
                                             double entropy_weight, Index support_cap, SeededRng &rng);

/// Expected kept share of a rows x cols weight's products under `dist`, averaged
/// over the exact masks of every period and bias. Ragged tile edges count as kept.
double expected_mac_keep(PatternDistribution const &dist, Granularity kind, Index rows, Index cols, TileConfig tile);

struct MlpSpec
{
  Index inputs = 784;
  std::vector<Index> hidden{256, 256};
  Index classes = 10;
  DropoutMode mode = DropoutMode::None;
  /// Drop rate per hidden layer; a single value applies to all of them.
  std::vector<double> rates{0.5};
  TileConfig tile{32, 32};
  double entropy_weight = 1e-3;
  Index support_cap = 0; ///< 0: auto_support_cap(rate)

  void validate() const;
  double rate(std::size_t hidden_layer) const;
};

struct StepResult
{
  double loss = 0.0;
  Index correct = 0;
};

/// ReLU MLP; dropout, when enabled, acts on every hidden layer.
template <typename S>
class Mlp
{
public:
  Mlp(MlpSpec const &spec, std::uint64_t seed);

  MlpSpec const &spec() const { return spec_; }
  std::vector<Dense<S>> layers;
  /// One per hidden layer in the approximate modes.
  std::vector<PatternDistribution> distributions;
  std::vector<S> scales;

  /// Logits (classes x batch) without dropout.
  Matrix<S> predict(Matrix<S> const &x) const;
  /// One forward/backward pass and SGD update. `patterns`, if given, replaces
  /// the sampled patterns (one per hidden layer).
  StepResult train_step(Matrix<S> const &x, std::vector<int> const &labels, TrainConfig const &cfg, SeededRng &rng,
                        std::vector<DropoutPattern> const *patterns = nullptr);
  /// Forward/backward without the update; gradients stay in the layers.
  StepResult compute_gradients(Matrix<S> const &x, std::vector<int> const &labels, SeededRng &rng,
                               std::vector<DropoutPattern> const *patterns = nullptr);
  /// Patterns used by the last step, one per hidden layer.
  std::vector<DropoutPattern> const &last_patterns() const { return last_patterns_; }

  MacCounter macs() const;
  MacCounter dropout_macs() const;

private:
  MlpSpec spec_;
  std::vector<DropoutPattern> last_patterns_;
};

/// Features x batch matrix of the selected samples.
template <typename S>
Matrix<S> batch_columns(ImageDataset const &data, std::vector<Index> const &rows);
std::vector<int> batch_labels(ImageDataset const &data, std::vector<Index> const &rows);

template <typename S>
double evaluate_accuracy(Mlp<S> const &model, ImageDataset const &test, Index eval_batch);

/// Full training loop with one evaluation on `test` per epoch.
template <typename S>
TrainLog train_mlp(MlpSpec const &spec, TrainConfig const &cfg, ImageDataset const &train, ImageDataset const &test);

/// Epoch order: a Fisher-Yates permutation of 0..n-1.
std::vector<Index> shuffled_indices(Index n, SeededRng &rng);

} // namespace structdrop

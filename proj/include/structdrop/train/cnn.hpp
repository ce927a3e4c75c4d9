#pragma once

#include "structdrop/schedule.hpp"
#include "structdrop/sensitivity.hpp"
#include "structdrop/tensor.hpp"
#include "structdrop/train/data.hpp"
#include "structdrop/train/layers.hpp"
#include "structdrop/train/mlp.hpp"

#include <utility>
#include <vector>

namespace structdrop {

struct ConvSpec
{
  Index out_channels = 8;
  Index kernel = 5;
  Index stride = 2;
  Index padding = 2;
};

enum class AblationKind
{
  None,
  RandomWeight,  ///< drop conv weights at random
  RandomInput,   ///< drop conv input values at random
  MagnitudePart  ///< drop values of one magnitude quantile part
};

std::string to_string(AblationKind k);
AblationKind ablation_kind_from_string(std::string const &s);

/// Unscaled drops used by the analysis experiments; resampled every iteration.
struct Ablation
{
  AblationKind kind = AblationKind::None;
  double fraction = 0.0;
  int parts = 4;
  int part = 1; ///< 1 holds the largest magnitudes

  void validate() const;
};

struct CnnSpec
{
  Index channels = 1;
  Index height = 28;
  Index width = 28;
  std::vector<ConvSpec> convs{{8, 5, 2, 2}, {16, 5, 2, 2}};
  std::vector<Index> hidden{64};
  Index classes = 10;
  DropoutMode mode = DropoutMode::None; ///< None, Rsdp or Bsdp on every conv input
  /// drop_sensitive is the m% ceiling; drop_insensitive is taken from the schedule.
  SensitivityConfig sensitivity;
  TileConfig tile{7, 8};
  /// theta follows a running mean of |input| with this momentum.
  double threshold_momentum = 0.9;
  Ablation ablation;

  void validate() const;
  std::vector<ConvShape> conv_shapes() const;
};

/// Per-sample masks of one conv input batch.
struct ConvMasking
{
  /// Empty: dense. One row mask: rows of the stacked (batch*positions) input.
  /// One tile mask per sample otherwise.
  std::vector<BinaryMask> masks;
  double expected_keep_sum = 0.0; ///< sum over samples of expected kept fraction
};

/// Convolution through im2col over a batch laid out one sample per row.
template <typename S>
class ConvLayer
{
public:
  ConvLayer() = default;
  ConvLayer(ConvShape const &shape, SeededRng &rng);

  ConvShape shape;
  Matrix<S> weight; ///< out_channels x patch
  Vector<S> bias;
  Matrix<S> grad_weight;
  Vector<S> grad_bias;
  MacCounter macs;

  Index input_size() const { return shape.channels * shape.height * shape.width; }
  Index output_size() const { return shape.out_channels * shape.positions(); }

  /// Stacked im2col of a batch: sample n owns rows n*P .. n*P+P-1.
  Matrix<S> unfold(Matrix<S> const &x) const;
  Matrix<S> infer(Matrix<S> const &x) const;

  /// `cols` is the stacked input after scaling; `scale` (same shape, or
  /// empty) is folded into the input gradient. `weight_keep` zeroes weights.
  Matrix<S> forward_cols(Matrix<S> cols, Index batch, ConvMasking masking, Matrix<S> scale = {},
                         Matrix<S> const *weight_keep = nullptr);
  /// Returns d loss / d x (batch x input_size) or empty.
  Matrix<S> backward(Matrix<S> const &grad_out, bool need_input_grad);
  void sgd_step(S learning_rate, S momentum);

private:
  Matrix<S> to_rows(Matrix<S> const &y, Index batch) const;

  Index batch_ = 0;
  Matrix<S> cols_;
  Matrix<S> scale_;
  Matrix<S> weight_eff_;
  Matrix<S> weight_keep_;
  ConvMasking masking_;
  Matrix<S> velocity_w_;
  Vector<S> velocity_b_;
};

struct CnnStep
{
  double loss = 0.0;
  Index correct = 0;
  double expected_keep = 1.0; ///< MAC-weighted expected kept fraction of conv inputs
};

template <typename S>
class Cnn
{
public:
  Cnn(CnnSpec const &spec, std::uint64_t seed);

  CnnSpec const &spec() const { return spec_; }
  std::vector<ConvLayer<S>> convs;
  std::vector<Dense<S>> dense;
  /// Running theta per conv layer (negative until the first batch).
  std::vector<double> thresholds;

  Matrix<S> predict(Matrix<S> const &x) const;
  /// x: batch x pixels. `drop_ratio` is n% for this iteration (0 bypasses).
  CnnStep compute_gradients(Matrix<S> const &x, std::vector<int> const &labels, double drop_ratio, SeededRng &rng);
  void sgd_step(S learning_rate, S momentum);

  MacCounter macs() const;
  MacCounter conv_macs() const;

  /// Sensitivity-aware masking of one conv input; scales `cols` in place.
  ConvMasking select(Index layer, Matrix<S> &cols, Matrix<S> &scale, Index batch, double drop_ratio, SeededRng &rng);

private:
  CnnSpec spec_;
};

/// Samples as rows.
template <typename S>
Matrix<S> batch_rows(ImageDataset const &data, std::vector<Index> const &rows);

template <typename S>
double evaluate_accuracy(Cnn<S> const &model, ImageDataset const &test, Index eval_batch);

/// `schedule` gives n% per epoch and must cover cfg.epochs.
template <typename S>
TrainLog train_cnn(CnnSpec const &spec, TrainConfig const &cfg, ImageDataset const &train, ImageDataset const &test,
                   RatioSchedule const &schedule);

/// Paired runs dropping random weights, then random input values, at `fraction`.
template <typename S>
std::pair<TrainLog, TrainLog> ablate_weight_vs_input(CnnSpec const &spec, TrainConfig const &cfg,
                                                     ImageDataset const &train, ImageDataset const &test,
                                                     double fraction);

} // namespace structdrop

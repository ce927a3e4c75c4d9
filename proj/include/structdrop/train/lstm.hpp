#pragma once

#include "structdrop/distribution.hpp"
#include "structdrop/train/data.hpp"
#include "structdrop/train/layers.hpp"
#include "structdrop/train/mlp.hpp"

#include <vector>

namespace structdrop {

struct LstmSpec
{
  Index hidden = 64;
  Index seq_len = 32;
  DropoutMode mode = DropoutMode::None;
  double rate = 0.5;
  TileConfig tile{16, 16};
  double entropy_weight = 1e-3;
  Index support_cap = 0; ///< 0: auto_support_cap(rate)

  void validate() const;
};

/// Token ids laid out [step][sample].
using TokenBatch = std::vector<std::vector<int>>;

/// Single-layer character LSTM with a softmax readout.
///
/// The gate weight is 4H x (V+H) over [one-hot x_t; h_{t-1}], gate rows
/// ordered i, f, g, o. A row pattern picks hidden units; a dropped unit loses
/// its four gate rows, and its cell and hidden state stay zero for the whole
/// sequence. Kept hidden states reach the readout scaled by 1/(1-p_n). A tile
/// pattern zeroes gate-weight tiles and scales the gate product instead.
/// Conventional dropout zeroes units per sample, constant across steps.
template <typename S>
class LstmModel
{
public:
  LstmModel(LstmSpec const &spec, Index vocab, std::uint64_t seed);

  LstmSpec const &spec() const { return spec_; }
  Index vocab() const { return vocab_; }
  Index hidden() const { return spec_.hidden; }

  Matrix<S> gate_weight;
  Vector<S> gate_bias;
  Matrix<S> grad_gate_weight;
  Vector<S> grad_gate_bias;
  Dense<S> readout;
  PatternDistribution distribution;
  S scale = S(1);
  MacCounter gate_macs;

  /// Hidden units kept by a row pattern, expanded to the 4H gate rows.
  BinaryMask gate_row_mask(DropoutPattern const &pattern) const;

  /// Hidden states h_1..h_T (each H x B). `pattern` selects the masked path;
  /// without it the full network runs (evaluation).
  std::vector<Matrix<S>> forward_states(TokenBatch const &inputs, DropoutPattern const *pattern = nullptr);

  /// Mean cross-entropy per predicted token; gradients stored.
  StepResult compute_gradients(TokenBatch const &inputs, TokenBatch const &targets, SeededRng &rng,
                               DropoutPattern const *pattern = nullptr);
  void sgd_step(S learning_rate, S momentum);
  /// Summed cross-entropy (nats) of predicting targets, no dropout.
  double evaluate(TokenBatch const &inputs, TokenBatch const &targets);

  DropoutPattern const &last_pattern() const { return last_pattern_; }
  MacCounter macs() const;

private:
  struct StepCache
  {
    Matrix<S> xh;
    Matrix<S> i, f, g, o;
    Matrix<S> c, tanh_c;
  };

  Matrix<S> input_matrix(std::vector<int> const &tokens, Matrix<S> const &h) const;
  std::vector<Matrix<S>> run(TokenBatch const &inputs, std::optional<BinaryMask> const &mask,
                             Matrix<S> const *units, S gate_scale, std::vector<StepCache> *cache);

  LstmSpec spec_;
  Index vocab_;
  DropoutPattern last_pattern_;
  Matrix<S> velocity_w_;
  Vector<S> velocity_b_;
};

/// Random windows: B sequences of T inputs and their next-token targets.
std::pair<TokenBatch, TokenBatch> sample_windows(TextCorpus const &corpus, Index batch, Index steps, SeededRng &rng);

/// exp(mean cross-entropy) over consecutive non-overlapping windows.
template <typename S>
double evaluate_perplexity(LstmModel<S> &model, TextCorpus const &corpus, Index eval_batch);

/// Iterations per epoch: floor((n-1) / (batch*seq_len)), at least 1.
template <typename S>
TrainLog train_lstm(LstmSpec const &spec, TrainConfig const &cfg, TextCorpus const &train, TextCorpus const &valid);

} // namespace structdrop

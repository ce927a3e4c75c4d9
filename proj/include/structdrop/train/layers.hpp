#pragma once

#include "structdrop/error.hpp"
#include "structdrop/masked_gemm.hpp"
#include "structdrop/patterns.hpp"
#include "structdrop/rng.hpp"
#include "structdrop/train/training_log.hpp"
#include "structdrop/types.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace structdrop {

enum class DropoutMode
{
  None,
  Bernoulli, ///< conventional per-unit dropout, inverted scaling
  ApproxRow,
  ApproxTile,
  Rsdp,
  Bsdp
};

std::string to_string(DropoutMode m);
DropoutMode dropout_mode_from_string(std::string const &s);

template <typename S>
void relu_inplace(Matrix<S> &m)
{
  m = m.cwiseMax(S(0));
}

/// grad *= 1[activated > 0]
template <typename S>
void relu_backward(Matrix<S> &grad, Matrix<S> const &activated)
{
  grad = (activated.array() > S(0)).select(grad, S(0));
}

template <typename S>
S sigmoid(S x)
{
  return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
struct ClassifierLoss
{
  double loss = 0.0; ///< mean over the batch
  Index correct = 0;
  Matrix<S> grad;    ///< d loss / d logits
};

/// Softmax cross-entropy over columns of a classes x batch logit matrix.
template <typename S>
ClassifierLoss<S> softmax_cross_entropy(Matrix<S> const &logits, std::vector<int> const &labels)
{
  Index const B = logits.cols();
  if (static_cast<Index>(labels.size()) != B) { throw ShapeError("softmax_cross_entropy: label count != batch"); }
  ClassifierLoss<S> out;
  out.grad.resize(logits.rows(), B);
  double total = 0.0;
  for (Index j = 0; j < B; ++j) {
    int const y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= logits.rows()) { throw ParameterError("softmax_cross_entropy: label out of range"); }
    Index arg = 0;
    S const mx = logits.col(j).maxCoeff(&arg);
    double sum = 0.0;
    for (Index i = 0; i < logits.rows(); ++i) { sum += std::exp(static_cast<double>(logits(i, j) - mx)); }
    double const lse = std::log(sum) + static_cast<double>(mx);
    total += lse - static_cast<double>(logits(y, j));
    for (Index i = 0; i < logits.rows(); ++i) {
      double const pr = std::exp(static_cast<double>(logits(i, j)) - lse);
      out.grad(i, j) = static_cast<S>((pr - (i == y ? 1.0 : 0.0)) / static_cast<double>(B));
    }
    out.correct += arg == y ? 1 : 0;
  }
  out.loss = total / static_cast<double>(B);
  return out;
}

/// Fully connected layer y = W x + b over column batches (features x batch).
template <typename S>
class Dense
{
public:
  Dense() = default;
  /// He-uniform weights, zero bias.
  Dense(Index inputs, Index outputs, SeededRng &rng);

  Index inputs() const { return weight.cols(); }
  Index outputs() const { return weight.rows(); }

  Matrix<S> weight;
  Vector<S> bias;
  Matrix<S> grad_weight;
  Vector<S> grad_bias;
  MacCounter macs;

  /// No caching, no MAC accounting.
  Matrix<S> infer(Matrix<S> const &x) const;

  Matrix<S> forward(Matrix<S> const &x);
  /// Row pattern: dropped neurons output exactly zero, kept ones scale*(Wx+b).
  /// Tile pattern: dropped weight tiles act as zero, output scale*(W'x)+b.
  Matrix<S> forward_masked(Matrix<S> const &x, DropoutPattern const &pattern, S scale, TileConfig tile = {});
  /// Conventional dropout: output (Wx+b) o keep_scale, entries 0 or 1/(1-p).
  Matrix<S> forward_bernoulli(Matrix<S> const &x, Matrix<S> const &keep_scale);

  /// Stores parameter gradients, returns d loss / d x (empty if not requested).
  Matrix<S> backward(Matrix<S> const &grad_out, bool need_input_grad = true);
  /// Backward of forward_masked; `pattern` must be the one used forward.
  Matrix<S> backward_masked(Matrix<S> const &grad_out, DropoutPattern const &pattern, bool need_input_grad = true);

  /// v = momentum*v + lr*grad; w -= v.
  void sgd_step(S learning_rate, S momentum);

private:
  enum class Cached
  {
    Nothing,
    Plain,
    Masked,
    Bernoulli
  };

  Matrix<S> backward_plain(Matrix<S> const &grad_out, bool need_input_grad);

  Cached cached_ = Cached::Nothing;
  Matrix<S> input_;
  Matrix<S> keep_;
  std::optional<BinaryMask> mask_;
  DropoutPattern pattern_;
  S scale_ = S(1);
  Matrix<S> velocity_w_;
  Vector<S> velocity_b_;
};

template <typename S>
Dense<S>::Dense(Index inputs, Index outputs, SeededRng &rng)
{
  if (inputs < 1 || outputs < 1) { throw ParameterError("Dense: extents must be >= 1"); }
  double const limit = std::sqrt(6.0 / static_cast<double>(inputs));
  weight.resize(outputs, inputs);
  for (Index i = 0; i < weight.size(); ++i) { weight.data()[i] = static_cast<S>(limit * (2.0 * rng.uniform() - 1.0)); }
  bias = Vector<S>::Zero(outputs);
  grad_weight = Matrix<S>::Zero(outputs, inputs);
  grad_bias = Vector<S>::Zero(outputs);
  velocity_w_ = Matrix<S>::Zero(outputs, inputs);
  velocity_b_ = Vector<S>::Zero(outputs);
}

template <typename S>
Matrix<S> Dense<S>::infer(Matrix<S> const &x) const
{
  Matrix<S> z = gemm(weight, x);
  z.colwise() += bias;
  return z;
}

template <typename S>
Matrix<S> Dense<S>::forward(Matrix<S> const &x)
{
  Matrix<S> z = infer(x);
  macs.add(weight.size() * x.cols(), weight.size() * x.cols());
  input_ = x;
  mask_.reset();
  cached_ = Cached::Plain;
  return z;
}

template <typename S>
Matrix<S> Dense<S>::forward_masked(Matrix<S> const &x, DropoutPattern const &pattern, S scale, TileConfig tile)
{
  BinaryMask mask = make_mask(pattern, outputs(), inputs(), tile);
  Matrix<S> z;
  if (mask.all_kept()) {
    z = gemm(weight, x);
    macs.add(weight.size() * x.cols(), weight.size() * x.cols());
    if (pattern.kind == Granularity::Row) {
      z.colwise() += bias;
      if (scale != S(1)) { z *= scale; }
    } else {
      if (scale != S(1)) { z *= scale; }
      z.colwise() += bias;
    }
  } else {
    auto prod = masked_matmul(weight, x, mask);
    macs.add(prod.macs_performed, prod.macs_dense);
    z = std::move(prod.output);
    if (pattern.kind == Granularity::Row) {
      for (Index r = 0; r < z.rows(); ++r) {
        if (mask.kept(r)) {
          z.row(r).array() = (z.row(r).array() + bias(r)) * scale;
        }
      }
    } else {
      z *= scale;
      z.colwise() += bias;
    }
  }
  input_ = x;
  mask_ = std::move(mask);
  pattern_ = pattern;
  scale_ = scale;
  cached_ = Cached::Masked;
  return z;
}

template <typename S>
Matrix<S> Dense<S>::forward_bernoulli(Matrix<S> const &x, Matrix<S> const &keep_scale)
{
  if (keep_scale.rows() != outputs() || keep_scale.cols() != x.cols()) {
    throw ShapeError("forward_bernoulli: keep mask is not outputs x batch");
  }
  Matrix<S> z = infer(x);
  macs.add(weight.size() * x.cols(), weight.size() * x.cols());
  z.array() *= keep_scale.array();
  input_ = x;
  keep_ = keep_scale;
  mask_.reset();
  cached_ = Cached::Bernoulli;
  return z;
}

template <typename S>
Matrix<S> Dense<S>::backward_plain(Matrix<S> const &g, bool need_input_grad)
{
  std::int64_t const work = weight.size() * g.cols();
  grad_weight.noalias() = g * input_.transpose();
  grad_bias = g.rowwise().sum();
  macs.add(work, work);
  Matrix<S> dx;
  if (need_input_grad) {
    dx.noalias() = weight.transpose() * g;
    macs.add(work, work);
  }
  return dx;
}

template <typename S>
Matrix<S> Dense<S>::backward(Matrix<S> const &grad_out, bool need_input_grad)
{
  if (cached_ == Cached::Nothing) { throw StateError("Dense::backward: no forward pass cached"); }
  if (grad_out.rows() != outputs() || grad_out.cols() != input_.cols()) {
    throw ShapeError("Dense::backward: gradient is not outputs x batch");
  }
  switch (cached_) {
  case Cached::Plain: return backward_plain(grad_out, need_input_grad);
  case Cached::Bernoulli: {
    Matrix<S> g = grad_out.cwiseProduct(keep_);
    return backward_plain(g, need_input_grad);
  }
  case Cached::Masked: throw StateError("Dense::backward: forward pass was masked; use backward_masked");
  case Cached::Nothing: break;
  }
  throw StateError("Dense::backward: no forward pass cached");
}

template <typename S>
Matrix<S> Dense<S>::backward_masked(Matrix<S> const &grad_out, DropoutPattern const &pattern, bool need_input_grad)
{
  if (cached_ != Cached::Masked || !(pattern == pattern_)) {
    throw StateError("Dense::backward_masked: pattern differs from the forward pass");
  }
  if (grad_out.rows() != outputs() || grad_out.cols() != input_.cols()) {
    throw ShapeError("Dense::backward_masked: gradient is not outputs x batch");
  }
  BinaryMask const &mask = *mask_;
  bool const rows = pattern.kind == Granularity::Row;
  if (mask.all_kept()) {
    if (scale_ == S(1)) { return backward_plain(grad_out, need_input_grad); }
    Matrix<S> g = grad_out * scale_;
    Matrix<S> dx = backward_plain(g, need_input_grad);
    if (!rows) { grad_bias = grad_out.rowwise().sum(); }
    return dx;
  }

  Matrix<S> g = grad_out * scale_;
  if (rows) {
    for (Index r = 0; r < g.rows(); ++r) {
      if (!mask.kept(r)) { g.row(r).setZero(); }
    }
    grad_bias = g.rowwise().sum();
  } else {
    grad_bias = grad_out.rowwise().sum();
  }
  auto dw = masked_outer(g, input_, mask);
  macs.add(dw.macs_performed, dw.macs_dense);
  grad_weight = std::move(dw.output);
  Matrix<S> dx;
  if (need_input_grad) {
    auto t = masked_matmul_transposed(weight, g, mask);
    macs.add(t.macs_performed, t.macs_dense);
    dx = std::move(t.output);
  }
  return dx;
}

template <typename S>
void Dense<S>::sgd_step(S learning_rate, S momentum)
{
  velocity_w_ = momentum * velocity_w_ + learning_rate * grad_weight;
  velocity_b_ = momentum * velocity_b_ + learning_rate * grad_bias;
  weight -= velocity_w_;
  bias -= velocity_b_;
}

/// Inverted-dropout keep matrix: each entry 1/(1-p) with probability 1-p, else 0.
template <typename S>
Matrix<S> bernoulli_keep(Index rows, Index cols, double p, SeededRng &rng)
{
  Matrix<S> keep(rows, cols);
  S const s = static_cast<S>(1.0 / (1.0 - p));
  for (Index i = 0; i < keep.size(); ++i) { keep.data()[i] = rng.uniform() < p ? S(0) : s; }
  return keep;
}

} // namespace structdrop

#include "structdrop/train/cnn.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace structdrop {

std::string to_string(AblationKind k)
{
  switch (k) {
  case AblationKind::None: return "none";
  case AblationKind::RandomWeight: return "random-weight";
  case AblationKind::RandomInput: return "random-input";
  case AblationKind::MagnitudePart: return "magnitude-part";
  }
  return "none";
}

AblationKind ablation_kind_from_string(std::string const &s)
{
  for (auto k : {AblationKind::None, AblationKind::RandomWeight, AblationKind::RandomInput,
                 AblationKind::MagnitudePart}) {
    if (to_string(k) == s) { return k; }
  }
  throw ParameterError("unknown ablation '" + s + "'");
}

void Ablation::validate() const
{
  if (!(fraction >= 0.0 && fraction < 1.0)) { throw ParameterError("ablation: fraction must be in [0, 1)"); }
  if (kind == AblationKind::MagnitudePart) {
    if (parts < 2) { throw ParameterError("ablation: parts must be >= 2"); }
    if (part < 1 || part > parts) { throw ParameterError("ablation: part must be in 1..parts"); }
  }
}

void CnnSpec::validate() const
{
  if (channels < 1 || height < 1 || width < 1 || classes < 2) { throw ParameterError("cnn: bad input or class count"); }
  if (convs.empty()) { throw ParameterError("cnn: at least one conv layer"); }
  if (mode != DropoutMode::None && mode != DropoutMode::Rsdp && mode != DropoutMode::Bsdp) {
    throw ParameterError("cnn: conv inputs take none, rsdp or bsdp");
  }
  if (mode != DropoutMode::None && ablation.kind != AblationKind::None) {
    throw ParameterError("cnn: ablations run without sensitivity-aware dropout");
  }
  for (auto h : hidden) {
    if (h < 1) { throw ParameterError("cnn: hidden widths must be >= 1"); }
  }
  if (!(threshold_momentum >= 0.0 && threshold_momentum < 1.0)) {
    throw ParameterError("cnn: threshold_momentum must be in [0, 1)");
  }
  if (mode != DropoutMode::None) {
    SensitivityConfig probe = sensitivity;
    probe.drop_insensitive = std::min(1.0, probe.drop_sensitive + 0.5);
    probe.validate();
  }
  if (mode == DropoutMode::Bsdp) {
    tile.validate();
    for (auto const &s : conv_shapes()) {
      if (s.positions() < tile.rows || s.patch_size() < tile.cols) {
        throw ParameterError("cnn: bsdp tile larger than a conv input matrix");
      }
    }
  }
  ablation.validate();
  (void)conv_shapes();
}

std::vector<ConvShape> CnnSpec::conv_shapes() const
{
  std::vector<ConvShape> shapes;
  Index c = channels;
  Index h = height;
  Index w = width;
  for (auto const &cs : convs) {
    ConvShape s{c, h, w, cs.out_channels, cs.kernel, cs.stride, cs.padding};
    s.validate();
    shapes.push_back(s);
    c = s.out_channels;
    h = s.out_height();
    w = s.out_width();
  }
  return shapes;
}

template <typename S>
ConvLayer<S>::ConvLayer(ConvShape const &s, SeededRng &rng) : shape(s)
{
  shape.validate();
  double const limit = std::sqrt(6.0 / static_cast<double>(shape.patch_size()));
  weight.resize(shape.out_channels, shape.patch_size());
  for (Index i = 0; i < weight.size(); ++i) { weight.data()[i] = static_cast<S>(limit * (2.0 * rng.uniform() - 1.0)); }
  bias = Vector<S>::Zero(shape.out_channels);
  grad_weight = Matrix<S>::Zero(weight.rows(), weight.cols());
  grad_bias = Vector<S>::Zero(shape.out_channels);
  velocity_w_ = Matrix<S>::Zero(weight.rows(), weight.cols());
  velocity_b_ = Vector<S>::Zero(shape.out_channels);
}

template <typename S>
Matrix<S> ConvLayer<S>::unfold(Matrix<S> const &x) const
{
  if (x.cols() != input_size()) { throw ShapeError("ConvLayer: input width is not C*H*W"); }
  Index const P = shape.positions();
  Matrix<S> cols(x.rows() * P, shape.patch_size());
  for (Index n = 0; n < x.rows(); ++n) {
    Matrix<S> const image = Eigen::Map<Matrix<S> const>(x.row(n).data(), shape.channels, shape.height * shape.width);
    cols.middleRows(n * P, P) = im2col(image, shape);
  }
  return cols;
}

template <typename S>
Matrix<S> ConvLayer<S>::to_rows(Matrix<S> const &y, Index batch) const
{
  Index const P = shape.positions();
  Matrix<S> out(batch, output_size());
  for (Index n = 0; n < batch; ++n) {
    for (Index co = 0; co < shape.out_channels; ++co) {
      for (Index p = 0; p < P; ++p) { out(n, co * P + p) = y(n * P + p, co) + bias(co); }
    }
  }
  return out;
}

template <typename S>
Matrix<S> ConvLayer<S>::infer(Matrix<S> const &x) const
{
  Matrix<S> const y = gemm(unfold(x), Matrix<S>(weight.transpose()));
  return to_rows(y, x.rows());
}

template <typename S>
Matrix<S> ConvLayer<S>::forward_cols(Matrix<S> cols, Index batch, ConvMasking masking, Matrix<S> scale,
                                     Matrix<S> const *weight_keep)
{
  Index const P = shape.positions();
  if (cols.rows() != batch * P || cols.cols() != shape.patch_size()) {
    throw ShapeError("ConvLayer::forward_cols: input is not (batch*positions) x patch");
  }
  if (weight_keep) {
    weight_keep_ = *weight_keep;
    weight_eff_ = weight.cwiseProduct(weight_keep_);
  } else {
    weight_keep_.resize(0, 0);
    weight_eff_ = weight;
  }
  Matrix<S> const wt = weight_eff_.transpose();
  Matrix<S> y;
  if (masking.masks.empty()) {
    y = gemm(cols, wt);
    macs.add(cols.size() * wt.cols(), cols.size() * wt.cols());
  } else if (masking.masks.size() == 1 && masking.masks[0].granularity() == Granularity::Row) {
    auto prod = masked_matmul(cols, wt, masking.masks[0]);
    macs.add(prod.macs_performed, prod.macs_dense);
    y = std::move(prod.output);
  } else {
    if (static_cast<Index>(masking.masks.size()) != batch) { throw ShapeError("ConvLayer: one tile mask per sample"); }
    y.resize(batch * P, wt.cols());
    for (Index n = 0; n < batch; ++n) {
      Matrix<S> const part = cols.middleRows(n * P, P);
      auto prod = masked_matmul(part, wt, masking.masks[static_cast<std::size_t>(n)]);
      macs.add(prod.macs_performed, prod.macs_dense);
      y.middleRows(n * P, P) = prod.output;
    }
  }
  batch_ = batch;
  cols_ = std::move(cols);
  scale_ = std::move(scale);
  masking_ = std::move(masking);
  return to_rows(y, batch);
}

template <typename S>
Matrix<S> ConvLayer<S>::backward(Matrix<S> const &grad_out, bool need_input_grad)
{
  Index const P = shape.positions();
  Index const B = batch_;
  if (grad_out.rows() != B || grad_out.cols() != output_size()) {
    throw ShapeError("ConvLayer::backward: gradient is not batch x output_size");
  }
  Matrix<S> dy(B * P, shape.out_channels);
  for (Index n = 0; n < B; ++n) {
    for (Index co = 0; co < shape.out_channels; ++co) {
      for (Index p = 0; p < P; ++p) { dy(n * P + p, co) = grad_out(n, co * P + p); }
    }
  }
  grad_bias = dy.colwise().sum().transpose();
  Matrix<S> const wt = weight_eff_.transpose();
  std::int64_t const dense_work = cols_.size() * shape.out_channels;

  Matrix<S> dwt;
  Matrix<S> dcols;
  auto const &masks = masking_.masks;
  if (masks.empty()) {
    dwt.noalias() = cols_.transpose() * dy;
    macs.add(dense_work, dense_work);
    if (need_input_grad) {
      dcols.noalias() = dy * weight_eff_;
      macs.add(dense_work, dense_work);
    }
  } else if (masks.size() == 1 && masks[0].granularity() == Granularity::Row) {
    auto t = masked_matmul_transposed(cols_, dy, masks[0]);
    macs.add(t.macs_performed, t.macs_dense);
    dwt = std::move(t.output);
    if (need_input_grad) {
      auto o = masked_outer(dy, wt, masks[0]);
      macs.add(o.macs_performed, o.macs_dense);
      dcols = std::move(o.output);
    }
  } else {
    dwt = Matrix<S>::Zero(shape.patch_size(), shape.out_channels);
    if (need_input_grad) { dcols.resize(B * P, shape.patch_size()); }
    for (Index n = 0; n < B; ++n) {
      auto const &m = masks[static_cast<std::size_t>(n)];
      Matrix<S> const part = cols_.middleRows(n * P, P);
      Matrix<S> const dpart = dy.middleRows(n * P, P);
      auto t = masked_matmul_transposed(part, dpart, m);
      macs.add(t.macs_performed, t.macs_dense);
      dwt += t.output;
      if (need_input_grad) {
        auto o = masked_outer(dpart, wt, m);
        macs.add(o.macs_performed, o.macs_dense);
        dcols.middleRows(n * P, P) = o.output;
      }
    }
  }
  grad_weight = dwt.transpose();
  if (weight_keep_.size() > 0) { grad_weight = grad_weight.cwiseProduct(weight_keep_); }

  Matrix<S> dx;
  if (need_input_grad) {
    if (scale_.size() > 0) { dcols = dcols.cwiseProduct(scale_); }
    dx.resize(B, input_size());
    for (Index n = 0; n < B; ++n) {
      Matrix<S> const image = col2im(Matrix<S>(dcols.middleRows(n * P, P)), shape);
      dx.row(n) = Eigen::Map<Matrix<S> const>(image.data(), 1, image.size());
    }
  }
  return dx;
}

template <typename S>
void ConvLayer<S>::sgd_step(S learning_rate, S momentum)
{
  velocity_w_ = momentum * velocity_w_ + learning_rate * grad_weight;
  velocity_b_ = momentum * velocity_b_ + learning_rate * grad_bias;
  weight -= velocity_w_;
  bias -= velocity_b_;
}

template <typename S>
Cnn<S>::Cnn(CnnSpec const &spec, std::uint64_t seed) : spec_(spec)
{
  spec_.validate();
  auto init = stream_rng(seed, RngStream::Init);
  for (auto const &s : spec_.conv_shapes()) { convs.emplace_back(s, init); }
  Index in = convs.back().output_size();
  for (Index h : spec_.hidden) {
    dense.emplace_back(in, h, init);
    in = h;
  }
  dense.emplace_back(in, spec_.classes, init);
  thresholds.assign(convs.size(), -1.0);
}

template <typename S>
Matrix<S> Cnn<S>::predict(Matrix<S> const &x) const
{
  Matrix<S> a = x;
  for (auto const &c : convs) {
    a = c.infer(a);
    relu_inplace(a);
  }
  Matrix<S> h = a.transpose();
  for (std::size_t l = 0; l < dense.size(); ++l) {
    h = dense[l].infer(h);
    if (l + 1 < dense.size()) { relu_inplace(h); }
  }
  return h;
}

template <typename S>
ConvMasking Cnn<S>::select(Index layer, Matrix<S> &cols, Matrix<S> &scale, Index batch, double drop_ratio,
                           SeededRng &rng)
{
  ConvMasking out;
  auto &theta = thresholds[static_cast<std::size_t>(layer)];
  double const batch_mean = static_cast<double>(cols.cwiseAbs().mean());
  theta = theta < 0.0 ? batch_mean : spec_.threshold_momentum * theta + (1.0 - spec_.threshold_momentum) * batch_mean;

  SensitivityConfig cfg = spec_.sensitivity;
  cfg.value_threshold = theta;
  cfg.drop_insensitive = drop_ratio;
  cfg.drop_sensitive = std::min(spec_.sensitivity.drop_sensitive, 0.5 * drop_ratio);

  Index const P = convs[static_cast<std::size_t>(layer)].shape.positions();
  Index const K = cols.cols();
  scale = Matrix<S>::Zero(cols.rows(), K);
  if (spec_.mode == DropoutMode::Rsdp) {
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(batch * P));
    for (Index n = 0; n < batch; ++n) {
      Matrix<S> const part = cols.middleRows(n * P, P);
      auto const sm = predict_sensitivity(part, cfg, rng);
      auto const keep = rsdp_select(sm, part, rng);
      auto const q = row_drop_probabilities(sm);
      double expect = 0.0;
      for (Index r = 0; r < P; ++r) {
        double const qr = q[static_cast<std::size_t>(r)];
        expect += 1.0 - qr;
        bool const kept = keep.kept(r);
        bits[static_cast<std::size_t>(n * P + r)] = kept ? 1 : 0;
        if (kept) { scale.row(n * P + r).setConstant(static_cast<S>(qr < 1.0 ? 1.0 / (1.0 - qr) : 1.0)); }
      }
      out.expected_keep_sum += expect / static_cast<double>(P);
    }
    out.masks.push_back(BinaryMask::rows(std::move(bits)));
  } else {
    TileConfig const tile = spec_.tile;
    Index const gr = P / tile.rows;
    Index const gc = K / tile.cols;
    for (Index n = 0; n < batch; ++n) {
      Matrix<S> const part = cols.middleRows(n * P, P);
      auto const sm = predict_sensitivity(part, cfg, rng);
      auto mask = bsdp_select(sm, P, K, tile, rng);
      auto const q = block_drop_probabilities(sm, tile);
      auto const counts = kept_per_group(mask);
      auto blk = scale.middleRows(n * P, P);
      blk.setOnes();
      double expect = static_cast<double>(P * K - gr * tile.rows * gc * tile.cols);
      for (Index g = 0; g < gr; ++g) {
        S const group_scale = counts[static_cast<std::size_t>(g)] > 0
                                ? static_cast<S>(static_cast<double>(gc) / static_cast<double>(counts[g]))
                                : S(0);
        for (Index b = 0; b < gc; ++b) {
          expect += (1.0 - q[static_cast<std::size_t>(g * gc + b)]) * static_cast<double>(tile.rows * tile.cols);
          blk.block(g * tile.rows, b * tile.cols, tile.rows, tile.cols)
            .setConstant(mask.tile_kept(g, b) ? group_scale : S(0));
        }
      }
      out.expected_keep_sum += expect / static_cast<double>(P * K);
      out.masks.push_back(std::move(mask));
    }
  }
  cols = cols.cwiseProduct(scale);
  return out;
}

template <typename S>
CnnStep Cnn<S>::compute_gradients(Matrix<S> const &x, std::vector<int> const &labels, double drop_ratio,
                                  SeededRng &rng)
{
  Index const B = x.rows();
  auto const &ab = spec_.ablation;
  bool const sensitivity = spec_.mode != DropoutMode::None && drop_ratio > 0.0;
  bool const ablate = ab.kind != AblationKind::None && ab.fraction > 0.0;

  std::vector<Matrix<S>> outs;
  std::vector<Matrix<S>> input_keep(convs.size());
  double keep_weighted = 0.0;
  double keep_total = 0.0;
  Matrix<S> a = x;
  for (std::size_t l = 0; l < convs.size(); ++l) {
    auto &conv = convs[l];
    if (ablate && ab.kind != AblationKind::RandomWeight) {
      Matrix<S> keep = Matrix<S>::Ones(B, a.cols());
      for (Index n = 0; n < B; ++n) {
        if (ab.kind == AblationKind::RandomInput) {
          for (Index j = 0; j < a.cols(); ++j) { keep(n, j) = rng.uniform() < ab.fraction ? S(0) : S(1); }
        } else {
          Matrix<S> const sample = a.row(n);
          auto const parts = partition_by_magnitude(sample, ab.parts);
          for (Index j = 0; j < a.cols(); ++j) {
            if (parts[static_cast<std::size_t>(j)] == ab.part && rng.uniform() < ab.fraction) { keep(n, j) = S(0); }
          }
        }
      }
      a = a.cwiseProduct(keep);
      input_keep[l] = std::move(keep);
    }
    Matrix<S> cols = conv.unfold(a);
    auto const dense_work = static_cast<double>(cols.size() * conv.shape.out_channels);
    keep_total += dense_work;
    if (sensitivity) {
      Matrix<S> scale;
      ConvMasking masking = select(static_cast<Index>(l), cols, scale, B, drop_ratio, rng);
      keep_weighted += dense_work * masking.expected_keep_sum / static_cast<double>(B);
      a = conv.forward_cols(std::move(cols), B, std::move(masking), std::move(scale));
    } else if (ablate && ab.kind == AblationKind::RandomWeight) {
      keep_weighted += dense_work;
      Matrix<S> wk(conv.weight.rows(), conv.weight.cols());
      for (Index i = 0; i < wk.size(); ++i) { wk.data()[i] = rng.uniform() < ab.fraction ? S(0) : S(1); }
      a = conv.forward_cols(std::move(cols), B, {}, {}, &wk);
    } else {
      keep_weighted += dense_work;
      a = conv.forward_cols(std::move(cols), B, {});
    }
    relu_inplace(a);
    outs.push_back(a);
  }

  std::vector<Matrix<S>> acts;
  Matrix<S> h = a.transpose();
  for (std::size_t l = 0; l < dense.size(); ++l) {
    h = dense[l].forward(h);
    if (l + 1 < dense.size()) {
      relu_inplace(h);
      acts.push_back(h);
    }
  }
  auto ce = softmax_cross_entropy(h, labels);

  Matrix<S> g = ce.grad;
  for (std::size_t l = dense.size(); l-- > 0;) {
    if (l + 1 < dense.size()) { relu_backward(g, acts[l]); }
    g = dense[l].backward(g, true);
  }
  Matrix<S> gr = g.transpose();
  for (std::size_t l = convs.size(); l-- > 0;) {
    relu_backward(gr, outs[l]);
    gr = convs[l].backward(gr, l > 0);
    if (l > 0 && input_keep[l].size() > 0) { gr = gr.cwiseProduct(input_keep[l]); }
  }
  return {ce.loss, ce.correct, keep_total > 0.0 ? keep_weighted / keep_total : 1.0};
}

template <typename S>
void Cnn<S>::sgd_step(S learning_rate, S momentum)
{
  for (auto &c : convs) { c.sgd_step(learning_rate, momentum); }
  for (auto &d : dense) { d.sgd_step(learning_rate, momentum); }
}

template <typename S>
MacCounter Cnn<S>::conv_macs() const
{
  MacCounter m;
  for (auto const &c : convs) { m += c.macs; }
  return m;
}

template <typename S>
MacCounter Cnn<S>::macs() const
{
  MacCounter m = conv_macs();
  for (auto const &d : dense) { m += d.macs; }
  return m;
}

template <typename S>
Matrix<S> batch_rows(ImageDataset const &data, std::vector<Index> const &rows)
{
  Matrix<S> x(static_cast<Index>(rows.size()), data.images.cols());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    x.row(static_cast<Index>(j)) = data.images.row(rows[j]).template cast<S>();
  }
  return x;
}

template <typename S>
double evaluate_accuracy(Cnn<S> const &model, ImageDataset const &test, Index eval_batch)
{
  if (test.size() == 0) { return 0.0; }
  Index correct = 0;
  std::vector<Index> rows;
  for (Index start = 0; start < test.size(); start += eval_batch) {
    Index const end = std::min(test.size(), start + eval_batch);
    rows.resize(static_cast<std::size_t>(end - start));
    std::iota(rows.begin(), rows.end(), start);
    Matrix<S> const logits = model.predict(batch_rows<S>(test, rows));
    for (Index j = 0; j < logits.cols(); ++j) {
      Index arg = 0;
      logits.col(j).maxCoeff(&arg);
      correct += arg == test.labels[static_cast<std::size_t>(start + j)] ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

template <typename S>
TrainLog train_cnn(CnnSpec const &spec, TrainConfig const &cfg, ImageDataset const &train, ImageDataset const &test,
                   RatioSchedule const &schedule)
{
  cfg.validate();
  Index const pixels = spec.channels * spec.height * spec.width;
  if (train.images.cols() != pixels || test.images.cols() != pixels) {
    throw ShapeError("train_cnn: image size does not match the network input");
  }
  if (train.size() == 0) { throw ParameterError("train_cnn: empty training set"); }
  if (schedule.epochs() < cfg.epochs) { throw ParameterError("train_cnn: schedule shorter than the run"); }
  Cnn<S> model(spec, cfg.seed);
  auto order_rng = stream_rng(cfg.seed, RngStream::Order);
  auto drop_rng = stream_rng(cfg.seed, RngStream::Dropout);

  TrainLog log;
  log.model = "cnn";
  std::int64_t iter = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto const t0 = std::chrono::steady_clock::now();
    double const ratio = spec.mode == DropoutMode::None ? 0.0 : schedule.ratio(epoch);
    MacCounter const macs0 = model.macs();
    MacCounter const conv0 = model.conv_macs();
    auto const order = shuffled_indices(train.size(), order_rng);
    double loss_sum = 0.0;
    double keep_sum = 0.0;
    Index batches = 0;
    std::vector<Index> rows;
    for (Index start = 0; start < train.size(); start += cfg.batch_size) {
      Index const end = std::min(train.size(), start + cfg.batch_size);
      rows.assign(order.begin() + start, order.begin() + end);
      auto const r = model.compute_gradients(batch_rows<S>(train, rows), batch_labels(train, rows), ratio, drop_rng);
      model.sgd_step(static_cast<S>(cfg.learning_rate), static_cast<S>(cfg.momentum));
      loss_sum += r.loss;
      keep_sum += r.expected_keep * static_cast<double>(end - start);
      ++batches;
      ++iter;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.iter = iter;
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.metric = evaluate_accuracy(model, test, cfg.eval_batch);
    rec.dropout_ratio = spec.ablation.kind != AblationKind::None ? spec.ablation.fraction : ratio;
    rec.expected_keep = keep_sum / static_cast<double>(train.size());
    rec.macs = {model.macs().performed - macs0.performed, model.macs().dense - macs0.dense};
    rec.dropout_macs = {model.conv_macs().performed - conv0.performed, model.conv_macs().dense - conv0.dense};
    rec.wall_ns =
      std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
  }
  return log;
}

template <typename S>
std::pair<TrainLog, TrainLog> ablate_weight_vs_input(CnnSpec const &spec, TrainConfig const &cfg,
                                                     ImageDataset const &train, ImageDataset const &test,
                                                     double fraction)
{
  if (!(fraction >= 0.0 && fraction < 1.0)) { throw ParameterError("ablate: fraction must be in [0, 1)"); }
  auto const flat = constant_schedule(std::max(cfg.epochs, 1), 0.0);
  CnnSpec weights = spec;
  weights.mode = DropoutMode::None;
  weights.ablation = {AblationKind::RandomWeight, fraction};
  CnnSpec inputs = weights;
  inputs.ablation.kind = AblationKind::RandomInput;
  return {train_cnn<S>(weights, cfg, train, test, flat), train_cnn<S>(inputs, cfg, train, test, flat)};
}

#define STRUCTDROP_INSTANTIATE(S)                                                                               \
  template class ConvLayer<S>;                                                                                  \
  template class Cnn<S>;                                                                                        \
  template Matrix<S> batch_rows<S>(ImageDataset const &, std::vector<Index> const &);                           \
  template double evaluate_accuracy<S>(Cnn<S> const &, ImageDataset const &, Index);                            \
  template TrainLog train_cnn<S>(CnnSpec const &, TrainConfig const &, ImageDataset const &, ImageDataset const &, \
                                 RatioSchedule const &);                                                        \
  template std::pair<TrainLog, TrainLog> ablate_weight_vs_input<S>(CnnSpec const &, TrainConfig const &,        \
                                                                   ImageDataset const &, ImageDataset const &,  \
                                                                   double);

STRUCTDROP_INSTANTIATE(float)
STRUCTDROP_INSTANTIATE(double)
#undef STRUCTDROP_INSTANTIATE

} // namespace structdrop

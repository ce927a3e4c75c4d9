#include "structdrop/train/mlp.hpp"

#include <cmath>
#include <chrono>
#include <numeric>

namespace structdrop {

std::string to_string(DropoutMode m)
{
  switch (m) {
  case DropoutMode::None: return "none";
  case DropoutMode::Bernoulli: return "bernoulli";
  case DropoutMode::ApproxRow: return "approx-row";
  case DropoutMode::ApproxTile: return "approx-tile";
  case DropoutMode::Rsdp: return "rsdp";
  case DropoutMode::Bsdp: return "bsdp";
  }
  return "none";
}

DropoutMode dropout_mode_from_string(std::string const &s)
{
  for (auto m : {DropoutMode::None, DropoutMode::Bernoulli, DropoutMode::ApproxRow, DropoutMode::ApproxTile,
                 DropoutMode::Rsdp, DropoutMode::Bsdp}) {
    if (to_string(m) == s) { return m; }
  }
  throw ParameterError("unknown dropout mode '" + s + "'");
}

void TrainConfig::validate() const
{
  if (batch_size < 1) { throw ParameterError("train: batch_size must be >= 1"); }
  if (!(learning_rate > 0.0)) { throw ParameterError("train: learning_rate must be > 0"); }
  if (!(momentum >= 0.0 && momentum < 1.0)) { throw ParameterError("train: momentum must be in [0, 1)"); }
  if (epochs < 0) { throw ParameterError("train: epochs must be >= 0"); }
  if (eval_batch < 1) { throw ParameterError("train: eval_batch must be >= 1"); }
}

SeededRng stream_rng(std::uint64_t seed, RngStream s)
{
  return SeededRng::derive(seed, static_cast<std::uint64_t>(s));
}

Index auto_support_cap(double rate)
{
  if (!(rate >= 0.0 && rate < 1.0)) { throw ParameterError("auto_support_cap: rate must lie in [0, 1)"); }
  return static_cast<Index>(std::ceil(1.0 / (1.0 - rate) - 1e-12)) + 1;
}

PatternDistribution pattern_distribution_for(Granularity kind, Index rows, Index cols, TileConfig tile, double rate,
                                             double entropy_weight, Index support_cap, SeededRng &rng)
{
  if (rate == 0.0) {
    PatternDistribution d;
    d.probs = Eigen::VectorXd::Ones(1);
    return d;
  }
  SearchConfig cfg;
  cfg.patterns = pattern_space(kind, rows, cols, tile);
  cfg.target_rate = rate;
  cfg.entropy_weight = entropy_weight;
  cfg.support_cap = support_cap > 0 ? support_cap : auto_support_cap(rate);
  return search_distribution(cfg, rng).distribution;
}

double expected_mac_keep(PatternDistribution const &dist, Granularity kind, Index rows, Index cols, TileConfig tile)
{
  double const all = static_cast<double>(rows) * static_cast<double>(cols);
  double keep = 0.0;
  for (Index i = 1; i <= dist.patterns(); ++i) {
    double const k = dist.probs(i - 1);
    if (k == 0.0) { continue; }
    double kept = 0.0;
    for (Index b = 1; b <= i; ++b) {
      auto const m = make_mask({kind, i, b}, rows, cols, tile);
      if (kind == Granularity::Row) {
        kept += static_cast<double>(m.kept_count()) * static_cast<double>(cols);
      } else {
        double const area = static_cast<double>(tile.rows * tile.cols);
        double const grid = static_cast<double>(m.size()) * area;
        kept += static_cast<double>(m.kept_count()) * area + (all - grid);
      }
    }
    keep += k * kept / (static_cast<double>(i) * all);
  }
  return keep;
}

void MlpSpec::validate() const
{
  if (inputs < 1 || classes < 2) { throw ParameterError("mlp: need inputs >= 1 and classes >= 2"); }
  if (hidden.empty()) { throw ParameterError("mlp: at least one hidden layer"); }
  for (auto h : hidden) {
    if (h < 1) { throw ParameterError("mlp: hidden widths must be >= 1"); }
  }
  if (mode == DropoutMode::Rsdp || mode == DropoutMode::Bsdp) {
    throw ParameterError("mlp: sensitivity-aware modes apply to convolution inputs only");
  }
  if (mode != DropoutMode::None) {
    if (rates.size() != 1 && rates.size() != hidden.size()) {
      throw ParameterError("mlp: give one rate or one per hidden layer");
    }
    for (double r : rates) {
      if (!(r >= 0.0 && r < 1.0)) { throw ParameterError("mlp: rates must be in [0, 1)"); }
    }
  }
  if (support_cap < 0) { throw ParameterError("mlp: support_cap must be >= 0"); }
  if (mode == DropoutMode::ApproxTile) { tile.validate(); }
}

double MlpSpec::rate(std::size_t hidden_layer) const
{
  if (mode == DropoutMode::None || rates.empty()) { return 0.0; }
  return rates.size() == 1 ? rates[0] : rates[hidden_layer];
}

std::vector<Index> shuffled_indices(Index n, SeededRng &rng)
{
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = n - 1; i > 0; --i) {
    auto const j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

template <typename S>
Matrix<S> batch_columns(ImageDataset const &data, std::vector<Index> const &rows)
{
  Matrix<S> x(data.images.cols(), static_cast<Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j) {
    x.col(static_cast<Index>(j)) = data.images.row(rows[j]).transpose().template cast<S>();
  }
  return x;
}

std::vector<int> batch_labels(ImageDataset const &data, std::vector<Index> const &rows)
{
  std::vector<int> y(rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) { y[j] = data.labels[static_cast<std::size_t>(rows[j])]; }
  return y;
}

template <typename S>
Mlp<S>::Mlp(MlpSpec const &spec, std::uint64_t seed) : spec_(spec)
{
  spec_.validate();
  auto init = stream_rng(seed, RngStream::Init);
  Index in = spec_.inputs;
  for (Index h : spec_.hidden) {
    layers.emplace_back(in, h, init);
    in = h;
  }
  layers.emplace_back(in, spec_.classes, init);

  if (spec_.mode == DropoutMode::ApproxRow || spec_.mode == DropoutMode::ApproxTile) {
    auto search_rng = stream_rng(seed, RngStream::Search);
    Granularity const kind = spec_.mode == DropoutMode::ApproxRow ? Granularity::Row : Granularity::Tile;
    for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
      auto const &w = layers[l].weight;
      distributions.push_back(pattern_distribution_for(kind, w.rows(), w.cols(), spec_.tile, spec_.rate(l),
                                                       spec_.entropy_weight, spec_.support_cap, search_rng));
      scales.push_back(static_cast<S>(1.0 / (1.0 - neuron_drop_probability(distributions.back()))));
    }
  }
}

template <typename S>
Matrix<S> Mlp<S>::predict(Matrix<S> const &x) const
{
  Matrix<S> a = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    a = layers[l].infer(a);
    if (l + 1 < layers.size()) { relu_inplace(a); }
  }
  return a;
}

template <typename S>
StepResult Mlp<S>::compute_gradients(Matrix<S> const &x, std::vector<int> const &labels, SeededRng &rng,
                                     std::vector<DropoutPattern> const *patterns)
{
  std::size_t const hidden = spec_.hidden.size();
  bool const approx = spec_.mode == DropoutMode::ApproxRow || spec_.mode == DropoutMode::ApproxTile;
  if (patterns && patterns->size() != hidden) { throw ShapeError("Mlp: need one pattern per hidden layer"); }
  last_patterns_.clear();

  std::vector<Matrix<S>> acts;
  acts.reserve(hidden);
  Matrix<S> a = x;
  for (std::size_t l = 0; l < hidden; ++l) {
    auto &layer = layers[l];
    if (approx) {
      DropoutPattern const p = patterns ? (*patterns)[l]
                                        : sample_pattern(distributions[l],
                                                         spec_.mode == DropoutMode::ApproxRow ? Granularity::Row
                                                                                              : Granularity::Tile,
                                                         layer.outputs(), layer.inputs(), spec_.tile, rng);
      last_patterns_.push_back(p);
      a = layer.forward_masked(a, p, scales[l], spec_.tile);
    } else if (spec_.mode == DropoutMode::Bernoulli && spec_.rate(l) > 0.0) {
      a = layer.forward_bernoulli(a, bernoulli_keep<S>(layer.outputs(), a.cols(), spec_.rate(l), rng));
    } else {
      a = layer.forward(a);
    }
    relu_inplace(a);
    acts.push_back(a);
  }
  Matrix<S> logits = layers.back().forward(a);
  auto ce = softmax_cross_entropy(logits, labels);

  Matrix<S> g = layers.back().backward(ce.grad);
  for (std::size_t l = hidden; l-- > 0;) {
    relu_backward(g, acts[l]);
    bool const need = l > 0;
    g = approx ? layers[l].backward_masked(g, last_patterns_[l], need) : layers[l].backward(g, need);
  }
  return {ce.loss, ce.correct};
}

template <typename S>
StepResult Mlp<S>::train_step(Matrix<S> const &x, std::vector<int> const &labels, TrainConfig const &cfg,
                              SeededRng &rng, std::vector<DropoutPattern> const *patterns)
{
  auto r = compute_gradients(x, labels, rng, patterns);
  for (auto &layer : layers) { layer.sgd_step(static_cast<S>(cfg.learning_rate), static_cast<S>(cfg.momentum)); }
  return r;
}

template <typename S>
MacCounter Mlp<S>::macs() const
{
  MacCounter m;
  for (auto const &l : layers) { m += l.macs; }
  return m;
}

template <typename S>
MacCounter Mlp<S>::dropout_macs() const
{
  MacCounter m;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) { m += layers[l].macs; }
  return m;
}

template <typename S>
double evaluate_accuracy(Mlp<S> const &model, ImageDataset const &test, Index eval_batch)
{
  if (test.size() == 0) { return 0.0; }
  Index correct = 0;
  std::vector<Index> rows;
  for (Index start = 0; start < test.size(); start += eval_batch) {
    Index const end = std::min(test.size(), start + eval_batch);
    rows.resize(static_cast<std::size_t>(end - start));
    std::iota(rows.begin(), rows.end(), start);
    Matrix<S> const logits = model.predict(batch_columns<S>(test, rows));
    for (Index j = 0; j < logits.cols(); ++j) {
      Index arg = 0;
      logits.col(j).maxCoeff(&arg);
      correct += arg == test.labels[static_cast<std::size_t>(start + j)] ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

template <typename S>
TrainLog train_mlp(MlpSpec const &spec, TrainConfig const &cfg, ImageDataset const &train, ImageDataset const &test)
{
  cfg.validate();
  if (train.images.cols() != spec.inputs || test.images.cols() != spec.inputs) {
    throw ShapeError("train_mlp: image size does not match the input layer");
  }
  if (train.size() == 0) { throw ParameterError("train_mlp: empty training set"); }
  Mlp<S> model(spec, cfg.seed);
  auto order_rng = stream_rng(cfg.seed, RngStream::Order);
  auto drop_rng = stream_rng(cfg.seed, RngStream::Dropout);

  TrainLog log;
  log.model = "mlp";
  std::int64_t iter = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto const t0 = std::chrono::steady_clock::now();
    MacCounter const macs0 = model.macs();
    MacCounter const drop0 = model.dropout_macs();
    std::vector<std::int64_t> layer_dense0;
    for (auto const &l : model.layers) { layer_dense0.push_back(l.macs.dense); }
    auto const order = shuffled_indices(train.size(), order_rng);
    double loss_sum = 0.0;
    Index batches = 0;
    std::vector<Index> rows;
    for (Index start = 0; start < train.size(); start += cfg.batch_size) {
      Index const end = std::min(train.size(), start + cfg.batch_size);
      rows.assign(order.begin() + start, order.begin() + end);
      auto const r = model.train_step(batch_columns<S>(train, rows), batch_labels(train, rows), cfg, drop_rng);
      loss_sum += r.loss;
      ++batches;
      ++iter;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.iter = iter;
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.metric = evaluate_accuracy(model, test, cfg.eval_batch);
    rec.dropout_ratio = spec.mode == DropoutMode::None ? 0.0 : spec.rate(0);
    if (!model.distributions.empty()) {
      double weighted = 0.0;
      double total = 0.0;
      for (std::size_t l = 0; l < model.distributions.size(); ++l) {
        auto const d = static_cast<double>(model.layers[l].macs.dense - layer_dense0[l]);
        auto const &L = model.layers[l];
        weighted += d * expected_mac_keep(model.distributions[l],
                                          spec.mode == DropoutMode::ApproxRow ? Granularity::Row : Granularity::Tile,
                                          L.outputs(), L.inputs(), spec.tile);
        total += d;
      }
      rec.expected_keep = total > 0.0 ? weighted / total : 1.0;
    }
    rec.macs = {model.macs().performed - macs0.performed, model.macs().dense - macs0.dense};
    rec.dropout_macs = {model.dropout_macs().performed - drop0.performed, model.dropout_macs().dense - drop0.dense};
    rec.wall_ns =
      std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
  }
  return log;
}

#define STRUCTDROP_INSTANTIATE(S)                                                                              \
  template class Mlp<S>;                                                                                         \
  template Matrix<S> batch_columns<S>(ImageDataset const &, std::vector<Index> const &);                         \
  template double evaluate_accuracy<S>(Mlp<S> const &, ImageDataset const &, Index);                             \
  template TrainLog train_mlp<S>(MlpSpec const &, TrainConfig const &, ImageDataset const &, ImageDataset const &);

STRUCTDROP_INSTANTIATE(float)
STRUCTDROP_INSTANTIATE(double)
#undef STRUCTDROP_INSTANTIATE

} // namespace structdrop

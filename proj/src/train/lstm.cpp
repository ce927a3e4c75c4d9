#include "structdrop/train/lstm.hpp"

#include <chrono>
#include <cmath>

namespace structdrop {

void LstmSpec::validate() const
{
  if (hidden < 1 || seq_len < 1) { throw ParameterError("lstm: hidden and seq_len must be >= 1"); }
  if (mode == DropoutMode::Rsdp || mode == DropoutMode::Bsdp) {
    throw ParameterError("lstm: sensitivity-aware modes apply to convolution inputs only");
  }
  if (mode != DropoutMode::None && !(rate >= 0.0 && rate < 1.0)) { throw ParameterError("lstm: rate must be in [0, 1)"); }
  if (support_cap < 0) { throw ParameterError("lstm: support_cap must be >= 0"); }
  if (mode == DropoutMode::ApproxTile) { tile.validate(); }
}

template <typename S>
LstmModel<S>::LstmModel(LstmSpec const &spec, Index vocab, std::uint64_t seed) : spec_(spec), vocab_(vocab)
{
  spec_.validate();
  if (vocab < 2) { throw ParameterError("lstm: vocabulary must have >= 2 symbols"); }
  Index const H = spec_.hidden;
  auto init = stream_rng(seed, RngStream::Init);
  double const limit = 1.0 / std::sqrt(static_cast<double>(H));
  gate_weight.resize(4 * H, vocab + H);
  for (Index i = 0; i < gate_weight.size(); ++i) {
    gate_weight.data()[i] = static_cast<S>(limit * (2.0 * init.uniform() - 1.0));
  }
  gate_bias = Vector<S>::Zero(4 * H);
  gate_bias.segment(H, H).setOnes();
  grad_gate_weight = Matrix<S>::Zero(4 * H, vocab + H);
  grad_gate_bias = Vector<S>::Zero(4 * H);
  velocity_w_ = Matrix<S>::Zero(4 * H, vocab + H);
  velocity_b_ = Vector<S>::Zero(4 * H);
  readout = Dense<S>(H, vocab, init);

  auto search_rng = stream_rng(seed, RngStream::Search);
  if (spec_.mode == DropoutMode::ApproxRow) {
    distribution = pattern_distribution_for(Granularity::Row, H, 1, {}, spec_.rate, spec_.entropy_weight,
                                            spec_.support_cap, search_rng);
  } else if (spec_.mode == DropoutMode::ApproxTile) {
    distribution = pattern_distribution_for(Granularity::Tile, 4 * H, vocab + H, spec_.tile, spec_.rate,
                                            spec_.entropy_weight, spec_.support_cap, search_rng);
  }
  if (spec_.mode == DropoutMode::ApproxRow || spec_.mode == DropoutMode::ApproxTile) {
    scale = static_cast<S>(1.0 / (1.0 - neuron_drop_probability(distribution)));
  }
}

template <typename S>
BinaryMask LstmModel<S>::gate_row_mask(DropoutPattern const &pattern) const
{
  Index const H = spec_.hidden;
  BinaryMask const units = row_mask(pattern.period, pattern.bias, H);
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(4 * H));
  for (Index g = 0; g < 4; ++g) {
    for (Index j = 0; j < H; ++j) { bits[static_cast<std::size_t>(g * H + j)] = units.kept(j) ? 1 : 0; }
  }
  return BinaryMask::rows(std::move(bits));
}

template <typename S>
Matrix<S> LstmModel<S>::input_matrix(std::vector<int> const &tokens, Matrix<S> const &h) const
{
  auto const B = static_cast<Index>(tokens.size());
  Matrix<S> xh = Matrix<S>::Zero(vocab_ + spec_.hidden, B);
  for (Index j = 0; j < B; ++j) {
    int const tok = tokens[static_cast<std::size_t>(j)];
    if (tok < 0 || tok >= vocab_) { throw ParameterError("lstm: token id outside the vocabulary"); }
    xh(tok, j) = S(1);
  }
  xh.bottomRows(spec_.hidden) = h;
  return xh;
}

template <typename S>
std::vector<Matrix<S>> LstmModel<S>::run(TokenBatch const &inputs, std::optional<BinaryMask> const &mask,
                                         Matrix<S> const *units, S gate_scale, std::vector<StepCache> *cache)
{
  if (inputs.empty() || inputs.front().empty()) { throw ShapeError("lstm: empty token batch"); }
  Index const H = spec_.hidden;
  auto const B = static_cast<Index>(inputs.front().size());
  Matrix<S> h = Matrix<S>::Zero(H, B);
  Matrix<S> c = Matrix<S>::Zero(H, B);
  std::vector<Matrix<S>> states;
  states.reserve(inputs.size());
  if (cache) { cache->clear(); }
  auto sig = [](S v) { return sigmoid(v); };
  auto th = [](S v) { return std::tanh(v); };

  for (auto const &step : inputs) {
    if (static_cast<Index>(step.size()) != B) { throw ShapeError("lstm: ragged token batch"); }
    Matrix<S> xh = input_matrix(step, h);
    Matrix<S> a;
    if (mask) {
      auto prod = masked_matmul(gate_weight, xh, *mask);
      gate_macs.add(prod.macs_performed, prod.macs_dense);
      a = std::move(prod.output);
    } else {
      a = gemm(gate_weight, xh);
      gate_macs.add(gate_weight.size() * B, gate_weight.size() * B);
    }
    if (gate_scale != S(1)) { a *= gate_scale; }
    a.colwise() += gate_bias;
    Matrix<S> i = a.topRows(H).unaryExpr(sig);
    Matrix<S> f = a.middleRows(H, H).unaryExpr(sig);
    Matrix<S> g = a.middleRows(2 * H, H).unaryExpr(th);
    Matrix<S> o = a.bottomRows(H).unaryExpr(sig);
    c = f.cwiseProduct(c) + i.cwiseProduct(g);
    if (units) { c = c.cwiseProduct(*units); }
    Matrix<S> tc = c.unaryExpr(th);
    h = o.cwiseProduct(tc);
    if (units) { h = h.cwiseProduct(*units); }
    states.push_back(h);
    if (cache) { cache->push_back({std::move(xh), std::move(i), std::move(f), std::move(g), std::move(o), c, tc}); }
  }
  return states;
}

template <typename S>
std::vector<Matrix<S>> LstmModel<S>::forward_states(TokenBatch const &inputs, DropoutPattern const *pattern)
{
  if (!pattern) { return run(inputs, std::nullopt, nullptr, S(1), nullptr); }
  auto const B = static_cast<Index>(inputs.empty() ? 0 : inputs.front().size());
  if (pattern->kind == Granularity::Row) {
    BinaryMask const m = gate_row_mask(*pattern);
    Matrix<S> u(spec_.hidden, B);
    for (Index j = 0; j < spec_.hidden; ++j) { u.row(j).setConstant(m.kept(j) ? S(1) : S(0)); }
    std::optional<BinaryMask> mask;
    if (!m.all_kept()) { mask = m; }
    return run(inputs, mask, &u, S(1), nullptr);
  }
  BinaryMask const m = make_mask(*pattern, gate_weight.rows(), gate_weight.cols(), spec_.tile);
  std::optional<BinaryMask> mask;
  if (!m.all_kept()) { mask = m; }
  return run(inputs, mask, nullptr, scale, nullptr);
}

template <typename S>
StepResult LstmModel<S>::compute_gradients(TokenBatch const &inputs, TokenBatch const &targets, SeededRng &rng,
                                           DropoutPattern const *pattern)
{
  if (inputs.size() != targets.size() || inputs.empty()) { throw ShapeError("lstm: inputs/targets step mismatch"); }
  Index const H = spec_.hidden;
  auto const T = static_cast<Index>(inputs.size());
  auto const B = static_cast<Index>(inputs.front().size());

  std::optional<BinaryMask> mask;
  std::optional<Matrix<S>> units;
  S gate_scale = S(1);
  S out_scale = S(1);
  if (spec_.mode == DropoutMode::ApproxRow) {
    last_pattern_ = pattern ? *pattern : sample_pattern(distribution, Granularity::Row, H, 1, {}, rng);
    BinaryMask const m = gate_row_mask(last_pattern_);
    units = Matrix<S>(H, B);
    for (Index j = 0; j < H; ++j) { units->row(j).setConstant(m.kept(j) ? S(1) : S(0)); }
    if (!m.all_kept()) { mask = m; }
    out_scale = scale;
  } else if (spec_.mode == DropoutMode::ApproxTile) {
    last_pattern_ = pattern ? *pattern
                            : sample_pattern(distribution, Granularity::Tile, gate_weight.rows(), gate_weight.cols(),
                                             spec_.tile, rng);
    BinaryMask const m = make_mask(last_pattern_, gate_weight.rows(), gate_weight.cols(), spec_.tile);
    if (!m.all_kept()) { mask = m; }
    gate_scale = scale;
  } else if (spec_.mode == DropoutMode::Bernoulli && spec_.rate > 0.0) {
    units = Matrix<S>(H, B);
    for (Index k = 0; k < units->size(); ++k) { units->data()[k] = rng.uniform() < spec_.rate ? S(0) : S(1); }
    out_scale = static_cast<S>(1.0 / (1.0 - spec_.rate));
  }

  std::vector<StepCache> cache;
  auto const states = run(inputs, mask, units ? &*units : nullptr, gate_scale, &cache);

  Matrix<S> hs(H, T * B);
  std::vector<int> flat_targets(static_cast<std::size_t>(T * B));
  for (Index t = 0; t < T; ++t) {
    if (static_cast<Index>(targets[t].size()) != B) { throw ShapeError("lstm: ragged target batch"); }
    hs.middleCols(t * B, B) = states[t] * out_scale;
    for (Index j = 0; j < B; ++j) { flat_targets[static_cast<std::size_t>(t * B + j)] = targets[t][j]; }
  }
  Matrix<S> const logits = readout.forward(hs);
  auto ce = softmax_cross_entropy(logits, flat_targets);
  Matrix<S> const dhs = readout.backward(ce.grad);

  Matrix<S> da_all(4 * H, T * B);
  Matrix<S> xh_all(vocab_ + H, T * B);
  Matrix<S> dh_next = Matrix<S>::Zero(H, B);
  Matrix<S> dc_next = Matrix<S>::Zero(H, B);
  Matrix<S> const zero = Matrix<S>::Zero(H, B);
  for (Index t = T; t-- > 0;) {
    auto const &k = cache[static_cast<std::size_t>(t)];
    Matrix<S> dh = dhs.middleCols(t * B, B) * out_scale + dh_next;
    if (units) { dh = dh.cwiseProduct(*units); }
    Matrix<S> const ones = Matrix<S>::Ones(H, B);
    Matrix<S> dout = dh.cwiseProduct(k.tanh_c);
    Matrix<S> dc = dc_next + dh.cwiseProduct(k.o).cwiseProduct(ones - k.tanh_c.cwiseProduct(k.tanh_c));
    if (units) { dc = dc.cwiseProduct(*units); }
    Matrix<S> const &c_prev = t > 0 ? cache[static_cast<std::size_t>(t - 1)].c : zero;
    Matrix<S> da(4 * H, B);
    da.topRows(H) = dc.cwiseProduct(k.g).cwiseProduct(k.i).cwiseProduct(ones - k.i);
    da.middleRows(H, H) = dc.cwiseProduct(c_prev).cwiseProduct(k.f).cwiseProduct(ones - k.f);
    da.middleRows(2 * H, H) = dc.cwiseProduct(k.i).cwiseProduct(ones - k.g.cwiseProduct(k.g));
    da.bottomRows(H) = dout.cwiseProduct(k.o).cwiseProduct(ones - k.o);
    dc_next = dc.cwiseProduct(k.f);
    da_all.middleCols(t * B, B) = da;
    xh_all.middleCols(t * B, B) = k.xh;
    if (t > 0) {
      Matrix<S> dxh;
      if (mask) {
        auto p = masked_matmul_transposed(gate_weight, da, *mask);
        gate_macs.add(p.macs_performed, p.macs_dense);
        dxh = std::move(p.output);
      } else {
        dxh.noalias() = gate_weight.transpose() * da;
        gate_macs.add(gate_weight.size() * B, gate_weight.size() * B);
      }
      if (gate_scale != S(1)) { dxh *= gate_scale; }
      dh_next = dxh.bottomRows(H);
    }
  }
  grad_gate_bias = da_all.rowwise().sum();
  if (mask) {
    auto p = masked_outer(da_all, xh_all, *mask);
    gate_macs.add(p.macs_performed, p.macs_dense);
    grad_gate_weight = std::move(p.output);
  } else {
    grad_gate_weight.noalias() = da_all * xh_all.transpose();
    gate_macs.add(gate_weight.size() * T * B, gate_weight.size() * T * B);
  }
  if (gate_scale != S(1)) { grad_gate_weight *= gate_scale; }
  return {ce.loss, ce.correct};
}

template <typename S>
void LstmModel<S>::sgd_step(S learning_rate, S momentum)
{
  velocity_w_ = momentum * velocity_w_ + learning_rate * grad_gate_weight;
  velocity_b_ = momentum * velocity_b_ + learning_rate * grad_gate_bias;
  gate_weight -= velocity_w_;
  gate_bias -= velocity_b_;
  readout.sgd_step(learning_rate, momentum);
}

template <typename S>
double LstmModel<S>::evaluate(TokenBatch const &inputs, TokenBatch const &targets)
{
  auto const states = run(inputs, std::nullopt, nullptr, S(1), nullptr);
  double total = 0.0;
  for (std::size_t t = 0; t < states.size(); ++t) {
    Matrix<S> const logits = readout.infer(states[t]);
    auto const ce = softmax_cross_entropy(logits, targets[t]);
    total += ce.loss * static_cast<double>(logits.cols());
  }
  return total;
}

template <typename S>
MacCounter LstmModel<S>::macs() const
{
  MacCounter m = gate_macs;
  m += readout.macs;
  return m;
}

std::pair<TokenBatch, TokenBatch> sample_windows(TextCorpus const &corpus, Index batch, Index steps, SeededRng &rng)
{
  if (corpus.size() < steps + 1) { throw ParameterError("lstm: corpus shorter than one training window"); }
  TokenBatch in(static_cast<std::size_t>(steps), std::vector<int>(static_cast<std::size_t>(batch)));
  TokenBatch out = in;
  auto const span = static_cast<std::uint64_t>(corpus.size() - steps);
  for (Index j = 0; j < batch; ++j) {
    auto const start = static_cast<Index>(rng.below(span));
    for (Index t = 0; t < steps; ++t) {
      in[t][j] = corpus.tokens[static_cast<std::size_t>(start + t)];
      out[t][j] = corpus.tokens[static_cast<std::size_t>(start + t + 1)];
    }
  }
  return {in, out};
}

template <typename S>
double evaluate_perplexity(LstmModel<S> &model, TextCorpus const &corpus, Index eval_batch)
{
  Index const T = model.spec().seq_len;
  Index const windows = (corpus.size() - 1) / T;
  if (windows < 1) { throw ParameterError("lstm: evaluation corpus shorter than one window"); }
  double total = 0.0;
  for (Index w0 = 0; w0 < windows; w0 += eval_batch) {
    Index const nb = std::min(eval_batch, windows - w0);
    TokenBatch in(static_cast<std::size_t>(T), std::vector<int>(static_cast<std::size_t>(nb)));
    TokenBatch out = in;
    for (Index j = 0; j < nb; ++j) {
      for (Index t = 0; t < T; ++t) {
        auto const pos = static_cast<std::size_t>((w0 + j) * T + t);
        in[t][j] = corpus.tokens[pos];
        out[t][j] = corpus.tokens[pos + 1];
      }
    }
    total += model.evaluate(in, out);
  }
  return std::exp(total / static_cast<double>(windows * T));
}

template <typename S>
TrainLog train_lstm(LstmSpec const &spec, TrainConfig const &cfg, TextCorpus const &train, TextCorpus const &valid)
{
  cfg.validate();
  if (train.alphabet != valid.alphabet) { throw ShapeError("train_lstm: train and validation alphabets differ"); }
  LstmModel<S> model(spec, train.vocab(), cfg.seed);
  auto order_rng = stream_rng(cfg.seed, RngStream::Order);
  auto drop_rng = stream_rng(cfg.seed, RngStream::Dropout);
  Index const iters = std::max<Index>(1, (train.size() - 1) / (cfg.batch_size * spec.seq_len));

  TrainLog log;
  log.model = "lstm";
  log.metric_name = "perplexity";
  std::int64_t iter = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto const t0 = std::chrono::steady_clock::now();
    MacCounter const macs0 = model.macs();
    MacCounter const gate0 = model.gate_macs;
    double loss_sum = 0.0;
    for (Index it = 0; it < iters; ++it) {
      auto const [in, out] = sample_windows(train, cfg.batch_size, spec.seq_len, order_rng);
      loss_sum += model.compute_gradients(in, out, drop_rng).loss;
      model.sgd_step(static_cast<S>(cfg.learning_rate), static_cast<S>(cfg.momentum));
      ++iter;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.iter = iter;
    rec.loss = loss_sum / static_cast<double>(iters);
    rec.metric = evaluate_perplexity(model, valid, cfg.eval_batch);
    rec.dropout_ratio = spec.mode == DropoutMode::None ? 0.0 : spec.rate;
    if (spec.mode == DropoutMode::ApproxRow || spec.mode == DropoutMode::ApproxTile) {
      bool const row = spec.mode == DropoutMode::ApproxRow;
      // A row pattern over H hidden units removes all four gate rows of each.
      rec.expected_keep = row ? expected_mac_keep(model.distribution, Granularity::Row, spec.hidden, 1, spec.tile)
                              : expected_mac_keep(model.distribution, Granularity::Tile, model.gate_weight.rows(),
                                                  model.gate_weight.cols(), spec.tile);
    }
    rec.macs = {model.macs().performed - macs0.performed, model.macs().dense - macs0.dense};
    rec.dropout_macs = {model.gate_macs.performed - gate0.performed, model.gate_macs.dense - gate0.dense};
    rec.wall_ns =
      std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
  }
  return log;
}

template class LstmModel<float>;
template class LstmModel<double>;
template double evaluate_perplexity<float>(LstmModel<float> &, TextCorpus const &, Index);
template double evaluate_perplexity<double>(LstmModel<double> &, TextCorpus const &, Index);
template TrainLog train_lstm<float>(LstmSpec const &, TrainConfig const &, TextCorpus const &, TextCorpus const &);
template TrainLog train_lstm<double>(LstmSpec const &, TrainConfig const &, TextCorpus const &, TextCorpus const &);

} // namespace structdrop

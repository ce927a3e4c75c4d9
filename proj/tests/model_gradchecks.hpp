#pragma once
// Finite-difference checks of every trainable layer, with and without masks.

#include "gradcheck.hpp"
#include "oracles.hpp"

#include "structdrop/train/cnn.hpp"
#include "structdrop/train/lstm.hpp"
#include "structdrop/train/mlp.hpp"

namespace oracle {

namespace grad_detail {

using structdrop::Index;
using structdrop::SeededRng;

template <typename M>
using Ref = std::function<double &(M &, Index, Index)>;
template <typename M>
using Get = std::function<double(M const &, Index, Index)>;

template <typename M>
void add_probes(std::vector<Probe<M>> &out, SeededRng &rng, int count, Index rows, Index cols, Ref<M> ref, Get<M> get,
                std::function<bool(Index, Index)> const &eligible = {})
{
  auto more = random_probes<M>(
    rng, rows, cols, count,
    [&](Index i, Index j) {
      return Probe<M>{[ref, i, j](M &m) -> double & { return ref(m, i, j); },
                      [get, i, j](M const &m) { return get(m, i, j); }};
    },
    eligible);
  out.insert(out.end(), more.begin(), more.end());
}

/// Weight and bias probes of a dense layer reached through `layer`.
template <typename M>
void add_dense(std::vector<Probe<M>> &out, SeededRng &rng, M const &shape_of,
               std::function<structdrop::Dense<double> &(M &)> const &layer,
               std::function<structdrop::Dense<double> const &(M const &)> const &clayer,
               std::function<bool(Index, Index)> const &eligible = {})
{
  auto const &d = clayer(shape_of);
  add_probes<M>(
    out, rng, 20, d.outputs(), d.inputs(), [layer](M &m, Index i, Index j) -> double & { return layer(m).weight(i, j); },
    [clayer](M const &m, Index i, Index j) { return clayer(m).grad_weight(i, j); }, eligible);
  add_probes<M>(
    out, rng, 5, d.outputs(), 1, [layer](M &m, Index i, Index) -> double & { return layer(m).bias(i); },
    [clayer](M const &m, Index i, Index) { return clayer(m).grad_bias(i); });
}

/// Biases uniform in [-0.2, 0.2).
template <typename V>
void jitter(V &bias, SeededRng &rng)
{
  for (Index i = 0; i < bias.size(); ++i) { bias(i) = 0.4 * rng.uniform() - 0.2; }
}

inline std::vector<int> random_labels(Index n, int classes, SeededRng &rng)
{
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto &v : y) { v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))); }
  return y;
}

} // namespace grad_detail

/// Dense layers of a small MLP in every dropout mode, with fixed patterns.
inline std::vector<GradReport> mlp_gradient_checks(std::uint64_t seed)
{
  using namespace structdrop;
  using namespace grad_detail;
  using M = Mlp<double>;
  SeededRng rng(seed);
  Matrix<double> const x = random_matrix<double>(12, 7, rng);
  auto const y = random_labels(7, 4, rng);

  struct Case
  {
    std::string name;
    DropoutMode mode;
    std::vector<DropoutPattern> patterns;
  };
  std::vector<Case> const cases{
    {"dense", DropoutMode::None, {}},
    {"dense+bernoulli", DropoutMode::Bernoulli, {}},
    {"dense+row-mask", DropoutMode::ApproxRow, {{Granularity::Row, 2, 1}, {Granularity::Row, 3, 2}}},
    {"dense+tile-mask", DropoutMode::ApproxTile, {{Granularity::Tile, 2, 2}, {Granularity::Tile, 3, 1}}},
  };
  std::vector<GradReport> reports;
  for (auto const &c : cases) {
    MlpSpec spec;
    spec.inputs = 12;
    spec.hidden = {10, 9};
    spec.classes = 4;
    spec.mode = c.mode;
    spec.rates = {0.5};
    spec.tile = {4, 4};
    M base(spec, seed);
    for (auto &d : base.layers) { jitter(d.bias, rng); }
    auto const *patterns = c.patterns.empty() ? nullptr : &c.patterns;
    std::function<double(M &)> loss = [&](M &m) {
      SeededRng r(seed + 99);
      return m.compute_gradients(x, y, r, patterns).loss;
    };
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
      std::function<bool(Index, Index)> eligible;
      if (patterns && l < patterns->size()) {
        auto const &d = base.layers[l];
        auto const mask = make_mask((*patterns)[l], d.outputs(), d.inputs(), spec.tile);
        eligible = [mask](Index i, Index j) {
          if (mask.granularity() == Granularity::Row) { return mask.kept(i); }
          Index const tr = i / mask.tile().rows;
          Index const tc = j / mask.tile().cols;
          return tr >= mask.grid_rows() || tc >= mask.grid_cols() || mask.tile_kept(tr, tc);
        };
      }
      std::vector<Probe<M>> probes;
      add_dense<M>(
        probes, rng, base, [l](M &m) -> Dense<double> & { return m.layers[l]; },
        [l](M const &m) -> Dense<double> const & { return m.layers[l]; }, eligible);
      reports.push_back(check_gradients<M>(c.name + " layer " + std::to_string(l), base, loss, probes));
    }
  }
  return reports;
}

/// LSTM gate weights and readout, with and without masks.
inline std::vector<GradReport> lstm_gradient_checks(std::uint64_t seed)
{
  using namespace structdrop;
  using namespace grad_detail;
  using M = LstmModel<double>;
  SeededRng rng(seed);
  Index const V = 5, T = 4, B = 3;
  TokenBatch in(T), out(T);
  for (Index t = 0; t < T; ++t) {
    in[t] = random_labels(B, V, rng);
    out[t] = random_labels(B, V, rng);
  }
  struct Case
  {
    std::string name;
    DropoutMode mode;
    std::optional<DropoutPattern> pattern;
  };
  std::vector<Case> const cases{
    {"lstm", DropoutMode::None, std::nullopt},
    {"lstm+bernoulli", DropoutMode::Bernoulli, std::nullopt},
    {"lstm+row-mask", DropoutMode::ApproxRow, DropoutPattern{Granularity::Row, 2, 2}},
    {"lstm+tile-mask", DropoutMode::ApproxTile, DropoutPattern{Granularity::Tile, 3, 1}},
  };
  std::vector<GradReport> reports;
  for (auto const &c : cases) {
    LstmSpec spec;
    spec.hidden = 6;
    spec.seq_len = T;
    spec.mode = c.mode;
    spec.rate = 0.5;
    spec.tile = {4, 4};
    M base(spec, V, seed);
    jitter(base.gate_bias, rng);
    jitter(base.readout.bias, rng);
    DropoutPattern const *pattern = c.pattern ? &*c.pattern : nullptr;
    std::function<double(M &)> loss = [&](M &m) {
      SeededRng r(seed + 7);
      return m.compute_gradients(in, out, r, pattern).loss;
    };
    std::function<bool(Index, Index)> eligible;
    if (c.pattern && c.pattern->kind == Granularity::Row) {
      auto const mask = base.gate_row_mask(*c.pattern);
      eligible = [mask](Index i, Index) { return mask.kept(i); };
    } else if (c.pattern) {
      auto const mask = make_mask(*c.pattern, base.gate_weight.rows(), base.gate_weight.cols(), spec.tile);
      eligible = [mask](Index i, Index j) {
        Index const tr = i / mask.tile().rows;
        Index const tc = j / mask.tile().cols;
        return tr >= mask.grid_rows() || tc >= mask.grid_cols() || mask.tile_kept(tr, tc);
      };
    }
    std::vector<Probe<M>> gate;
    add_probes<M>(
      gate, rng, 20, base.gate_weight.rows(), base.gate_weight.cols(),
      [](M &m, Index i, Index j) -> double & { return m.gate_weight(i, j); },
      [](M const &m, Index i, Index j) { return m.grad_gate_weight(i, j); }, eligible);
    add_probes<M>(
      gate, rng, 8, base.gate_bias.size(), 1, [](M &m, Index i, Index) -> double & { return m.gate_bias(i); },
      [](M const &m, Index i, Index) { return m.grad_gate_bias(i); },
      eligible ? std::function<bool(Index, Index)>([eligible](Index i, Index) { return eligible(i, 0); })
               : std::function<bool(Index, Index)>{});
    reports.push_back(check_gradients<M>(c.name + " gates", base, loss, gate));

    std::vector<Probe<M>> head;
    add_dense<M>(
      head, rng, base, [](M &m) -> Dense<double> & { return m.readout; },
      [](M const &m) -> Dense<double> const & { return m.readout; });
    reports.push_back(check_gradients<M>(c.name + " readout", base, loss, head));
  }
  return reports;
}

/// Conv and dense layers of a small CNN: plain, sensitivity-masked inputs and
/// the ablation drops.
inline std::vector<GradReport> cnn_gradient_checks(std::uint64_t seed)
{
  using namespace structdrop;
  using namespace grad_detail;
  using M = Cnn<double>;
  SeededRng rng(seed);
  Index const B = 3;
  Matrix<double> x(B, 12 * 12);
  for (Index i = 0; i < x.size(); ++i) { x.data()[i] = rng.uniform(); }
  auto const y = random_labels(B, 3, rng);

  struct Case
  {
    std::string name;
    DropoutMode mode;
    Ablation ablation;
  };
  std::vector<Case> const cases{
    {"conv", DropoutMode::None, {}},
    {"conv+rsdp", DropoutMode::Rsdp, {}},
    {"conv+bsdp", DropoutMode::Bsdp, {}},
    {"conv+random-weight", DropoutMode::None, {AblationKind::RandomWeight, 0.3}},
    {"conv+random-input", DropoutMode::None, {AblationKind::RandomInput, 0.3}},
    {"conv+magnitude-part", DropoutMode::None, {AblationKind::MagnitudePart, 0.4, 4, 1}},
  };
  std::vector<GradReport> reports;
  for (auto const &c : cases) {
    CnnSpec spec;
    spec.height = 12;
    spec.width = 12;
    spec.convs = {{4, 3, 1, 1}, {6, 3, 2, 1}};
    spec.hidden = {10};
    spec.classes = 3;
    spec.mode = c.mode;
    spec.ablation = c.ablation;
    spec.sensitivity.region_rows = 4;
    spec.sensitivity.region_cols = 3;
    spec.tile = {6, 3};
    M base(spec, seed);
    for (auto &cv : base.convs) { jitter(cv.bias, rng); }
    for (auto &d : base.dense) { jitter(d.bias, rng); }
    double const ratio = c.mode == DropoutMode::None ? 0.0 : 0.5;
    std::function<double(M &)> loss = [&](M &m) {
      SeededRng r(seed + 3);
      return m.compute_gradients(x, y, ratio, r).loss;
    };
    for (std::size_t l = 0; l < base.convs.size(); ++l) {
      std::vector<Probe<M>> probes;
      auto const &conv = base.convs[l];
      add_probes<M>(
        probes, rng, 20, conv.weight.rows(), conv.weight.cols(),
        [l](M &m, Index i, Index j) -> double & { return m.convs[l].weight(i, j); },
        [l](M const &m, Index i, Index j) { return m.convs[l].grad_weight(i, j); });
      add_probes<M>(
        probes, rng, 4, conv.bias.size(), 1, [l](M &m, Index i, Index) -> double & { return m.convs[l].bias(i); },
        [l](M const &m, Index i, Index) { return m.convs[l].grad_bias(i); });
      reports.push_back(check_gradients<M>(c.name + " conv " + std::to_string(l), base, loss, probes));
    }
    for (std::size_t l = 0; l < base.dense.size(); ++l) {
      std::vector<Probe<M>> probes;
      add_dense<M>(
        probes, rng, base, [l](M &m) -> Dense<double> & { return m.dense[l]; },
        [l](M const &m) -> Dense<double> const & { return m.dense[l]; });
      reports.push_back(check_gradients<M>(c.name + " dense " + std::to_string(l), base, loss, probes));
    }
  }
  return reports;
}

inline std::vector<GradReport> all_gradient_checks(std::uint64_t seed)
{
  auto r = mlp_gradient_checks(seed);
  for (auto &x : lstm_gradient_checks(seed)) { r.push_back(std::move(x)); }
  for (auto &x : cnn_gradient_checks(seed)) { r.push_back(std::move(x)); }
  return r;
}

} // namespace oracle

#pragma once

#include "structdrop/error.hpp"
#include "structdrop/patterns.hpp"
#include "structdrop/tensor.hpp"

#include <cstdint>
#include <map>
#include <vector>

namespace structdrop {

/// Result of a gather-multiply-scatter product.
template <typename Scalar>
struct CompactProduct
{
  Matrix<Scalar> output;          ///< full dims; dropped positions are zero
  std::int64_t macs_performed = 0;
  std::int64_t macs_dense = 0;
};

/// Kept weight blocks grouped so each group is one dense product.
///
/// A group is a set of weight rows that share the same kept column set. A row
/// mask gives one group (kept rows x all columns). A tile mask gives one group
/// per distinct tile-row bit pattern; bands are assigned to groups in
/// ascending band order and every output row belongs to exactly one group.
struct MaskPlan
{
  struct Group
  {
    std::vector<Index> rows;
    std::vector<Index> cols; ///< ascending; empty together with all_cols
    bool all_cols = false;
  };

  Index rows = 0;
  Index cols = 0;
  std::vector<Group> groups;

  Index group_cols(Group const &g) const { return g.all_cols ? cols : static_cast<Index>(g.cols.size()); }
  /// Number of kept weight entries.
  std::int64_t kept_entries() const;
};

MaskPlan make_plan(BinaryMask const &mask, Index rows, Index cols);

inline std::int64_t MaskPlan::kept_entries() const
{
  std::int64_t n = 0;
  for (auto const &g : groups) { n += static_cast<std::int64_t>(g.rows.size()) * group_cols(g); }
  return n;
}

inline MaskPlan make_plan(BinaryMask const &mask, Index rows, Index cols)
{
  MaskPlan plan;
  plan.rows = rows;
  plan.cols = cols;
  if (mask.granularity() == Granularity::Row) {
    if (mask.size() != rows) { throw ShapeError("row mask length does not match matrix rows"); }
    MaskPlan::Group g;
    g.all_cols = true;
    for (Index r = 0; r < rows; ++r) {
      if (mask.kept(r)) { g.rows.push_back(r); }
    }
    plan.groups.push_back(std::move(g));
    return plan;
  }

  if (mask.source_rows() != rows || mask.source_cols() != cols) {
    throw ShapeError("tile mask dims do not match matrix dims");
  }
  TileConfig const tile = mask.tile();
  Index const gr = mask.grid_rows();
  Index const gc = mask.grid_cols();
  Index const tail_col = gc * tile.cols;

  // Bands with identical bit rows share one compact product.
  std::map<std::vector<std::uint8_t>, std::size_t> index_of;
  for (Index band = 0; band < gr; ++band) {
    std::vector<std::uint8_t> key(mask.bits().begin() + band * gc, mask.bits().begin() + (band + 1) * gc);
    auto [it, inserted] = index_of.try_emplace(key, plan.groups.size());
    if (inserted) {
      MaskPlan::Group g;
      bool every = tail_col == cols;
      for (Index t = 0; t < gc; ++t) { every = every && key[t] != 0; }
      g.all_cols = every;
      if (!every) {
        for (Index t = 0; t < gc; ++t) {
          if (!key[t]) { continue; }
          for (Index c = t * tile.cols; c < (t + 1) * tile.cols; ++c) { g.cols.push_back(c); }
        }
        for (Index c = tail_col; c < cols; ++c) { g.cols.push_back(c); }
      }
      plan.groups.push_back(std::move(g));
    }
    auto &g = plan.groups[it->second];
    for (Index r = band * tile.rows; r < (band + 1) * tile.rows; ++r) { g.rows.push_back(r); }
  }
  // Ragged bottom rows are never dropped.
  if (gr * tile.rows < rows) {
    MaskPlan::Group g;
    g.all_cols = true;
    for (Index r = gr * tile.rows; r < rows; ++r) { g.rows.push_back(r); }
    plan.groups.push_back(std::move(g));
  }
  std::erase_if(plan.groups, [&](MaskPlan::Group const &g) { return g.rows.empty() || plan.group_cols(g) == 0; });
  return plan;
}

/// Grow-only scratch for compact operands, reused across calls.
template <typename Scalar>
class MaskedGemmWorkspace
{
public:
  using View = Eigen::Map<Matrix<Scalar>>;

  View lhs(Index r, Index c) { return view(lhs_, r, c); }
  View rhs(Index r, Index c) { return view(rhs_, r, c); }
  View out(Index r, Index c) { return view(out_, r, c); }

private:
  static View view(std::vector<Scalar> &buf, Index r, Index c)
  {
    auto const need = static_cast<std::size_t>(r * c);
    if (buf.size() < need) { buf.resize(need); }
    return View(buf.data(), r, c);
  }

  std::vector<Scalar> lhs_;
  std::vector<Scalar> rhs_;
  std::vector<Scalar> out_;
};

namespace detail {

template <typename Scalar>
MaskedGemmWorkspace<Scalar> &default_workspace()
{
  thread_local MaskedGemmWorkspace<Scalar> ws;
  return ws;
}

template <typename Scalar>
void gather(Matrix<Scalar> const &src, std::vector<Index> const &rows, MaskPlan::Group const &g,
            typename MaskedGemmWorkspace<Scalar>::View dst)
{
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (g.all_cols) {
      dst.row(static_cast<Index>(i)) = src.row(rows[i]);
    } else {
      auto const *in = src.row(rows[i]).data();
      auto *o = dst.row(static_cast<Index>(i)).data();
      for (std::size_t j = 0; j < g.cols.size(); ++j) { o[j] = in[g.cols[j]]; }
    }
  }
}

} // namespace detail

/// weight (M x K) with masked entries treated as zero, times other (K x N).
///
/// Each plan group gathers its kept weight rows/columns and the matching rows
/// of `other` into contiguous buffers, multiplies them densely and writes the
/// rows back. For tile masks the input rows skipped per band are exactly the
/// weight columns of that band's dropped tiles.
template <typename Scalar>
CompactProduct<Scalar> masked_matmul(Matrix<Scalar> const &weight, Matrix<Scalar> const &other,
                                     BinaryMask const &mask, MaskedGemmWorkspace<Scalar> *ws = nullptr)
{
  if (weight.cols() != other.rows()) { throw ShapeError("masked_matmul: inner dimensions differ"); }
  CompactProduct<Scalar> result;
  Index const N = other.cols();
  result.macs_dense = static_cast<std::int64_t>(weight.rows()) * weight.cols() * N;
  if (mask.granularity() == Granularity::Row && mask.size() == weight.rows() && mask.all_kept()) {
    result.output = gemm(weight, other);
    result.macs_performed = result.macs_dense;
    return result;
  }
  MaskPlan const plan = make_plan(mask, weight.rows(), weight.cols());
  auto &w = ws ? *ws : detail::default_workspace<Scalar>();
  result.output = Matrix<Scalar>::Zero(weight.rows(), N);
  for (auto const &g : plan.groups) {
    auto const r = static_cast<Index>(g.rows.size());
    Index const k = plan.group_cols(g);
    auto lhs = w.lhs(r, k);
    detail::gather(weight, g.rows, g, lhs);
    auto prod = w.out(r, N);
    if (g.all_cols) {
      prod.noalias() = lhs * other;
    } else {
      auto rhs = w.rhs(k, N);
      for (Index j = 0; j < k; ++j) { rhs.row(j) = other.row(g.cols[j]); }
      prod.noalias() = lhs * rhs;
    }
    for (Index i = 0; i < r; ++i) { result.output.row(g.rows[i]) = prod.row(i); }
    result.macs_performed += static_cast<std::int64_t>(r) * k * N;
  }
  return result;
}

/// Row-granularity product: output row i = weight row i * input for kept i.
template <typename Scalar>
CompactProduct<Scalar> row_masked_matmul(Matrix<Scalar> const &weight, Matrix<Scalar> const &input,
                                         BinaryMask const &mask, MaskedGemmWorkspace<Scalar> *ws = nullptr)
{
  if (mask.granularity() != Granularity::Row) { throw ParameterError("row_masked_matmul: mask is not row-granular"); }
  if (mask.size() != weight.rows()) { throw ShapeError("row_masked_matmul: mask length != weight rows"); }
  return masked_matmul(weight, input, mask, ws);
}

/// Tile-granularity product: dropped weight tiles act as zero blocks.
template <typename Scalar>
CompactProduct<Scalar> tile_masked_matmul(Matrix<Scalar> const &weight, Matrix<Scalar> const &other,
                                          BinaryMask const &mask, TileConfig tile,
                                          MaskedGemmWorkspace<Scalar> *ws = nullptr)
{
  if (mask.granularity() != Granularity::Tile) { throw ParameterError("tile_masked_matmul: mask is not tile-granular"); }
  if (!(mask.tile() == tile)) { throw ShapeError("tile_masked_matmul: tile config differs from the mask's"); }
  return masked_matmul(weight, other, mask, ws);
}

/// Masked weight transposed times grad: (W o mask)^T * grad, K x N.
/// The backward companion of masked_matmul for input gradients.
template <typename Scalar>
CompactProduct<Scalar> masked_matmul_transposed(Matrix<Scalar> const &weight, Matrix<Scalar> const &grad,
                                                BinaryMask const &mask, MaskedGemmWorkspace<Scalar> *ws = nullptr)
{
  if (weight.rows() != grad.rows()) { throw ShapeError("masked_matmul_transposed: row counts differ"); }
  CompactProduct<Scalar> result;
  Index const N = grad.cols();
  result.macs_dense = static_cast<std::int64_t>(weight.rows()) * weight.cols() * N;
  MaskPlan const plan = make_plan(mask, weight.rows(), weight.cols());
  auto &w = ws ? *ws : detail::default_workspace<Scalar>();
  result.output = Matrix<Scalar>::Zero(weight.cols(), N);
  MaskPlan::Group const whole{{}, {}, true};
  for (auto const &g : plan.groups) {
    auto const r = static_cast<Index>(g.rows.size());
    Index const k = plan.group_cols(g);
    auto lhs = w.lhs(r, k);
    detail::gather(weight, g.rows, g, lhs);
    auto rhs = w.rhs(r, N);
    detail::gather(grad, g.rows, whole, rhs);
    auto prod = w.out(k, N);
    prod.noalias() = lhs.transpose() * rhs;
    if (g.all_cols) {
      result.output += prod;
    } else {
      for (Index j = 0; j < k; ++j) { result.output.row(g.cols[j]) += prod.row(j); }
    }
    result.macs_performed += static_cast<std::int64_t>(r) * k * N;
  }
  return result;
}

/// grad (M x N) times input^T (N x K), kept only where the mask keeps the
/// weight entry; other entries are exactly zero. Weight-gradient companion.
template <typename Scalar>
CompactProduct<Scalar> masked_outer(Matrix<Scalar> const &grad, Matrix<Scalar> const &input,
                                    BinaryMask const &mask, MaskedGemmWorkspace<Scalar> *ws = nullptr)
{
  if (grad.cols() != input.cols()) { throw ShapeError("masked_outer: column counts differ"); }
  CompactProduct<Scalar> result;
  Index const N = grad.cols();
  Index const M = grad.rows();
  Index const K = input.rows();
  result.macs_dense = static_cast<std::int64_t>(M) * K * N;
  MaskPlan const plan = make_plan(mask, M, K);
  auto &w = ws ? *ws : detail::default_workspace<Scalar>();
  result.output = Matrix<Scalar>::Zero(M, K);
  MaskPlan::Group const whole{{}, {}, true};
  for (auto const &g : plan.groups) {
    auto const r = static_cast<Index>(g.rows.size());
    Index const k = plan.group_cols(g);
    auto lhs = w.lhs(r, N);
    detail::gather(grad, g.rows, whole, lhs);
    auto prod = w.out(r, k);
    if (g.all_cols) {
      prod.noalias() = lhs * input.transpose();
      for (Index i = 0; i < r; ++i) { result.output.row(g.rows[i]) = prod.row(i); }
    } else {
      auto rhs = w.rhs(k, N);
      for (Index j = 0; j < k; ++j) { rhs.row(j) = input.row(g.cols[j]); }
      prod.noalias() = lhs * rhs.transpose();
      for (Index i = 0; i < r; ++i) {
        auto *o = result.output.row(g.rows[i]).data();
        for (Index j = 0; j < k; ++j) { o[g.cols[j]] = prod(i, j); }
      }
    }
    result.macs_performed += static_cast<std::int64_t>(r) * k * N;
  }
  return result;
}

/// Kept rows of `m`, in ascending order.
template <typename Scalar>
Matrix<Scalar> gather_rows(Matrix<Scalar> const &m, BinaryMask const &mask)
{
  if (mask.granularity() != Granularity::Row || mask.size() != m.rows()) {
    throw ShapeError("gather_rows: need a row mask matching the matrix");
  }
  Matrix<Scalar> out(mask.kept_count(), m.cols());
  Index k = 0;
  for (Index r = 0; r < m.rows(); ++r) {
    if (mask.kept(r)) { out.row(k++) = m.row(r); }
  }
  return out;
}

/// Scatter compact rows back to the kept positions of the mask; other rows zero.
template <typename Scalar>
Matrix<Scalar> apply_output_pattern(Matrix<Scalar> const &compact_rows, BinaryMask const &mask)
{
  if (mask.granularity() != Granularity::Row) { throw ParameterError("apply_output_pattern: need a row mask"); }
  if (compact_rows.rows() != mask.kept_count()) {
    throw ShapeError("apply_output_pattern: " + std::to_string(compact_rows.rows()) + " compact rows for " +
                     std::to_string(mask.kept_count()) + " kept rows");
  }
  Matrix<Scalar> out = Matrix<Scalar>::Zero(mask.size(), compact_rows.cols());
  Index k = 0;
  for (Index r = 0; r < mask.size(); ++r) {
    if (mask.kept(r)) { out.row(r) = compact_rows.row(k++); }
  }
  return out;
}

} // namespace structdrop

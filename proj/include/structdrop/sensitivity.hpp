#pragma once

#include "structdrop/error.hpp"
#include "structdrop/patterns.hpp"
#include "structdrop/rng.hpp"
#include "structdrop/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

namespace structdrop {

struct SensitivityConfig
{
  Index region_rows = 8;
  Index region_cols = 8;
  double sample_fraction = 0.3;  ///< k%
  double vote_threshold = 0.5;   ///< t%
  /// theta; when unset the mean |value| of the matrix being classified is used.
  std::optional<double> value_threshold;
  double drop_sensitive = 0.1;   ///< m%
  double drop_insensitive = 0.5; ///< n%, must exceed m%

  void validate() const;
};

enum class Sensitivity : std::uint8_t
{
  Insensitive = 0,
  Sensitive = 1
};

/// Per-region labels over a ceil(h/x) x ceil(w/y) grid of an input matrix.
struct SensitivityMask
{
  Index source_rows = 0;
  Index source_cols = 0;
  Index region_rows = 1;
  Index region_cols = 1;
  Index grid_rows = 0;
  Index grid_cols = 0;
  std::vector<Sensitivity> labels; ///< row-major over the grid
  std::vector<double> drop_prob;

  Sensitivity label(Index r, Index c) const { return labels[static_cast<std::size_t>(r * grid_cols + c)]; }
  double prob(Index r, Index c) const { return drop_prob[static_cast<std::size_t>(r * grid_cols + c)]; }
  Index sensitive_count() const;

  /// Build from explicit labels; probabilities follow m%/n%.
  static SensitivityMask from_labels(Index source_rows, Index source_cols, Index region_rows, Index region_cols,
                                     std::vector<Sensitivity> labels, double drop_sensitive,
                                     double drop_insensitive);
  bool operator==(SensitivityMask const &) const = default;
};

nlohmann::json to_json(SensitivityMask const &mask);
SensitivityMask sensitivity_mask_from_json(nlohmann::json const &j);

/// Drop probability of each input row: the minimum over the regions it crosses.
std::vector<double> row_drop_probabilities(SensitivityMask const &mask);
/// Drop probability of each full tile (row-major over the tile grid): the
/// minimum over the regions it overlaps.
std::vector<double> block_drop_probabilities(SensitivityMask const &mask, TileConfig tile);

/// Classify every x-by-y region of `input`.
///
/// Each region draws ceil(k% * region size) distinct entries from its own
/// stream (derived from one draw of `rng` and the region index) and is
/// Sensitive iff the share of sampled |value| > theta is at least t%.
template <typename Scalar>
SensitivityMask predict_sensitivity(Matrix<Scalar> const &input, SensitivityConfig const &cfg, SeededRng &rng)
{
  cfg.validate();
  if (input.rows() < 1 || input.cols() < 1) { throw ShapeError("predict_sensitivity: empty input matrix"); }
  double const theta = cfg.value_threshold ? *cfg.value_threshold
                                           : static_cast<double>(input.cwiseAbs().mean());
  Index const gr = (input.rows() + cfg.region_rows - 1) / cfg.region_rows;
  Index const gc = (input.cols() + cfg.region_cols - 1) / cfg.region_cols;
  std::vector<Sensitivity> labels(static_cast<std::size_t>(gr * gc), Sensitivity::Insensitive);
  std::uint64_t const base = rng.next_u64();
  std::vector<Index> idx;
  for (Index r = 0; r < gr; ++r) {
    for (Index c = 0; c < gc; ++c) {
      Index const r0 = r * cfg.region_rows;
      Index const c0 = c * cfg.region_cols;
      Index const h = std::min(cfg.region_rows, input.rows() - r0);
      Index const w = std::min(cfg.region_cols, input.cols() - c0);
      Index const n = h * w;
      auto const take = std::clamp<Index>(
        static_cast<Index>(std::ceil(cfg.sample_fraction * static_cast<double>(n) - 1e-9)), 1, n);
      auto region_rng = SeededRng::derive(base, static_cast<std::uint64_t>(r * gc + c));
      idx.resize(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), Index{0});
      Index above = 0;
      for (Index s = 0; s < take; ++s) {
        auto const j = s + static_cast<Index>(region_rng.below(static_cast<std::uint64_t>(n - s)));
        std::swap(idx[s], idx[j]);
        Index const flat = idx[s];
        if (std::abs(static_cast<double>(input(r0 + flat / w, c0 + flat % w))) > theta) { ++above; }
      }
      if (static_cast<double>(above) >= cfg.vote_threshold * static_cast<double>(take) - 1e-12) {
        labels[static_cast<std::size_t>(r * gc + c)] = Sensitivity::Sensitive;
      }
    }
  }
  return SensitivityMask::from_labels(input.rows(), input.cols(), cfg.region_rows, cfg.region_cols,
                                      std::move(labels), cfg.drop_sensitive, cfg.drop_insensitive);
}

/// Drop each row independently with its region-derived probability.
///
/// If every row is dropped the draw is repeated once; if that also drops
/// everything, the row with the largest L1 norm in `input` is kept.
template <typename Scalar>
BinaryMask rsdp_select(SensitivityMask const &mask, Matrix<Scalar> const &input, SeededRng &rng)
{
  if (input.rows() != mask.source_rows) { throw ShapeError("rsdp_select: input rows differ from the mask"); }
  auto const probs = row_drop_probabilities(mask);
  std::vector<std::uint8_t> keep(probs.size());
  for (int attempt = 0; attempt < 2; ++attempt) {
    bool any = false;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      keep[i] = rng.uniform() < probs[i] ? 0 : 1;
      any = any || keep[i];
    }
    if (any) { return BinaryMask::rows(std::move(keep)); }
  }
  Index best = 0;
  input.cwiseAbs().rowwise().sum().maxCoeff(&best);
  keep[static_cast<std::size_t>(best)] = 1;
  return BinaryMask::rows(std::move(keep));
}

/// Block selection with balanced per-group kept counts.
///
/// Blocks are the full tiles of the input matrix; the blocks of one tile row
/// form a group. The total budget is round(sum of block keep probabilities),
/// split evenly so group counts differ by at most one. Blocks with zero drop
/// probability are never dropped; when that forces a group above the even
/// share, the common budget rises and the other groups take the lower count.
/// Extra units go to the groups with the highest total keep probability,
/// ties broken by a sampled priority. Within a group, blocks are taken in
/// ascending drop probability, ties broken by a sampled priority.
BinaryMask bsdp_select(SensitivityMask const &mask, Index rows, Index cols, TileConfig tile, SeededRng &rng);

/// Kept blocks in every tile row of a tile mask.
std::vector<Index> kept_per_group(BinaryMask const &mask);

/// Quantile part of every value by magnitude (row-major order).
///
/// Sorting |value| descending, position j (0-based) of n belongs to part
/// floor(j*parts/n)+1. Values tied in magnitude all take the part of the
/// first tied position, so ties go to the higher-magnitude part.
template <typename Scalar>
std::vector<int> partition_by_magnitude(Matrix<Scalar> const &values, int parts)
{
  if (parts < 2) { throw ParameterError("partition_by_magnitude: parts must be >= 2"); }
  auto const n = static_cast<std::size_t>(values.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto mag = [&](std::size_t i) { return std::abs(values.data()[i]); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mag(a) > mag(b); });
  std::vector<int> labels(n, 1);
  int current = 1;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == 0 || mag(order[j]) != mag(order[j - 1])) {
      current = static_cast<int>((j * static_cast<std::size_t>(parts)) / n) + 1;
    }
    labels[order[j]] = current;
  }
  return labels;
}

} // namespace structdrop

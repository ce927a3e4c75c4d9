#pragma once

#include "structdrop/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace structdrop {

enum class Granularity
{
  Row,
  Tile
};

std::string to_string(Granularity g);
Granularity granularity_from_string(std::string const &s);

/// Tile extent for tile-based patterns: x rows by y columns.
struct TileConfig
{
  Index rows = 32;
  Index cols = 32;

  void validate() const;
  bool operator==(TileConfig const &) const = default;
};

/// One regular pattern: keep one unit in every `period` units, starting at
/// the 1-based unit `bias`.
struct DropoutPattern
{
  Granularity kind = Granularity::Row;
  Index period = 1;
  Index bias = 1;

  double drop_fraction() const { return static_cast<double>(period - 1) / static_cast<double>(period); }
  bool operator==(DropoutPattern const &) const = default;
};

/// Keep/drop flags for the rows of an M-row matrix, or for the full x-by-y
/// tiles of an M x N matrix (tile grid linearized row-major).
///
/// Trailing rows/columns that do not fill a whole tile are not represented by
/// a bit and are always kept. A mask that would drop everything is rejected.
class BinaryMask
{
public:
  static BinaryMask rows(std::vector<std::uint8_t> keep);
  static BinaryMask tiles(Index rows, Index cols, TileConfig tile, std::vector<std::uint8_t> keep);
  static BinaryMask all_rows(Index rows);

  Granularity granularity() const { return granularity_; }
  Index source_rows() const { return rows_; }
  Index source_cols() const { return cols_; }
  TileConfig tile() const { return tile_; }
  Index grid_rows() const;
  Index grid_cols() const;

  Index size() const { return static_cast<Index>(bits_.size()); }
  Index kept_count() const { return kept_; }
  /// 0-based unit index.
  bool kept(Index unit) const { return bits_[static_cast<std::size_t>(unit)] != 0; }
  bool tile_kept(Index tile_row, Index tile_col) const { return kept(tile_row * grid_cols() + tile_col); }
  bool all_kept() const { return kept_ == size(); }
  /// Row or column remainder outside the tile grid.
  bool has_ragged_edge() const;
  std::vector<std::uint8_t> const &bits() const { return bits_; }

  bool operator==(BinaryMask const &) const = default;

private:
  BinaryMask(Granularity g, Index rows, Index cols, TileConfig tile, std::vector<std::uint8_t> bits);

  Granularity granularity_;
  Index rows_;
  Index cols_;
  TileConfig tile_;
  std::vector<std::uint8_t> bits_;
  Index kept_ = 0;
};

/// Largest admissible period for a matrix: M for rows,
/// floor(M/x)*floor(N/y) for tiles, never below 1.
Index pattern_space(Granularity kind, Index rows, Index cols, TileConfig tile = {});

/// Row i (1-based) kept iff (i - bias) mod period == 0.
BinaryMask row_mask(Index period, Index bias, Index rows);
/// Tile t (1-based, row-major over the grid) kept iff (t - bias) mod period == 0.
BinaryMask tile_mask(Index period, Index bias, Index rows, Index cols, TileConfig tile = {});
BinaryMask make_mask(DropoutPattern const &pattern, Index rows, Index cols, TileConfig tile = {});

/// Kept units over all units (1 for a mask with no units).
double mask_keep_fraction(BinaryMask const &mask);

/// Bits packed LSB-first, eight units per byte.
std::vector<std::uint8_t> pack_bits(BinaryMask const &mask);
nlohmann::json mask_header(BinaryMask const &mask);
BinaryMask unpack_mask(std::vector<std::uint8_t> const &bytes, nlohmann::json const &header);
/// Writes `path` (packed bits) and `path + ".json"` (header sidecar).
void save_mask(std::string const &path, BinaryMask const &mask);
BinaryMask load_mask(std::string const &path);

} // namespace structdrop

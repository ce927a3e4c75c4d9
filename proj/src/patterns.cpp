#include "structdrop/patterns.hpp"

#include "structdrop/error.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

namespace structdrop {

std::string to_string(Granularity g) { return g == Granularity::Row ? "row" : "tile"; }

Granularity granularity_from_string(std::string const &s)
{
  if (s == "row") { return Granularity::Row; }
  if (s == "tile") { return Granularity::Tile; }
  throw ParameterError("granularity must be 'row' or 'tile', got '" + s + "'");
}

void TileConfig::validate() const
{
  if (rows < 1 || cols < 1) { throw ParameterError("TileConfig: tile extents must be >= 1"); }
}

BinaryMask::BinaryMask(Granularity g, Index rows, Index cols, TileConfig tile, std::vector<std::uint8_t> bits)
  : granularity_(g)
  , rows_(rows)
  , cols_(cols)
  , tile_(tile)
  , bits_(std::move(bits))
{
  for (auto &b : bits_) {
    if (b > 1) { throw ParameterError("BinaryMask: bits must be 0 or 1"); }
    kept_ += b;
  }
  if (kept_ == 0 && !has_ragged_edge()) { throw ParameterError("BinaryMask: mask drops every unit"); }
}

BinaryMask BinaryMask::rows(std::vector<std::uint8_t> keep)
{
  if (keep.empty()) { throw ShapeError("BinaryMask::rows: empty mask"); }
  auto const m = static_cast<Index>(keep.size());
  return BinaryMask(Granularity::Row, m, 0, TileConfig{}, std::move(keep));
}

BinaryMask BinaryMask::all_rows(Index rows)
{
  return BinaryMask::rows(std::vector<std::uint8_t>(static_cast<std::size_t>(rows), 1));
}

BinaryMask BinaryMask::tiles(Index rows, Index cols, TileConfig tile, std::vector<std::uint8_t> keep)
{
  tile.validate();
  if (rows < 1 || cols < 1) { throw ShapeError("BinaryMask::tiles: matrix dims must be >= 1"); }
  auto const expected = (rows / tile.rows) * (cols / tile.cols);
  if (static_cast<Index>(keep.size()) != expected) {
    throw ShapeError("BinaryMask::tiles: expected " + std::to_string(expected) + " tile bits, got " +
                     std::to_string(keep.size()));
  }
  return BinaryMask(Granularity::Tile, rows, cols, tile, std::move(keep));
}

Index BinaryMask::grid_rows() const
{
  return granularity_ == Granularity::Row ? rows_ : rows_ / tile_.rows;
}

Index BinaryMask::grid_cols() const { return granularity_ == Granularity::Row ? 1 : cols_ / tile_.cols; }

bool BinaryMask::has_ragged_edge() const
{
  if (granularity_ == Granularity::Row) { return false; }
  return rows_ % tile_.rows != 0 || cols_ % tile_.cols != 0;
}

Index pattern_space(Granularity kind, Index rows, Index cols, TileConfig tile)
{
  if (kind == Granularity::Row) { return std::max<Index>(rows, 1); }
  tile.validate();
  return std::max<Index>((rows / tile.rows) * (cols / tile.cols), 1);
}

namespace {

void check_period_bias(Index period, Index bias, Index units)
{
  if (period < 1) { throw ParameterError("pattern period must be >= 1"); }
  if (bias < 1 || bias > period) { throw ParameterError("pattern bias must lie in [1, period]"); }
  if (period > std::max<Index>(units, 1)) { throw ParameterError("pattern period exceeds the pattern space"); }
}

std::vector<std::uint8_t> periodic_bits(Index period, Index bias, Index units)
{
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(units), 0);
  // 1-based unit u is kept iff (u - bias) mod period == 0, i.e. u = bias, bias + period, ...
  for (Index u = bias; u <= units; u += period) { bits[static_cast<std::size_t>(u - 1)] = 1; }
  return bits;
}

} // namespace

BinaryMask row_mask(Index period, Index bias, Index rows)
{
  if (rows < 1) { throw ShapeError("row_mask: rows must be >= 1"); }
  check_period_bias(period, bias, rows);
  return BinaryMask::rows(periodic_bits(period, bias, rows));
}

BinaryMask tile_mask(Index period, Index bias, Index rows, Index cols, TileConfig tile)
{
  tile.validate();
  if (rows < 1 || cols < 1) { throw ShapeError("tile_mask: dims must be >= 1"); }
  Index const units = (rows / tile.rows) * (cols / tile.cols);
  check_period_bias(period, bias, units);
  return BinaryMask::tiles(rows, cols, tile, periodic_bits(period, bias, units));
}

BinaryMask make_mask(DropoutPattern const &pattern, Index rows, Index cols, TileConfig tile)
{
  if (pattern.kind == Granularity::Row) { return row_mask(pattern.period, pattern.bias, rows); }
  return tile_mask(pattern.period, pattern.bias, rows, cols, tile);
}

double mask_keep_fraction(BinaryMask const &mask)
{
  if (mask.size() == 0) { return 1.0; }
  return static_cast<double>(mask.kept_count()) / static_cast<double>(mask.size());
}

std::vector<std::uint8_t> pack_bits(BinaryMask const &mask)
{
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>((mask.size() + 7) / 8), 0);
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask.kept(i)) { bytes[static_cast<std::size_t>(i / 8)] |= static_cast<std::uint8_t>(1u << (i % 8)); }
  }
  return bytes;
}

nlohmann::json mask_header(BinaryMask const &mask)
{
  return {{"granularity", to_string(mask.granularity())},
          {"M", mask.source_rows()},
          {"N", mask.source_cols()},
          {"tile_x", mask.tile().rows},
          {"tile_y", mask.tile().cols}};
}

BinaryMask unpack_mask(std::vector<std::uint8_t> const &bytes, nlohmann::json const &header)
{
  try {
    auto const g = granularity_from_string(header.at("granularity").get<std::string>());
    auto const m = header.at("M").get<Index>();
    auto const n = header.at("N").get<Index>();
    TileConfig const tile{header.at("tile_x").get<Index>(), header.at("tile_y").get<Index>()};
    Index const units = g == Granularity::Row ? m : (m / tile.rows) * (n / tile.cols);
    if (static_cast<Index>(bytes.size()) != (units + 7) / 8) { throw FormatError("mask: byte count mismatch"); }
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(units));
    for (Index i = 0; i < units; ++i) { bits[i] = (bytes[i / 8] >> (i % 8)) & 1u; }
    return g == Granularity::Row ? BinaryMask::rows(std::move(bits)) : BinaryMask::tiles(m, n, tile, std::move(bits));
  } catch (nlohmann::json::exception const &e) {
    throw FormatError(std::string("mask header: ") + e.what());
  }
}

void save_mask(std::string const &path, BinaryMask const &mask)
{
  auto const bytes = pack_bits(mask);
  std::ofstream out(path, std::ios::binary);
  std::ofstream side(path + ".json");
  if (!out || !side) { throw FormatError("cannot write mask to " + path); }
  out.write(reinterpret_cast<char const *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  side << mask_header(mask).dump() << '\n';
}

BinaryMask load_mask(std::string const &path)
{
  std::ifstream in(path, std::ios::binary);
  std::ifstream side(path + ".json");
  if (!in || !side) { throw FormatError("cannot read mask from " + path); }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json header;
  try {
    side >> header;
  } catch (nlohmann::json::exception const &e) {
    throw FormatError(std::string("mask sidecar: ") + e.what());
  }
  return unpack_mask(bytes, header);
}

} // namespace structdrop

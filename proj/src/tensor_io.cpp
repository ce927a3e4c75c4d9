#include "structdrop/tensor.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <vector>

namespace structdrop {

namespace {

void put_u32(std::ostream &out, std::uint32_t v)
{
  std::array<char, 4> bytes{};
  for (int i = 0; i < 4; ++i) { bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu); }
  out.write(bytes.data(), 4);
}

std::uint32_t get_u32(std::istream &in)
{
  std::array<unsigned char, 4> bytes{};
  in.read(reinterpret_cast<char *>(bytes.data()), 4);
  if (!in) { throw FormatError("matrix binary: truncated header"); }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) { v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i); }
  return v;
}

} // namespace

void write_matrix_binary(std::ostream &out, Matrix<float> const &m)
{
  if (m.rows() < 1 || m.cols() < 1 || m.rows() > std::numeric_limits<std::uint32_t>::max() ||
      m.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw ShapeError("matrix binary: dimensions must be in [1, 2^32)");
  }
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Index i = 0; i < m.size(); ++i) { put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i])); }
  if (!out) { throw FormatError("matrix binary: write failed"); }
}

Matrix<float> read_matrix_binary(std::istream &in)
{
  auto const rows = get_u32(in);
  auto const cols = get_u32(in);
  if (rows == 0 || cols == 0) { throw FormatError("matrix binary: zero dimension"); }
  Matrix<float> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) { m.data()[i] = std::bit_cast<float>(get_u32(in)); }
  return m;
}

void save_matrix_binary(std::string const &path, Matrix<float> const &m)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) { throw FormatError("cannot open " + path); }
  write_matrix_binary(out, m);
}

Matrix<float> load_matrix_binary(std::string const &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) { throw FormatError("cannot open " + path); }
  return read_matrix_binary(in);
}

Matrix<double> read_matrix_csv(std::istream &in)
{
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') { line.pop_back(); }
    if (line.find_first_not_of(" \t") == std::string::npos) { continue; }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t", used) != std::string::npos) { throw std::invalid_argument(cell); }
      } catch (std::exception const &) {
        throw FormatError("csv: not a number: '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) { throw FormatError("csv: ragged rows"); }
    rows.push_back(std::move(row));
  }
  if (rows.empty() || rows.front().empty()) { throw FormatError("csv: no data"); }
  Matrix<double> m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) { m(r, c) = rows[r][c]; }
  }
  return m;
}

Matrix<double> load_matrix_csv(std::string const &path)
{
  std::ifstream in(path);
  if (!in) { throw FormatError("cannot open " + path); }
  return read_matrix_csv(in);
}

} // namespace structdrop

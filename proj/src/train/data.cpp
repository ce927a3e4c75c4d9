#include "structdrop/train/data.hpp"

#include "structdrop/error.hpp"
#include "structdrop/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

namespace structdrop {

ImageDataset ImageDataset::head(Index n) const
{
  n = std::min(n, size());
  ImageDataset out;
  out.images = images.topRows(n);
  out.labels.assign(labels.begin(), labels.begin() + n);
  out.rows = rows;
  out.cols = cols;
  return out;
}

namespace {

std::uint32_t read_be32(std::istream &in, std::string const &what)
{
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char *>(b.data()), 4);
  if (!in) { throw FormatError(what + ": truncated header"); }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream &out, std::uint32_t v)
{
  std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>((v >> 16) & 0xFF),
                        static_cast<char>((v >> 8) & 0xFF), static_cast<char>(v & 0xFF)};
  out.write(b.data(), 4);
}

} // namespace

ImageDataset load_idx(std::string const &images_path, std::string const &labels_path)
{
  std::ifstream img(images_path, std::ios::binary);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!img) { throw FormatError("cannot open " + images_path); }
  if (!lab) { throw FormatError("cannot open " + labels_path); }
  if (read_be32(img, images_path) != 0x00000803) { throw FormatError(images_path + ": not an IDX u8 image file"); }
  if (read_be32(lab, labels_path) != 0x00000801) { throw FormatError(labels_path + ": not an IDX u8 label file"); }
  auto const n = read_be32(img, images_path);
  auto const rows = read_be32(img, images_path);
  auto const cols = read_be32(img, images_path);
  auto const nl = read_be32(lab, labels_path);
  if (n != nl) { throw FormatError("IDX image and label counts differ"); }
  if (n == 0 || rows == 0 || cols == 0) { throw FormatError("IDX: empty dataset"); }

  ImageDataset data;
  data.rows = rows;
  data.cols = cols;
  data.images.resize(n, static_cast<Index>(rows) * cols);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (Index i = 0; i < static_cast<Index>(n); ++i) {
    img.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!img) { throw FormatError(images_path + ": truncated pixel data"); }
    for (std::size_t p = 0; p < buf.size(); ++p) { data.images(i, static_cast<Index>(p)) = buf[p] / 255.0f; }
  }
  data.labels.resize(n);
  lab.read(reinterpret_cast<char *>(data.labels.data()), n);
  if (!lab) { throw FormatError(labels_path + ": truncated label data"); }
  return data;
}

void save_idx(ImageDataset const &data, std::string const &images_path, std::string const &labels_path)
{
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) { throw FormatError("cannot write IDX files"); }
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(data.size()));
  write_be32(img, static_cast<std::uint32_t>(data.rows));
  write_be32(img, static_cast<std::uint32_t>(data.cols));
  for (Index i = 0; i < data.images.size(); ++i) {
    float const v = std::clamp(data.images.data()[i], 0.0f, 1.0f);
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
  }
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(data.labels.size()));
  lab.write(reinterpret_cast<char const *>(data.labels.data()), static_cast<std::streamsize>(data.labels.size()));
}

namespace {

struct Point
{
  double x;
  double y;
};

using Stroke = std::vector<Point>;

// Angles in degrees, y axis pointing down (90 is the bottom of the arc).
Stroke arc(double cx, double cy, double rx, double ry, double from, double to, int steps = 24)
{
  Stroke s;
  for (int i = 0; i <= steps; ++i) {
    double const a = (from + (to - from) * i / steps) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

std::vector<Stroke> glyph(int digit)
{
  switch (digit) {
  case 0: return {arc(0.5, 0.5, 0.26, 0.37, 0, 360, 36)};
  case 1: return {{{0.36, 0.26}, {0.52, 0.12}, {0.52, 0.88}}};
  case 2: {
    Stroke s = arc(0.5, 0.32, 0.23, 0.19, 190, 380);
    s.push_back({0.26, 0.87});
    s.push_back({0.78, 0.87});
    return {s};
  }
  case 3: {
    Stroke s = arc(0.48, 0.3, 0.21, 0.17, 200, 450);
    Stroke lower = arc(0.48, 0.67, 0.25, 0.2, -90, 150);
    s.insert(s.end(), lower.begin(), lower.end());
    return {s};
  }
  case 4: return {{{0.62, 0.88}, {0.62, 0.12}, {0.2, 0.63}, {0.8, 0.63}}};
  case 5: {
    Stroke s{{0.74, 0.12}, {0.34, 0.12}, {0.31, 0.45}};
    Stroke bowl = arc(0.5, 0.64, 0.24, 0.23, -145, 150);
    s.insert(s.end(), bowl.begin(), bowl.end());
    return {s};
  }
  case 6: return {{{0.67, 0.13}, {0.47, 0.24}, {0.33, 0.43}, {0.28, 0.65}}, arc(0.5, 0.66, 0.22, 0.21, 0, 360, 30)};
  case 7: return {{{0.22, 0.14}, {0.78, 0.14}, {0.42, 0.88}}};
  case 8: return {arc(0.5, 0.3, 0.19, 0.17, 0, 360, 30), arc(0.5, 0.67, 0.23, 0.2, 0, 360, 30)};
  default: return {arc(0.5, 0.33, 0.21, 0.2, 0, 360, 30), {{0.71, 0.34}, {0.68, 0.6}, {0.55, 0.88}}};
  }
}

double segment_distance(Point p, Point a, Point b)
{
  double const dx = b.x - a.x;
  double const dy = b.y - a.y;
  double const len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double const ex = a.x + t * dx - p.x;
  double const ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

} // namespace

ImageDataset synthetic_digits(Index count, std::uint64_t seed)
{
  constexpr Index side = 28;
  ImageDataset data;
  data.rows = side;
  data.cols = side;
  data.images = Matrix<float>::Zero(count, side * side);
  data.labels.resize(static_cast<std::size_t>(count));
  SeededRng rng(seed);

  for (Index n = 0; n < count; ++n) {
    int const digit = static_cast<int>(rng.below(10));
    data.labels[n] = static_cast<std::uint8_t>(digit);

    double const scale = 19.0 * (0.78 + 0.22 * rng.uniform());
    double const aspect = 0.85 + 0.3 * rng.uniform();
    double const angle = 0.18 * rng.normal();
    double const shear = 0.25 * (2.0 * rng.uniform() - 1.0);
    double const tx = 14.0 + 2.0 * (2.0 * rng.uniform() - 1.0);
    double const ty = 14.0 + 2.0 * (2.0 * rng.uniform() - 1.0);
    double const width = 1.3 + 1.5 * rng.uniform();
    double const wobble_amp = 0.03 * rng.uniform();
    double const wobble_phase = 2.0 * std::numbers::pi * rng.uniform();
    double const ca = std::cos(angle);
    double const sa = std::sin(angle);

    std::vector<Stroke> strokes = glyph(digit);
    for (auto &s : strokes) {
      for (auto &p : s) {
        double x = p.x - 0.5 + 0.012 * rng.normal() + wobble_amp * std::sin(6.0 * p.y + wobble_phase);
        double y = p.y - 0.5 + 0.012 * rng.normal();
        x = (x + shear * y) * aspect;
        double const rx = ca * x - sa * y;
        double const ry = sa * x + ca * y;
        p = {tx + scale * rx, ty + scale * ry};
      }
    }

    for (Index py = 0; py < side; ++py) {
      for (Index px = 0; px < side; ++px) {
        Point const c{static_cast<double>(px) + 0.5, static_cast<double>(py) + 0.5};
        double d = 1e9;
        for (auto const &s : strokes) {
          for (std::size_t i = 1; i < s.size(); ++i) { d = std::min(d, segment_distance(c, s[i - 1], s[i])); }
        }
        double v = std::clamp(0.5 * width + 0.5 - d, 0.0, 1.0);
        v = std::clamp(v + 0.06 * rng.normal(), 0.0, 1.0);
        if (v < 0.08) { v = 0.0; }
        data.images(n, py * side + px) = static_cast<float>(v);
      }
    }
  }
  return data;
}

TextCorpus TextCorpus::encode(std::string const &text) const
{
  TextCorpus out;
  out.alphabet = alphabet;
  std::array<int, 256> index{};
  index.fill(-1);
  for (std::size_t i = 0; i < alphabet.size(); ++i) { index[static_cast<unsigned char>(alphabet[i])] = static_cast<int>(i); }
  out.tokens.reserve(text.size());
  for (char ch : text) {
    int const id = index[static_cast<unsigned char>(ch)];
    if (id < 0) { throw FormatError("text: byte outside the corpus alphabet"); }
    out.tokens.push_back(id);
  }
  return out;
}

std::pair<TextCorpus, TextCorpus> TextCorpus::split(double fraction) const
{
  if (!(fraction > 0.0 && fraction < 1.0)) { throw ParameterError("TextCorpus::split: fraction must be in (0, 1)"); }
  auto const cut = static_cast<std::ptrdiff_t>(fraction * static_cast<double>(tokens.size()));
  TextCorpus a{alphabet, {tokens.begin(), tokens.begin() + cut}};
  TextCorpus b{alphabet, {tokens.begin() + cut, tokens.end()}};
  return {a, b};
}

TextCorpus text_corpus(std::string const &text)
{
  if (text.empty()) { throw FormatError("text: empty corpus"); }
  std::set<unsigned char> seen(text.begin(), text.end());
  TextCorpus base;
  base.alphabet.assign(seen.begin(), seen.end());
  return base.encode(text);
}

TextCorpus load_text(std::string const &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) { throw FormatError("cannot open " + path); }
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text_corpus(text);
}

std::string synthetic_text(Index chars, std::uint64_t seed)
{
  static constexpr std::array<char const *, 40> words{
    "the",   "a",     "cat",  "dog",   "runs",  "sees",   "over",  "under",  "red",    "blue",
    "small", "large", "tree", "house", "river", "stone",  "walks", "finds",  "near",   "far",
    "quick", "slow",  "bird", "fish",  "eats",  "drinks", "water", "bread",  "light",  "dark",
    "old",   "young", "king", "queen", "sings", "sleeps", "hill",  "valley", "bright", "quiet"};
  SeededRng rng(seed);
  constexpr std::size_t W = words.size();
  constexpr int succ = 4;
  std::array<std::array<std::size_t, succ>, W> next{};
  std::array<std::array<double, succ>, W> weight{};
  for (std::size_t w = 0; w < W; ++w) {
    double total = 0.0;
    for (int s = 0; s < succ; ++s) {
      next[w][s] = rng.below(W);
      weight[w][s] = 0.2 + rng.uniform();
      total += weight[w][s];
    }
    for (int s = 0; s < succ; ++s) { weight[w][s] /= total; }
  }

  std::string out;
  out.reserve(static_cast<std::size_t>(chars) + 16);
  std::size_t w = rng.below(W);
  int in_sentence = 0;
  while (static_cast<Index>(out.size()) < chars) {
    out += words[w];
    ++in_sentence;
    if (in_sentence >= 4 && rng.uniform() < 0.25) {
      out += ". ";
      in_sentence = 0;
      w = rng.below(W);
      continue;
    }
    out += ' ';
    double const u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = next[w][succ - 1];
    for (int s = 0; s < succ; ++s) {
      acc += weight[w][s];
      if (u < acc) {
        pick = next[w][s];
        break;
      }
    }
    w = pick;
  }
  out.resize(static_cast<std::size_t>(chars));
  return out;
}

} // namespace structdrop

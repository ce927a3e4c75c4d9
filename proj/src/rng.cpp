#include "structdrop/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace structdrop {

std::uint64_t mix64(std::uint64_t x)
{
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

SeededRng::SeededRng(std::uint64_t seed)
  : seed_(seed)
  , engine_(seed)
{
}

std::uint64_t SeededRng::next_u64() { return engine_(); }

double SeededRng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t SeededRng::below(std::uint64_t n)
{
  if (n == 0) { throw std::invalid_argument("SeededRng::below: n must be positive"); }
  unsigned __int128 m = static_cast<unsigned __int128>(engine_()) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    std::uint64_t const threshold = (0 - n) % n;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(engine_()) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

std::int64_t SeededRng::between(std::int64_t lo, std::int64_t hi)
{
  if (hi < lo) { throw std::invalid_argument("SeededRng::between: empty range"); }
  auto const span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(below(span));
}

double SeededRng::normal()
{
  double u1 = uniform();
  while (u1 <= 0.0) { u1 = uniform(); }
  double const u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::derive(std::uint64_t base, std::uint64_t stream)
{
  return SeededRng(mix64(base ^ mix64(stream + 0x632BE59BD9B4E019ULL)));
}

} // namespace structdrop

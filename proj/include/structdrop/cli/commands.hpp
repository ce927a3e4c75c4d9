#pragma once

#include "structdrop/patterns.hpp"
#include "structdrop/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace structdrop::cli {

enum ExitCode : int
{
  Ok = 0,
  UserError = 2,
  InternalError = 3
};

struct GemmBenchRow
{
  Index m = 0, k = 0, n = 0;
  Granularity granularity = Granularity::Row;
  double keep = 1.0;
  std::int64_t macs_performed = 0;
  std::int64_t macs_dense = 0;
  std::int64_t wall_ns_masked = 0; ///< median
  std::int64_t wall_ns_dense = 0;  ///< median
  double speedup() const;
};

/// Times masked vs dense W(m x k) * X(k x n) with the regular pattern
/// dp = round(1/keep), b = 1. Reps alternate dense and masked runs.
GemmBenchRow bench_masked_gemm(Index m, Index k, Index n, Granularity g, double keep, int reps, TileConfig tile,
                               std::uint64_t seed);

std::string bench_csv_header();
std::string bench_csv_row(GemmBenchRow const &r);

/// Thread count for the inner products: --threads, else MASKGEMM_THREADS, else 0 (library default).
int resolve_threads(int flag);

/// Entry point of the `structdrop` tool; never throws.
int run(std::vector<std::string> const &args, std::ostream &out, std::ostream &err);

} // namespace structdrop::cli

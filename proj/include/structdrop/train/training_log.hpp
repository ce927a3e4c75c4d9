#pragma once

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace structdrop {

/// Multiply-accumulate tallies, split into executed and dense-equivalent.
struct MacCounter
{
  std::int64_t performed = 0;
  std::int64_t dense = 0;

  void add(std::int64_t p, std::int64_t d)
  {
    performed += p;
    dense += d;
  }
  MacCounter &operator+=(MacCounter const &o)
  {
    add(o.performed, o.dense);
    return *this;
  }
  bool operator==(MacCounter const &) const = default;
};

struct EpochRecord
{
  int epoch = 0;
  std::int64_t iter = 0;       ///< iterations completed so far
  double loss = 0.0;           ///< mean training loss over the epoch
  double metric = 0.0;         ///< test accuracy, or validation perplexity
  double dropout_ratio = 0.0;  ///< ratio in force this epoch
  /// Analytic expectation of dropout_macs.performed / dropout_macs.dense.
  double expected_keep = 1.0;
  MacCounter macs;             ///< every layer
  MacCounter dropout_macs;     ///< the layers dropout applies to
  std::int64_t wall_ns = 0;

  bool operator==(EpochRecord const &) const = default;
};

struct TrainLog
{
  std::string model;
  std::string metric_name = "acc";
  std::vector<EpochRecord> epochs;

  double final_metric() const { return epochs.empty() ? 0.0 : epochs.back().metric; }
  MacCounter total_macs() const;
  MacCounter total_dropout_macs() const;
};

nlohmann::json to_json(EpochRecord const &r, std::string const &metric_name);
/// One JSON object per line. Timing is omitted when `with_timing` is false,
/// which makes logs of identical runs byte-identical.
void write_jsonl(std::ostream &out, TrainLog const &log, bool with_timing = true);
std::string to_jsonl(TrainLog const &log, bool with_timing = true);

} // namespace structdrop

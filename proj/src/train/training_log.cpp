#include "structdrop/train/training_log.hpp"

#include <ostream>
#include <sstream>

namespace structdrop {

MacCounter TrainLog::total_macs() const
{
  MacCounter m;
  for (auto const &e : epochs) { m += e.macs; }
  return m;
}

MacCounter TrainLog::total_dropout_macs() const
{
  MacCounter m;
  for (auto const &e : epochs) { m += e.dropout_macs; }
  return m;
}

nlohmann::json to_json(EpochRecord const &r, std::string const &metric_name)
{
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["iter"] = r.iter;
  j["loss"] = r.loss;
  j[metric_name] = r.metric;
  j["dropout_ratio"] = r.dropout_ratio;
  j["expected_keep"] = r.expected_keep;
  j["macs"] = r.macs.performed;
  j["macs_dense"] = r.macs.dense;
  j["dropout_macs"] = r.dropout_macs.performed;
  j["dropout_macs_dense"] = r.dropout_macs.dense;
  j["wall_ns"] = r.wall_ns;
  return j;
}

void write_jsonl(std::ostream &out, TrainLog const &log, bool with_timing)
{
  for (auto const &e : log.epochs) {
    auto j = to_json(e, log.metric_name);
    j["model"] = log.model;
    if (!with_timing) { j.erase("wall_ns"); }
    out << j.dump() << '\n';
  }
}

std::string to_jsonl(TrainLog const &log, bool with_timing)
{
  std::ostringstream os;
  write_jsonl(os, log, with_timing);
  return os.str();
}

} // namespace structdrop

#include "structdrop/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace structdrop {

void SensitivityConfig::validate() const
{
  if (region_rows < 1 || region_cols < 1) { throw ParameterError("sensitivity: region extents must be >= 1"); }
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
    throw ParameterError("sensitivity: sample fraction must be in (0, 1]");
  }
  if (!(vote_threshold > 0.0 && vote_threshold <= 1.0)) {
    throw ParameterError("sensitivity: vote threshold must be in (0, 1]");
  }
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(drop_sensitive) || !in_unit(drop_insensitive)) {
    throw ParameterError("sensitivity: drop probabilities must be in [0, 1]");
  }
  if (!(drop_insensitive > drop_sensitive)) {
    throw ParameterError("sensitivity: insensitive drop probability must exceed the sensitive one");
  }
}

Index SensitivityMask::sensitive_count() const
{
  return static_cast<Index>(std::count(labels.begin(), labels.end(), Sensitivity::Sensitive));
}

SensitivityMask SensitivityMask::from_labels(Index source_rows, Index source_cols, Index region_rows,
                                             Index region_cols, std::vector<Sensitivity> labels,
                                             double drop_sensitive, double drop_insensitive)
{
  if (source_rows < 1 || source_cols < 1) { throw ShapeError("SensitivityMask: empty source matrix"); }
  if (region_rows < 1 || region_cols < 1) { throw ParameterError("SensitivityMask: region extents must be >= 1"); }
  SensitivityMask m;
  m.source_rows = source_rows;
  m.source_cols = source_cols;
  m.region_rows = region_rows;
  m.region_cols = region_cols;
  m.grid_rows = (source_rows + region_rows - 1) / region_rows;
  m.grid_cols = (source_cols + region_cols - 1) / region_cols;
  if (static_cast<Index>(labels.size()) != m.grid_rows * m.grid_cols) {
    throw ShapeError("SensitivityMask: label count does not match the region grid");
  }
  m.labels = std::move(labels);
  m.drop_prob.resize(m.labels.size());
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    m.drop_prob[i] = m.labels[i] == Sensitivity::Sensitive ? drop_sensitive : drop_insensitive;
  }
  return m;
}

nlohmann::json to_json(SensitivityMask const &mask)
{
  std::vector<int> labels(mask.labels.size());
  std::transform(mask.labels.begin(), mask.labels.end(), labels.begin(),
                 [](Sensitivity s) { return static_cast<int>(s); });
  return {{"source_rows", mask.source_rows}, {"source_cols", mask.source_cols},
          {"region_rows", mask.region_rows}, {"region_cols", mask.region_cols},
          {"grid_rows", mask.grid_rows},     {"grid_cols", mask.grid_cols},
          {"labels", labels},                {"drop_prob", mask.drop_prob}};
}

SensitivityMask sensitivity_mask_from_json(nlohmann::json const &j)
{
  try {
    SensitivityMask m;
    m.source_rows = j.at("source_rows").get<Index>();
    m.source_cols = j.at("source_cols").get<Index>();
    m.region_rows = j.at("region_rows").get<Index>();
    m.region_cols = j.at("region_cols").get<Index>();
    m.grid_rows = j.at("grid_rows").get<Index>();
    m.grid_cols = j.at("grid_cols").get<Index>();
    for (int v : j.at("labels").get<std::vector<int>>()) {
      if (v != 0 && v != 1) { throw FormatError("sensitivity mask: labels must be 0 or 1"); }
      m.labels.push_back(static_cast<Sensitivity>(v));
    }
    m.drop_prob = j.at("drop_prob").get<std::vector<double>>();
    auto const cells = static_cast<std::size_t>(m.grid_rows * m.grid_cols);
    if (m.labels.size() != cells || m.drop_prob.size() != cells ||
        m.grid_rows != (m.source_rows + m.region_rows - 1) / m.region_rows ||
        m.grid_cols != (m.source_cols + m.region_cols - 1) / m.region_cols) {
      throw FormatError("sensitivity mask: inconsistent grid");
    }
    return m;
  } catch (nlohmann::json::exception const &e) {
    throw FormatError(std::string("sensitivity mask json: ") + e.what());
  }
}

std::vector<double> row_drop_probabilities(SensitivityMask const &mask)
{
  std::vector<double> probs(static_cast<std::size_t>(mask.source_rows));
  for (Index band = 0; band < mask.grid_rows; ++band) {
    double q = std::numeric_limits<double>::infinity();
    for (Index c = 0; c < mask.grid_cols; ++c) { q = std::min(q, mask.prob(band, c)); }
    Index const end = std::min(mask.source_rows, (band + 1) * mask.region_rows);
    for (Index r = band * mask.region_rows; r < end; ++r) { probs[static_cast<std::size_t>(r)] = q; }
  }
  return probs;
}

std::vector<double> block_drop_probabilities(SensitivityMask const &mask, TileConfig tile)
{
  tile.validate();
  Index const gr = mask.source_rows / tile.rows;
  Index const gc = mask.source_cols / tile.cols;
  std::vector<double> probs(static_cast<std::size_t>(gr * gc));
  for (Index br = 0; br < gr; ++br) {
    Index const r0 = br * tile.rows / mask.region_rows;
    Index const r1 = ((br + 1) * tile.rows - 1) / mask.region_rows;
    for (Index bc = 0; bc < gc; ++bc) {
      Index const c0 = bc * tile.cols / mask.region_cols;
      Index const c1 = ((bc + 1) * tile.cols - 1) / mask.region_cols;
      double q = std::numeric_limits<double>::infinity();
      for (Index r = r0; r <= r1; ++r) {
        for (Index c = c0; c <= c1; ++c) { q = std::min(q, mask.prob(r, c)); }
      }
      probs[static_cast<std::size_t>(br * gc + bc)] = q;
    }
  }
  return probs;
}

BinaryMask bsdp_select(SensitivityMask const &mask, Index rows, Index cols, TileConfig tile, SeededRng &rng)
{
  tile.validate();
  if (rows != mask.source_rows || cols != mask.source_cols) {
    throw ShapeError("bsdp_select: input dims differ from the sensitivity mask");
  }
  Index const groups = rows / tile.rows;
  Index const per_group = cols / tile.cols;
  if (groups < 1 || per_group < 1) { throw ParameterError("bsdp_select: tile larger than the input matrix"); }

  auto const q = block_drop_probabilities(mask, tile);
  std::vector<double> priority(q.size());
  for (auto &p : priority) { p = rng.uniform(); }
  std::vector<double> group_priority(static_cast<std::size_t>(groups));
  for (auto &p : group_priority) { p = rng.uniform(); }

  double total_keep = 0.0;
  std::vector<double> group_keep(static_cast<std::size_t>(groups), 0.0);
  std::vector<Index> hard(static_cast<std::size_t>(groups), 0);
  for (Index g = 0; g < groups; ++g) {
    for (Index b = 0; b < per_group; ++b) {
      double const qb = q[static_cast<std::size_t>(g * per_group + b)];
      group_keep[g] += 1.0 - qb;
      if (qb <= 0.0) { ++hard[g]; }
    }
    total_keep += group_keep[g];
  }
  auto const budget = std::clamp<Index>(static_cast<Index>(std::llround(total_keep)), 1, groups * per_group);

  Index level = budget / groups;
  Index const max_hard = *std::max_element(hard.begin(), hard.end());
  level = std::max(level, max_hard - 1);
  level = std::min(level, per_group);

  std::vector<Index> count(static_cast<std::size_t>(groups), level);
  if (level < per_group) {
    std::vector<Index> order(static_cast<std::size_t>(groups));
    std::iota(order.begin(), order.end(), Index{0});
    // Mandatory raises first, then the groups with the most keep mass.
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      bool const ma = hard[a] > level;
      bool const mb = hard[b] > level;
      if (ma != mb) { return ma; }
      if (group_keep[a] != group_keep[b]) { return group_keep[a] > group_keep[b]; }
      return group_priority[a] < group_priority[b];
    });
    Index mandatory = 0;
    for (Index g = 0; g < groups; ++g) { mandatory += hard[g] > level ? 1 : 0; }
    Index const raises = std::min(groups, std::max(budget - level * groups, mandatory));
    for (Index i = 0; i < raises; ++i) { count[order[i]] += 1; }
  }

  std::vector<std::uint8_t> keep(q.size(), 0);
  std::vector<Index> blocks(static_cast<std::size_t>(per_group));
  for (Index g = 0; g < groups; ++g) {
    std::iota(blocks.begin(), blocks.end(), Index{0});
    auto const at = [&](Index b) { return static_cast<std::size_t>(g * per_group + b); };
    std::sort(blocks.begin(), blocks.end(), [&](Index a, Index b) {
      if (q[at(a)] != q[at(b)]) { return q[at(a)] < q[at(b)]; }
      return priority[at(a)] < priority[at(b)];
    });
    for (Index i = 0; i < count[g]; ++i) { keep[at(blocks[i])] = 1; }
  }
  return BinaryMask::tiles(rows, cols, tile, std::move(keep));
}

std::vector<Index> kept_per_group(BinaryMask const &mask)
{
  if (mask.granularity() != Granularity::Tile) { throw ParameterError("kept_per_group: need a tile mask"); }
  std::vector<Index> counts(static_cast<std::size_t>(mask.grid_rows()), 0);
  for (Index g = 0; g < mask.grid_rows(); ++g) {
    for (Index c = 0; c < mask.grid_cols(); ++c) { counts[g] += mask.tile_kept(g, c) ? 1 : 0; }
  }
  return counts;
}

} // namespace structdrop

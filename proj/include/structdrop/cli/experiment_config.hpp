#pragma once

#include "structdrop/schedule.hpp"
#include "structdrop/train/cnn.hpp"
#include "structdrop/train/lstm.hpp"
#include "structdrop/train/mlp.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace structdrop::cli {

/// Invalid experiment configuration (maps to exit code 2).
class ConfigError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

struct ImageSource
{
  std::string train_images, train_labels, test_images, test_labels;
  Index synthetic_train = 0; ///< > 0 selects generated digits
  Index synthetic_test = 0;
  std::uint64_t synthetic_seed = 7;
  Index train_limit = 0; ///< 0 keeps everything
  Index test_limit = 0;

  std::pair<ImageDataset, ImageDataset> load() const;
};

struct TextSource
{
  std::string path;
  Index synthetic_chars = 0;
  std::uint64_t synthetic_seed = 7;
  double valid_fraction = 0.1;

  std::pair<TextCorpus, TextCorpus> load() const;
};

/// Either a constant ratio or a skew-normal curve over the run's epochs.
struct ScheduleSpec
{
  std::optional<double> constant;
  ScheduleConfig curve;

  RatioSchedule build(int epochs) const;
};

/// Everything one `train` or `ablate` invocation needs. Sweep lists expand
/// to the cartesian product seeds x rates x batch sizes.
struct ExperimentConfig
{
  std::string model; ///< mlp | lstm | cnn
  TrainConfig train;
  MlpSpec mlp;
  LstmSpec lstm;
  CnnSpec cnn;
  ScheduleSpec schedule;
  ImageSource images;
  TextSource text;
  std::string output_dir = "runs";

  std::vector<std::uint64_t> seeds;
  std::vector<double> rates;
  std::vector<Index> batch_sizes;

  // ablate
  std::vector<double> fractions{0.4};
  int parts = 4;
};

ExperimentConfig parse_experiment(nlohmann::json const &doc, std::string const &model);
ExperimentConfig load_experiment(std::string const &path, std::string const &model);
/// The configuration with every default filled in.
nlohmann::json resolved(ExperimentConfig const &cfg);

} // namespace structdrop::cli

#include "structdrop/cli/experiment_config.hpp"

#include <fstream>
#include <set>

namespace structdrop::cli {

using nlohmann::json;

namespace {

void allow(json const &j, std::string const &where, std::set<std::string> const &keys)
{
  if (!j.is_object()) { throw ConfigError(where + ": expected an object"); }
  for (auto const &item : j.items()) {
    if (!keys.count(item.key())) { throw ConfigError(where + ": unknown key '" + item.key() + "'"); }
  }
}

template <typename T>
void read(json const &j, char const *key, T &out, std::string const &where)
{
  if (!j.contains(key)) { return; }
  try {
    out = j.at(key).get<T>();
  } catch (json::exception const &) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

TileConfig read_tile(json const &j, char const *key, TileConfig tile, std::string const &where)
{
  std::vector<Index> v;
  read(j, key, v, where);
  if (v.empty()) { return tile; }
  if (v.size() != 2) { throw ConfigError(where + "." + key + ": expected [rows, cols]"); }
  return {v[0], v[1]};
}

DropoutMode read_mode(json const &j, DropoutMode mode, std::string const &where)
{
  std::string s;
  read(j, "mode", s, where);
  if (s.empty()) { return mode; }
  try {
    return dropout_mode_from_string(s);
  } catch (ParameterError const &e) {
    throw ConfigError(where + ".mode: " + e.what());
  }
}

void parse_images(json const &j, ImageSource &src)
{
  std::string const w = "data";
  allow(j, w, {"train_images", "train_labels", "test_images", "test_labels", "train_limit", "test_limit", "synthetic"});
  read(j, "train_images", src.train_images, w);
  read(j, "train_labels", src.train_labels, w);
  read(j, "test_images", src.test_images, w);
  read(j, "test_labels", src.test_labels, w);
  read(j, "train_limit", src.train_limit, w);
  read(j, "test_limit", src.test_limit, w);
  if (j.contains("synthetic")) {
    auto const &s = j.at("synthetic");
    allow(s, "data.synthetic", {"train", "test", "seed"});
    read(s, "train", src.synthetic_train, "data.synthetic");
    read(s, "test", src.synthetic_test, "data.synthetic");
    read(s, "seed", src.synthetic_seed, "data.synthetic");
    if (src.synthetic_train < 1 || src.synthetic_test < 1) {
      throw ConfigError("data.synthetic: train and test counts must be >= 1");
    }
  } else if (src.train_images.empty() || src.train_labels.empty() || src.test_images.empty() ||
             src.test_labels.empty()) {
    throw ConfigError("data: give the four IDX paths or a synthetic block");
  }
  if (src.train_limit < 0 || src.test_limit < 0) { throw ConfigError("data: limits must be >= 0"); }
}

void parse_text(json const &j, TextSource &src)
{
  std::string const w = "data";
  allow(j, w, {"text", "valid_fraction", "synthetic"});
  read(j, "text", src.path, w);
  read(j, "valid_fraction", src.valid_fraction, w);
  if (j.contains("synthetic")) {
    auto const &s = j.at("synthetic");
    allow(s, "data.synthetic", {"chars", "seed"});
    read(s, "chars", src.synthetic_chars, "data.synthetic");
    read(s, "seed", src.synthetic_seed, "data.synthetic");
    if (src.synthetic_chars < 2) { throw ConfigError("data.synthetic.chars must be >= 2"); }
  } else if (src.path.empty()) {
    throw ConfigError("data: give a text path or a synthetic block");
  }
  if (!(src.valid_fraction > 0.0 && src.valid_fraction < 1.0)) {
    throw ConfigError("data.valid_fraction must be in (0, 1)");
  }
}

void parse_mlp(json const &j, MlpSpec &s)
{
  std::string const w = "network";
  allow(j, w, {"inputs", "hidden", "classes", "mode", "rate", "rates", "tile", "entropy_weight", "support_cap"});
  read(j, "inputs", s.inputs, w);
  read(j, "hidden", s.hidden, w);
  read(j, "classes", s.classes, w);
  s.mode = read_mode(j, s.mode, w);
  if (j.contains("rate") && j.contains("rates")) { throw ConfigError("network: give rate or rates, not both"); }
  double rate = -1.0;
  read(j, "rate", rate, w);
  if (j.contains("rate")) { s.rates = {rate}; }
  read(j, "rates", s.rates, w);
  s.tile = read_tile(j, "tile", s.tile, w);
  read(j, "entropy_weight", s.entropy_weight, w);
  read(j, "support_cap", s.support_cap, w);
}

void parse_lstm(json const &j, LstmSpec &s)
{
  std::string const w = "network";
  allow(j, w, {"hidden", "seq_len", "mode", "rate", "tile", "entropy_weight", "support_cap"});
  read(j, "hidden", s.hidden, w);
  read(j, "seq_len", s.seq_len, w);
  s.mode = read_mode(j, s.mode, w);
  read(j, "rate", s.rate, w);
  s.tile = read_tile(j, "tile", s.tile, w);
  read(j, "entropy_weight", s.entropy_weight, w);
  read(j, "support_cap", s.support_cap, w);
}

void parse_cnn(json const &j, CnnSpec &s)
{
  std::string const w = "network";
  allow(j, w,
        {"channels", "height", "width", "convs", "hidden", "classes", "mode", "sensitivity", "tile",
         "threshold_momentum"});
  read(j, "channels", s.channels, w);
  read(j, "height", s.height, w);
  read(j, "width", s.width, w);
  if (j.contains("convs")) {
    if (!j.at("convs").is_array()) { throw ConfigError("network.convs: expected an array"); }
    s.convs.clear();
    for (auto const &c : j.at("convs")) {
      allow(c, "network.convs[]", {"out_channels", "kernel", "stride", "padding"});
      ConvSpec cs;
      read(c, "out_channels", cs.out_channels, "network.convs[]");
      read(c, "kernel", cs.kernel, "network.convs[]");
      read(c, "stride", cs.stride, "network.convs[]");
      read(c, "padding", cs.padding, "network.convs[]");
      s.convs.push_back(cs);
    }
  }
  read(j, "hidden", s.hidden, w);
  read(j, "classes", s.classes, w);
  s.mode = read_mode(j, s.mode, w);
  if (j.contains("sensitivity")) {
    auto const &t = j.at("sensitivity");
    std::string const ws = "network.sensitivity";
    allow(t, ws, {"region_rows", "region_cols", "sample_fraction", "vote_threshold", "drop_sensitive"});
    read(t, "region_rows", s.sensitivity.region_rows, ws);
    read(t, "region_cols", s.sensitivity.region_cols, ws);
    read(t, "sample_fraction", s.sensitivity.sample_fraction, ws);
    read(t, "vote_threshold", s.sensitivity.vote_threshold, ws);
    read(t, "drop_sensitive", s.sensitivity.drop_sensitive, ws);
  }
  s.tile = read_tile(j, "tile", s.tile, w);
  read(j, "threshold_momentum", s.threshold_momentum, w);
}

void parse_schedule(json const &j, ScheduleSpec &s)
{
  std::string const w = "schedule";
  allow(j, w, {"constant", "mean", "floor", "ceiling", "shape", "mode_fraction"});
  if (j.contains("constant")) {
    if (j.size() != 1) { throw ConfigError("schedule: 'constant' excludes the curve keys"); }
    double c = 0.0;
    read(j, "constant", c, w);
    if (!(c >= 0.0 && c < 1.0)) { throw ConfigError("schedule.constant must be in [0, 1)"); }
    s.constant = c;
    return;
  }
  s.constant.reset();
  read(j, "mean", s.curve.mean_ratio, w);
  read(j, "floor", s.curve.floor, w);
  read(j, "ceiling", s.curve.ceiling, w);
  read(j, "shape", s.curve.shape, w);
  read(j, "mode_fraction", s.curve.mode_fraction, w);
}

} // namespace

std::pair<ImageDataset, ImageDataset> ImageSource::load() const
{
  ImageDataset train;
  ImageDataset test;
  if (synthetic_train > 0) {
    train = synthetic_digits(synthetic_train, synthetic_seed);
    test = synthetic_digits(synthetic_test, mix64(synthetic_seed));
  } else {
    train = load_idx(train_images, train_labels);
    test = load_idx(test_images, test_labels);
  }
  if (train_limit > 0) { train = train.head(train_limit); }
  if (test_limit > 0) { test = test.head(test_limit); }
  return {train, test};
}

std::pair<TextCorpus, TextCorpus> TextSource::load() const
{
  TextCorpus const all = synthetic_chars > 0 ? text_corpus(synthetic_text(synthetic_chars, synthetic_seed))
                                             : load_text(path);
  return all.split(1.0 - valid_fraction);
}

RatioSchedule ScheduleSpec::build(int epochs) const
{
  int const e = std::max(epochs, 1);
  if (constant) { return constant_schedule(e, *constant); }
  ScheduleConfig c = curve;
  c.epochs = e;
  return build_schedule(c);
}

ExperimentConfig parse_experiment(json const &doc, std::string const &model)
{
  if (model != "mlp" && model != "lstm" && model != "cnn") { throw ConfigError("model must be mlp, lstm or cnn"); }
  allow(doc, "config",
        {"model", "seed", "epochs", "batch_size", "learning_rate", "momentum", "eval_batch", "data", "network",
         "schedule", "output_dir", "sweep", "ablation"});
  ExperimentConfig cfg;
  cfg.model = model;
  std::string declared;
  read(doc, "model", declared, "config");
  if (!declared.empty() && declared != model) {
    throw ConfigError("config declares model '" + declared + "' but '" + model + "' was requested");
  }
  if (model == "lstm") {
    cfg.train.batch_size = 32;
    cfg.train.eval_batch = 256;
  }
  read(doc, "seed", cfg.train.seed, "config");
  read(doc, "epochs", cfg.train.epochs, "config");
  read(doc, "batch_size", cfg.train.batch_size, "config");
  read(doc, "learning_rate", cfg.train.learning_rate, "config");
  read(doc, "momentum", cfg.train.momentum, "config");
  read(doc, "eval_batch", cfg.train.eval_batch, "config");
  read(doc, "output_dir", cfg.output_dir, "config");

  if (!doc.contains("data")) { throw ConfigError("config: missing 'data'"); }
  if (model == "lstm") {
    parse_text(doc.at("data"), cfg.text);
  } else {
    parse_images(doc.at("data"), cfg.images);
  }
  if (doc.contains("network")) {
    if (model == "mlp") { parse_mlp(doc.at("network"), cfg.mlp); }
    if (model == "lstm") { parse_lstm(doc.at("network"), cfg.lstm); }
    if (model == "cnn") { parse_cnn(doc.at("network"), cfg.cnn); }
  }
  if (doc.contains("schedule")) {
    if (model != "cnn") { throw ConfigError("config: 'schedule' applies to the cnn model only"); }
    parse_schedule(doc.at("schedule"), cfg.schedule);
  } else {
    cfg.schedule.constant = 0.0;
  }
  if (doc.contains("sweep")) {
    auto const &s = doc.at("sweep");
    allow(s, "sweep", {"seeds", "rates", "batch_sizes"});
    read(s, "seeds", cfg.seeds, "sweep");
    read(s, "rates", cfg.rates, "sweep");
    read(s, "batch_sizes", cfg.batch_sizes, "sweep");
  }
  if (doc.contains("ablation")) {
    auto const &a = doc.at("ablation");
    allow(a, "ablation", {"fractions", "parts"});
    read(a, "fractions", cfg.fractions, "ablation");
    read(a, "parts", cfg.parts, "ablation");
  }

  try {
    cfg.train.validate();
    if (model == "mlp") { cfg.mlp.validate(); }
    if (model == "lstm") { cfg.lstm.validate(); }
    if (model == "cnn") {
      cfg.cnn.validate();
      (void)cfg.schedule.build(cfg.train.epochs);
    }
    for (double f : cfg.fractions) {
      if (!(f >= 0.0 && f < 1.0)) { throw ConfigError("ablation.fractions must lie in [0, 1)"); }
    }
    if (cfg.parts < 2) { throw ConfigError("ablation.parts must be >= 2"); }
    for (double r : cfg.rates) {
      if (!(r >= 0.0 && r < 1.0)) { throw ConfigError("sweep.rates must lie in [0, 1)"); }
    }
    for (Index b : cfg.batch_sizes) {
      if (b < 1) { throw ConfigError("sweep.batch_sizes must be >= 1"); }
    }
  } catch (ParameterError const &e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

ExperimentConfig load_experiment(std::string const &path, std::string const &model)
{
  std::ifstream in(path);
  if (!in) { throw ConfigError("cannot open config " + path); }
  json doc;
  try {
    doc = json::parse(in);
  } catch (json::parse_error const &e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_experiment(doc, model);
}

json resolved(ExperimentConfig const &cfg)
{
  json j;
  j["model"] = cfg.model;
  j["seed"] = cfg.train.seed;
  j["epochs"] = cfg.train.epochs;
  j["batch_size"] = cfg.train.batch_size;
  j["learning_rate"] = cfg.train.learning_rate;
  j["momentum"] = cfg.train.momentum;
  j["eval_batch"] = cfg.train.eval_batch;
  j["output_dir"] = cfg.output_dir;

  json data;
  if (cfg.model == "lstm") {
    if (cfg.text.synthetic_chars > 0) {
      data["synthetic"] = {{"chars", cfg.text.synthetic_chars}, {"seed", cfg.text.synthetic_seed}};
    } else {
      data["text"] = cfg.text.path;
    }
    data["valid_fraction"] = cfg.text.valid_fraction;
  } else {
    auto const &s = cfg.images;
    if (s.synthetic_train > 0) {
      data["synthetic"] = {{"train", s.synthetic_train}, {"test", s.synthetic_test}, {"seed", s.synthetic_seed}};
    } else {
      data["train_images"] = s.train_images;
      data["train_labels"] = s.train_labels;
      data["test_images"] = s.test_images;
      data["test_labels"] = s.test_labels;
    }
    data["train_limit"] = s.train_limit;
    data["test_limit"] = s.test_limit;
  }
  j["data"] = data;

  json net;
  if (cfg.model == "mlp") {
    auto const &m = cfg.mlp;
    net = {{"inputs", m.inputs},
           {"hidden", m.hidden},
           {"classes", m.classes},
           {"mode", to_string(m.mode)},
           {"rates", m.rates},
           {"tile", {m.tile.rows, m.tile.cols}},
           {"entropy_weight", m.entropy_weight},
           {"support_cap", m.support_cap}};
  } else if (cfg.model == "lstm") {
    auto const &m = cfg.lstm;
    net = {{"hidden", m.hidden},
           {"seq_len", m.seq_len},
           {"mode", to_string(m.mode)},
           {"rate", m.rate},
           {"tile", {m.tile.rows, m.tile.cols}},
           {"entropy_weight", m.entropy_weight},
           {"support_cap", m.support_cap}};
  } else {
    auto const &m = cfg.cnn;
    json convs = json::array();
    for (auto const &c : m.convs) {
      convs.push_back(
        {{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}, {"padding", c.padding}});
    }
    net = {{"channels", m.channels},
           {"height", m.height},
           {"width", m.width},
           {"convs", convs},
           {"hidden", m.hidden},
           {"classes", m.classes},
           {"mode", to_string(m.mode)},
           {"sensitivity",
            {{"region_rows", m.sensitivity.region_rows},
             {"region_cols", m.sensitivity.region_cols},
             {"sample_fraction", m.sensitivity.sample_fraction},
             {"vote_threshold", m.sensitivity.vote_threshold},
             {"drop_sensitive", m.sensitivity.drop_sensitive}}},
           {"tile", {m.tile.rows, m.tile.cols}},
           {"threshold_momentum", m.threshold_momentum}};
    if (cfg.schedule.constant) {
      j["schedule"] = {{"constant", *cfg.schedule.constant}};
    } else {
      auto const &c = cfg.schedule.curve;
      j["schedule"] = {{"mean", c.mean_ratio},
                       {"floor", c.floor},
                       {"ceiling", c.ceiling},
                       {"shape", c.shape},
                       {"mode_fraction", c.mode_fraction}};
    }
  }
  j["network"] = net;
  j["sweep"] = {{"seeds", cfg.seeds}, {"rates", cfg.rates}, {"batch_sizes", cfg.batch_sizes}};
  j["ablation"] = {{"fractions", cfg.fractions}, {"parts", cfg.parts}};
  return j;
}

} // namespace structdrop::cli

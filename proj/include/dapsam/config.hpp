#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dapsam/errors.hpp"

namespace dapsam {

using Json = nlohmann::json;

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 16;
  std::size_t depth = 2;
  std::size_t num_heads = 2;
  std::size_t adapter_rank = 4;
  std::size_t num_labels = 2;
  std::size_t in_channels = 1;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw InvalidInput("encoder: image_size must be a positive multiple of patch_size");
    }
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      throw InvalidInput("encoder: embed_dim must be divisible by num_heads");
    }
    if (adapter_rank < 1 || adapter_rank >= embed_dim) {
      throw InvalidInput("encoder: adapter_rank must satisfy 1 <= r < embed_dim");
    }
    if (num_labels < 2) throw InvalidInput("encoder: num_labels must be >= 2");
    if (in_channels < 1) throw InvalidInput("encoder: in_channels must be >= 1");
    if (depth < 1) throw InvalidInput("encoder: depth must be >= 1");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// The desk-scale default: 64px images, 8px patches, 16 channels, 2 blocks.
inline EncoderConfig toy_encoder() { return {}; }

/// ViT-B geometry at 384px input, for importing external encoder weights.
inline EncoderConfig vitb_encoder() {
  EncoderConfig c;
  c.image_size = 384;
  c.patch_size = 16;
  c.embed_dim = 768;
  c.depth = 12;
  c.num_heads = 12;
  c.adapter_rank = 4;
  c.num_labels = 2;
  return c;
}

struct Toggles {
  bool low_level_fusion = true;
  bool channel_filter = true;
  bool prompt_generator = true;

  friend bool operator==(const Toggles&, const Toggles&) = default;
};

struct LossConfig {
  double lambda = 0.8;
  double dice_epsilon = 1e-5;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidInput("loss: lambda must be in [0,1]");
    if (!(dice_epsilon > 0.0)) throw InvalidInput("loss: dice_epsilon must be > 0");
  }
};

struct TrainConfig {
  double base_lr = 5e-4;
  double weight_decay = 0.1;
  std::size_t warmup_steps = 250;
  std::size_t max_epochs = 200;
  std::size_t stop_epoch = 160;
  double lambda = 0.8;
  double dice_epsilon = 1e-5;
  std::size_t bank_size = 256;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  Toggles toggles;
  std::string train_domain = "A";
  double val_fraction = 0.1;

  LossConfig loss() const { return {lambda, dice_epsilon}; }

  void validate() const {
    if (stop_epoch > max_epochs) throw InvalidInput("train: stop_epoch must be <= max_epochs");
    if (batch_size == 0) throw InvalidInput("train: batch_size must be >= 1");
    if (!(base_lr > 0.0)) throw InvalidInput("train: base_lr must be > 0");
    if (!(weight_decay >= 0.0)) throw InvalidInput("train: weight_decay must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
      throw InvalidInput("train: val_fraction must be in [0,1)");
    }
    loss().validate();
  }
};

struct DomainSpec {
  std::string name;
  double gamma = 1.0;
  double bias_amp = 0.0;
  double noise_std = 0.0;
  double contrast = 1.0;

  void validate() const {
    if (name.empty()) throw InvalidInput("domain: empty name");
    if (!(gamma > 0.0)) throw InvalidInput("domain " + name + ": gamma must be > 0");
    if (!(noise_std >= 0.0)) throw InvalidInput("domain " + name + ": noise_std must be >= 0");
    if (!(bias_amp >= 0.0)) throw InvalidInput("domain " + name + ": bias_amp must be >= 0");
  }
};

struct SuiteConfig {
  std::vector<DomainSpec> domains;
  std::size_t samples_per_domain = 50;
  std::size_t image_size = 64;
  std::size_t num_labels = 2;
  std::array<double, 2> spacing{1.0, 1.0};

  void validate() const {
    if (domains.empty()) throw InvalidInput("data: no domains");
    std::set<std::string> names;
    for (const auto& d : domains) {
      d.validate();
      if (!names.insert(d.name).second) throw InvalidInput("data: duplicate domain " + d.name);
    }
    if (image_size < 8) throw InvalidInput("data: image_size must be >= 8");
    if (num_labels != 2 && num_labels != 3) throw InvalidInput("data: num_labels must be 2 or 3");
    if (!(spacing[0] > 0.0 && spacing[1] > 0.0)) throw InvalidInput("data: spacing must be > 0");
  }
};

/// Six scanner-like domains A-F sharing one anatomy distribution.
inline std::vector<DomainSpec> prostate_style_domains() {
  return {
      {"A", 1.0, 0.05, 0.02, 1.0},  {"B", 0.6, 0.20, 0.03, 0.8},
      {"C", 1.8, 0.30, 0.05, 1.2},  {"D", 0.8, 0.10, 0.08, 0.6},
      {"E", 1.4, 0.25, 0.04, 1.5},  {"F", 1.2, 0.15, 0.10, 0.9},
  };
}

/// Five fundus-like domains with three labels (background, disc, cup).
inline std::vector<DomainSpec> fundus_style_domains() {
  return {
      {"BinRushed", 1.0, 0.05, 0.02, 1.0}, {"Magrabia", 0.7, 0.15, 0.03, 0.9},
      {"BASE1", 1.5, 0.20, 0.04, 1.1},     {"BASE2", 0.9, 0.30, 0.06, 0.7},
      {"BASE3", 1.3, 0.10, 0.08, 1.3},
  };
}

struct Config {
  EncoderConfig encoder;
  TrainConfig train;
  SuiteConfig data;

  void validate() const {
    encoder.validate();
    train.validate();
    data.validate();
    if (encoder.image_size != data.image_size) {
      throw InvalidInput("config: encoder.image_size differs from data.image_size");
    }
    if (encoder.num_labels != data.num_labels) {
      throw InvalidInput("config: encoder.num_labels differs from data.num_labels");
    }
  }
};

inline Config default_config() {
  Config c;
  c.data.domains = prostate_style_domains();
  return c;
}

inline Config fundus_config() {
  Config c;
  c.encoder.num_labels = 3;
  c.train.warmup_steps = 25;
  c.train.train_domain = "BinRushed";
  c.data.domains = fundus_style_domains();
  c.data.num_labels = 3;
  return c;
}

// ---- JSON ------------------------------------------------------------------

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw InvalidInput(where + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.contains(key)) throw InvalidInput(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline Json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size},     {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},       {"depth", c.depth},
          {"num_heads", c.num_heads},       {"adapter_rank", c.adapter_rank},
          {"num_labels", c.num_labels},     {"in_channels", c.in_channels}};
}

inline Json to_json(const Toggles& t) {
  return {{"low_level_fusion", t.low_level_fusion},
          {"channel_filter", t.channel_filter},
          {"prompt_generator", t.prompt_generator}};
}

inline Json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},           {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps}, {"max_epochs", c.max_epochs},
          {"stop_epoch", c.stop_epoch},     {"lambda", c.lambda},
          {"dice_epsilon", c.dice_epsilon}, {"bank_size", c.bank_size},
          {"batch_size", c.batch_size},     {"seed", c.seed},
          {"toggles", to_json(c.toggles)},  {"train_domain", c.train_domain},
          {"val_fraction", c.val_fraction}};
}

inline Json to_json(const DomainSpec& d) {
  return {{"name", d.name},
          {"gamma", d.gamma},
          {"bias_amp", d.bias_amp},
          {"noise_std", d.noise_std},
          {"contrast", d.contrast}};
}

inline Json to_json(const SuiteConfig& s) {
  Json domains = Json::array();
  for (const auto& d : s.domains) domains.push_back(to_json(d));
  return {{"domains", domains},
          {"samples_per_domain", s.samples_per_domain},
          {"image_size", s.image_size},
          {"num_labels", s.num_labels},
          {"spacing", {s.spacing[0], s.spacing[1]}}};
}

inline Json to_json(const Config& c) {
  return {{"encoder", to_json(c.encoder)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}};
}

inline EncoderConfig encoder_from_json(const Json& j, EncoderConfig c = {}) {
  detail::check_keys(j,
                     {"image_size", "patch_size", "embed_dim", "depth", "num_heads",
                      "adapter_rank", "num_labels", "in_channels"},
                     "encoder");
  detail::read(j, "image_size", c.image_size);
  detail::read(j, "patch_size", c.patch_size);
  detail::read(j, "embed_dim", c.embed_dim);
  detail::read(j, "depth", c.depth);
  detail::read(j, "num_heads", c.num_heads);
  detail::read(j, "adapter_rank", c.adapter_rank);
  detail::read(j, "num_labels", c.num_labels);
  detail::read(j, "in_channels", c.in_channels);
  return c;
}

inline Toggles toggles_from_json(const Json& j, Toggles t = {}) {
  detail::check_keys(j, {"low_level_fusion", "channel_filter", "prompt_generator"}, "toggles");
  detail::read(j, "low_level_fusion", t.low_level_fusion);
  detail::read(j, "channel_filter", t.channel_filter);
  detail::read(j, "prompt_generator", t.prompt_generator);
  return t;
}

inline TrainConfig train_from_json(const Json& j, TrainConfig c = {}) {
  detail::check_keys(j,
                     {"base_lr", "weight_decay", "warmup_steps", "max_epochs", "stop_epoch",
                      "lambda", "dice_epsilon", "bank_size", "batch_size", "seed", "toggles",
                      "train_domain", "val_fraction"},
                     "train");
  detail::read(j, "base_lr", c.base_lr);
  detail::read(j, "weight_decay", c.weight_decay);
  detail::read(j, "warmup_steps", c.warmup_steps);
  detail::read(j, "max_epochs", c.max_epochs);
  detail::read(j, "stop_epoch", c.stop_epoch);
  detail::read(j, "lambda", c.lambda);
  detail::read(j, "dice_epsilon", c.dice_epsilon);
  detail::read(j, "bank_size", c.bank_size);
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "seed", c.seed);
  detail::read(j, "train_domain", c.train_domain);
  detail::read(j, "val_fraction", c.val_fraction);
  if (j.contains("toggles")) c.toggles = toggles_from_json(j.at("toggles"), c.toggles);
  return c;
}

inline DomainSpec domain_from_json(const Json& j) {
  detail::check_keys(j, {"name", "gamma", "bias_amp", "noise_std", "contrast"}, "domain");
  DomainSpec d;
  d.name = j.at("name").get<std::string>();
  detail::read(j, "gamma", d.gamma);
  detail::read(j, "bias_amp", d.bias_amp);
  detail::read(j, "noise_std", d.noise_std);
  detail::read(j, "contrast", d.contrast);
  return d;
}

inline SuiteConfig suite_from_json(const Json& j, SuiteConfig s = {}) {
  detail::check_keys(j, {"domains", "samples_per_domain", "image_size", "num_labels", "spacing"},
                     "data");
  if (j.contains("domains")) {
    s.domains.clear();
    for (const auto& d : j.at("domains")) s.domains.push_back(domain_from_json(d));
  }
  detail::read(j, "samples_per_domain", s.samples_per_domain);
  detail::read(j, "image_size", s.image_size);
  detail::read(j, "num_labels", s.num_labels);
  if (j.contains("spacing")) {
    const auto& sp = j.at("spacing");
    if (!sp.is_array() || sp.size() != 2) throw InvalidInput("data: spacing must be [row, col]");
    s.spacing = {sp[0].get<double>(), sp[1].get<double>()};
  }
  return s;
}

/// Parses a config document; missing keys keep defaults, unknown keys throw.
inline Config config_from_json(const Json& j) {
  detail::check_keys(j, {"encoder", "train", "data"}, "config");
  Config c = default_config();
  try {
    if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"), c.encoder);
    if (j.contains("train")) c.train = train_from_json(j.at("train"), c.train);
    if (j.contains("data")) c.data = suite_from_json(j.at("data"), c.data);
  } catch (const Json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config: " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw LoadError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace dapsam

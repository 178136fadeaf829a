#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dapsam/config.hpp"
#include "dapsam/errors.hpp"
#include "dapsam/optim.hpp"
#include "dapsam/params.hpp"
#include "dapsam/zip.hpp"

namespace dapsam {

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double loss = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  double lr = 0.0;
  double val_dsc = 0.0;

  bool operator==(const TrainLogRow&) const = default;
};

/// Full training state: parameters with frozen flags, AdamW slots, config
/// echo, progress counters, data-order RNG state and the log so far.
struct Checkpoint {
  Config config;
  ParameterStore params;
  std::uint64_t adam_steps = 0;
  std::map<std::string, AdamSlots> slots;
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // completed optimizer steps
  double best_val_dsc = -1.0;
  std::string rng_state;
  std::vector<TrainLogRow> log;
};

namespace detail {

inline zip::Bytes to_bytes(const Mat& m) {
  zip::Bytes b;
  b.reserve(m.data.size() * 8);
  for (double v : m.data) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  return b;
}

inline Mat from_bytes(const zip::Bytes& b, std::size_t rows, std::size_t cols, const std::string& what) {
  if (b.size() != rows * cols * 8) {
    throw CorruptCheckpoint("checkpoint: array " + what + " has " + std::to_string(b.size()) +
                            " bytes, manifest shape needs " + std::to_string(rows * cols * 8));
  }
  Mat m(rows, cols);
  for (std::size_t k = 0; k < m.data.size(); ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[8 * k + i])) << (8 * i);
    }
    m.data[k] = std::bit_cast<double>(bits);
  }
  return m;
}

inline Json log_to_json(const std::vector<TrainLogRow>& log) {
  Json a = Json::array();
  for (const auto& r : log) {
    a.push_back({r.epoch, r.steps, r.loss, r.ce, r.dice, r.lr, r.val_dsc});
  }
  return a;
}

inline std::vector<TrainLogRow> log_from_json(const Json& a) {
  std::vector<TrainLogRow> log;
  for (const auto& r : a) {
    log.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>(), r.at(2).get<double>(),
                   r.at(3).get<double>(), r.at(4).get<double>(), r.at(5).get<double>(),
                   r.at(6).get<double>()});
  }
  return log;
}

}  // namespace detail

/// Zip of raw little-endian f64 arrays plus manifest.json.
inline zip::Bytes checkpoint_bytes(const Checkpoint& ck) {
  zip::Writer w;
  Json arrays = Json::array();
  for (const auto& [name, p] : ck.params) {
    Json entry = {{"name", name},
                  {"shape", p.shape},
                  {"dtype", "<f8"},
                  {"frozen", p.frozen},
                  {"file", "arrays/" + name + ".bin"}};
    w.add("arrays/" + name + ".bin", detail::to_bytes(p.value));
    if (auto it = ck.slots.find(name); it != ck.slots.end()) {
      entry["adam_m"] = "adam/" + name + ".m.bin";
      entry["adam_v"] = "adam/" + name + ".v.bin";
      w.add("adam/" + name + ".m.bin", detail::to_bytes(it->second.m));
      w.add("adam/" + name + ".v.bin", detail::to_bytes(it->second.v));
    }
    arrays.push_back(std::move(entry));
  }
  for (const auto& [name, _] : ck.slots) {
    if (!ck.params.contains(name)) throw InventoryError("optimizer slot for unknown parameter " + name);
  }
  const Json manifest = {{"format", "dapsam-checkpoint"},
                         {"version", 1},
                         {"config", to_json(ck.config)},
                         {"epoch", ck.epoch},
                         {"step", ck.step},
                         {"adam_steps", ck.adam_steps},
                         {"best_val_dsc", ck.best_val_dsc},
                         {"rng_state", ck.rng_state},
                         {"log", detail::log_to_json(ck.log)},
                         {"arrays", arrays}};
  const std::string text = manifest.dump(1);
  w.add("manifest.json", zip::Bytes(text.begin(), text.end()));
  return w.finish();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  zip::write_bytes(path, checkpoint_bytes(ck));
}

inline Checkpoint checkpoint_from_bytes(const zip::Bytes& bytes) {
  const auto files = zip::read_archive(bytes);
  auto entry = [&](const std::string& name) -> const zip::Bytes& {
    auto it = files.find(name);
    if (it == files.end()) throw CorruptCheckpoint("checkpoint: missing entry " + name);
    return it->second;
  };
  const zip::Bytes& mtext = entry("manifest.json");
  Checkpoint ck;
  try {
    const Json m = Json::parse(mtext.begin(), mtext.end());
    if (m.at("format") != "dapsam-checkpoint") throw CorruptCheckpoint("checkpoint: wrong format tag");
    ck.config = config_from_json(m.at("config"));
    ck.epoch = m.at("epoch").get<std::size_t>();
    ck.step = m.at("step").get<std::size_t>();
    ck.adam_steps = m.at("adam_steps").get<std::uint64_t>();
    ck.best_val_dsc = m.at("best_val_dsc").get<double>();
    ck.rng_state = m.at("rng_state").get<std::string>();
    ck.log = detail::log_from_json(m.at("log"));
    for (const auto& a : m.at("arrays")) {
      const auto name = a.at("name").get<std::string>();
      if (a.at("dtype") != "<f8") throw CorruptCheckpoint("checkpoint: unsupported dtype for " + name);
      const auto shape = a.at("shape").get<std::vector<std::size_t>>();
      if (shape.empty() || shape.size() > 2) throw CorruptCheckpoint("checkpoint: bad rank for " + name);
      const std::size_t rows = shape.size() == 2 ? shape[0] : 1;
      const std::size_t cols = shape.back();
      Parameter& p = ck.params.add(name, shape, a.at("frozen").get<bool>(), Init::Zeros, 0.0, 0);
      p.value = detail::from_bytes(entry(a.at("file").get<std::string>()), rows, cols, name);
      if (a.contains("adam_m")) {
        ck.slots[name] = {detail::from_bytes(entry(a.at("adam_m").get<std::string>()), rows, cols, name + " (adam m)"),
                          detail::from_bytes(entry(a.at("adam_v").get<std::string>()), rows, cols, name + " (adam v)")};
      }
    }
  } catch (const Json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint manifest: ") + e.what());
  } catch (const InvalidInput& e) {
    throw CorruptCheckpoint(std::string("checkpoint manifest: ") + e.what());
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_bytes(zip::read_bytes(path));
}

/// Copies checkpoint arrays into `target`, which must have exactly the same
/// inventory; a shape difference names the offending parameter.
inline void load_parameters(ParameterStore& target, const ParameterStore& source) {
  for (auto& [name, p] : target) {
    if (!source.contains(name)) throw InventoryError("checkpoint lacks parameter " + name);
    const Parameter& s = source.at(name);
    if (s.shape != p.shape) {
      throw InvalidInput("shape mismatch for parameter " + name + ": checkpoint " +
                         Json(s.shape).dump() + " vs model " + Json(p.shape).dump());
    }
    if (s.frozen != p.frozen) throw InvalidInput("frozen flag mismatch for parameter " + name);
    p.value = s.value;
  }
  for (const auto& [name, _] : source) {
    if (!target.contains(name)) throw InventoryError("checkpoint has unexpected parameter " + name);
  }
}

/// Optional import of external encoder weights stored in the checkpoint
/// container format. Only `encoder.*` arrays present in both are copied;
/// any shape difference is rejected. Returns the number of arrays copied.
inline std::size_t import_encoder_weights(ParameterStore& target, const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  std::size_t copied = 0;
  for (const auto& [name, s] : ck.params) {
    if (!name.starts_with("encoder.") || !target.contains(name)) continue;
    Parameter& p = target.at(name);
    if (s.shape != p.shape) {
      throw InvalidInput("shape mismatch for parameter " + name + ": import " +
                         Json(s.shape).dump() + " vs model " + Json(p.shape).dump());
    }
    p.value = s.value;
    ++copied;
  }
  return copied;
}

}  // namespace dapsam

#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dapsam/errors.hpp"
#include "dapsam/rng.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

/// One named array. Vectors are stored as 1 x n matrices; `shape` keeps the
/// logical rank for serialization.
struct Parameter {
  std::vector<std::size_t> shape;
  Mat value;
  Mat grad;
  bool frozen = false;

  std::size_t size() const { return value.size(); }
};

enum class Init { Zeros, Ones, Normal };

/// Named, partitioned model parameters. Iteration order is lexicographic by
/// name, which keeps serialization and optimizer updates deterministic.
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter>;

  /// Adds a parameter initialized from a stream seeded by (seed, name), so the
  /// value of one array never depends on which other arrays exist.
  Parameter& add(const std::string& name, std::vector<std::size_t> shape, bool frozen, Init init,
                 double std_dev, std::uint64_t seed) {
    if (entries_.contains(name)) throw InvalidInput("duplicate parameter name: " + name);
    if (shape.empty() || shape.size() > 2) throw InvalidInput("parameter rank must be 1 or 2: " + name);
    const std::size_t rows = shape.size() == 2 ? shape[0] : 1;
    const std::size_t cols = shape.back();
    Parameter p;
    p.shape = std::move(shape);
    p.value = Mat(rows, cols);
    p.grad = Mat(rows, cols);
    p.frozen = frozen;
    switch (init) {
      case Init::Zeros:
        break;
      case Init::Ones:
        std::fill(p.value.data.begin(), p.value.data.end(), 1.0);
        break;
      case Init::Normal: {
        Rng rng(derive_seed(seed, name));
        std::normal_distribution<double> dist(0.0, std_dev);
        for (double& v : p.value.data) v = dist(rng);
        break;
      }
    }
    return entries_.emplace(name, std::move(p)).first->second;
  }

  bool contains(const std::string& name) const { return entries_.contains(name); }

  Parameter& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw InventoryError("unknown parameter: " + name);
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw InventoryError("unknown parameter: " + name);
    return it->second;
  }

  const Mat& value(const std::string& name) const { return at(name).value; }

  /// Gradient accumulator, or an empty span for frozen arrays so backward
  /// passes skip work that would be discarded anyway.
  std::span<double> grad(const std::string& name) {
    Parameter& p = at(name);
    if (p.frozen) return {};
    return p.grad.data;
  }

  void zero_grad() {
    for (auto& [_, p] : entries_) p.grad.zero();
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t count(bool trainable) const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) {
      if (p.frozen != trainable) n += p.size();
    }
    return n;
  }
  std::size_t trainable_count() const { return count(true); }
  std::size_t frozen_count() const { return count(false); }

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

 private:
  Map entries_;
};

inline bool is_adapter_name(const std::string& name) {
  return name.find(".adapter") != std::string::npos;
}

/// Freezing policy: the encoder core is frozen; adapters, the low-level
/// projection, the prompt generator and the whole decoder train.
/// Throws InventoryError for names outside the known namespaces.
inline bool policy_frozen(const std::string& name) {
  if (name.starts_with("encoder.")) {
    if (name.starts_with("encoder.low_level.") || is_adapter_name(name)) return false;
    return true;
  }
  if (name.starts_with("prompt.") || name.starts_with("decoder.")) return false;
  throw InventoryError("parameter outside known namespaces: " + name);
}

struct Partition {
  std::vector<std::string> frozen;
  std::vector<std::string> trainable;
};

inline Partition partition_parameters(const ParameterStore& store) {
  Partition out;
  for (const auto& [name, p] : store) {
    const bool frozen = policy_frozen(name);
    if (frozen != p.frozen) {
      throw InventoryError("parameter frozen flag disagrees with policy: " + name);
    }
    (frozen ? out.frozen : out.trainable).push_back(name);
  }
  return out;
}

}  // namespace dapsam

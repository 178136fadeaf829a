#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "dapsam/params.hpp"

namespace dapsam {

/// Linear warm-up to `base_lr` over `warmup_steps`, then polynomial decay
/// (power 0.9) that reaches zero at `total_steps`. The decay clock starts at
/// the end of warm-up, so lr(warmup_steps) == lr(warmup_steps - 1) == base_lr.
inline double warmup_lr(std::size_t step, double base_lr, std::size_t warmup_steps,
                        std::size_t total_steps) {
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * std::pow(1.0 - progress, 0.9);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct AdamSlots {
  Mat m;
  Mat v;
};

/// AdamW with decoupled weight decay over the trainable partition only.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParameterStore& ps, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : ps) {
      if (p.frozen) continue;
      auto [it, inserted] = slots_.try_emplace(name);
      if (inserted) {
        it->second.m = Mat(p.value.rows, p.value.cols);
        it->second.v = Mat(p.value.rows, p.value.cols);
      }
      auto& m = it->second.m.data;
      auto& v = it->second.v.data;
      auto& w = p.value.data;
      const auto& g = p.grad.data;
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= lr * cfg_.weight_decay * w[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::map<std::string, AdamSlots>& slots() const { return slots_; }

  void restore(std::uint64_t steps, std::map<std::string, AdamSlots> slots) {
    t_ = steps;
    slots_ = std::move(slots);
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, AdamSlots> slots_;
};

}  // namespace dapsam

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dapsam/config.hpp"
#include "dapsam/errors.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

inline void check_targets(const FeatureMap& scores, const LabelMap& target) {
  if (scores.batch != target.batch || scores.h != target.h || scores.w != target.w) {
    throw InvalidInput("loss: score map " + shape_string(scores) + " does not match target " +
                       std::to_string(target.batch) + "x" + std::to_string(target.h) + "x" +
                       std::to_string(target.w));
  }
  for (std::size_t i = 0; i < target.labels.size(); ++i) {
    if (target.labels[i] >= scores.channels) {
      throw InvalidInput("loss: label " + std::to_string(target.labels[i]) + " at pixel " +
                         std::to_string(i) + " is outside [0, " + std::to_string(scores.channels) +
                         ")");
    }
  }
}

inline FeatureMap softmax(const FeatureMap& logits) {
  FeatureMap p = logits;
  const std::size_t k = logits.channels;
  for (std::size_t i = 0; i < p.data.size(); i += k) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, p.data[i + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      p.data[i + c] = std::exp(p.data[i + c] - mx);
      z += p.data[i + c];
    }
    for (std::size_t c = 0; c < k; ++c) p.data[i + c] /= z;
  }
  return p;
}

/// Mean over pixels of -log softmax(true label).
inline double cross_entropy(const FeatureMap& logits, const LabelMap& target) {
  check_targets(logits, target);
  const std::size_t k = logits.channels;
  const std::size_t n = target.labels.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data.data() + i * k;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    total += mx + std::log(z) - row[target.labels[i]];
  }
  return total / static_cast<double>(n);
}

namespace detail {

struct DiceStats {
  std::vector<double> inter;
  std::vector<double> pred;
  std::vector<double> truth;
};

inline DiceStats dice_stats(const FeatureMap& probs, const LabelMap& target) {
  const std::size_t k = probs.channels;
  DiceStats s{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
  for (std::size_t i = 0; i < target.labels.size(); ++i) {
    const double* row = probs.data.data() + i * k;
    const std::size_t g = target.labels[i];
    for (std::size_t c = 1; c < k; ++c) s.pred[c] += row[c];
    if (g > 0) {
      s.inter[g] += row[g];
      s.truth[g] += 1.0;
    }
  }
  return s;
}

}  // namespace detail

/// 1 - mean over foreground labels of (2 sum p*g + eps) / (sum p + sum g + eps),
/// sums taken over the whole batch.
inline double dice_loss(const FeatureMap& probs, const LabelMap& target, const LossConfig& cfg) {
  check_targets(probs, target);
  cfg.validate();
  const auto s = detail::dice_stats(probs, target);
  const std::size_t k = probs.channels;
  double mean = 0.0;
  for (std::size_t c = 1; c < k; ++c) {
    mean += (2.0 * s.inter[c] + cfg.dice_epsilon) / (s.pred[c] + s.truth[c] + cfg.dice_epsilon);
  }
  return 1.0 - mean / static_cast<double>(k - 1);
}

struct LossValue {
  double total = 0.0;
  double ce = 0.0;
  double dice = 0.0;
};

inline LossValue combined_loss_parts(const FeatureMap& logits, const LabelMap& target,
                                     const LossConfig& cfg) {
  LossValue v;
  v.ce = cross_entropy(logits, target);
  v.dice = dice_loss(softmax(logits), target, cfg);
  v.total = (1.0 - cfg.lambda) * v.ce + cfg.lambda * v.dice;
  return v;
}

/// (1 - lambda) * CE + lambda * Dice.
inline double combined_loss(const FeatureMap& logits, const LabelMap& target,
                            const LossConfig& cfg) {
  return combined_loss_parts(logits, target, cfg).total;
}

/// Loss value together with dL/dlogits.
inline LossValue combined_loss_grad(const FeatureMap& logits, const LabelMap& target,
                                    const LossConfig& cfg, FeatureMap& d_logits) {
  const LossValue v = combined_loss_parts(logits, target, cfg);
  const FeatureMap probs = softmax(logits);
  const auto s = detail::dice_stats(probs, target);
  const std::size_t k = logits.channels;
  const std::size_t n = target.labels.size();
  const double ce_scale = (1.0 - cfg.lambda) / static_cast<double>(n);
  const double dice_scale = -cfg.lambda / static_cast<double>(k - 1);

  // dDice/dp_c = dice_scale * (2 g_c / den_c - num_c / den_c^2)
  std::vector<double> inv_den(k, 0.0);
  std::vector<double> ratio(k, 0.0);
  for (std::size_t c = 1; c < k; ++c) {
    const double den = s.pred[c] + s.truth[c] + cfg.dice_epsilon;
    inv_den[c] = 1.0 / den;
    ratio[c] = (2.0 * s.inter[c] + cfg.dice_epsilon) / (den * den);
  }

  d_logits = FeatureMap(logits.batch, logits.h, logits.w, k);
  std::vector<double> dp(k);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = probs.data.data() + i * k;
    double* d = d_logits.data.data() + i * k;
    const std::size_t g = target.labels[i];
    dp[0] = 0.0;
    for (std::size_t c = 1; c < k; ++c) {
      dp[c] = dice_scale * ((c == g ? 2.0 * inv_den[c] : 0.0) - ratio[c]);
    }
    double pdp = 0.0;
    for (std::size_t c = 0; c < k; ++c) pdp += p[c] * dp[c];
    for (std::size_t c = 0; c < k; ++c) {
      d[c] = ce_scale * (p[c] - (c == g ? 1.0 : 0.0)) + p[c] * (dp[c] - pdp);
    }
  }
  return v;
}

// ---- evaluation metrics ---------------------------------------------------------

inline void check_same_grid(const LabelMap& a, const LabelMap& b, const char* what) {
  if (a.batch != b.batch || a.h != b.h || a.w != b.w) {
    throw InvalidInput(std::string(what) + ": label maps differ in shape");
  }
}

/// 2|P n G| / (|P| + |G|), 1.0 when both are empty.
inline double dsc(const LabelMap& pred, const LabelMap& gt, std::uint8_t label) {
  check_same_grid(pred, gt, "dsc");
  std::size_t p = 0;
  std::size_t g = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_p = pred.labels[i] == label;
    const bool in_g = gt.labels[i] == label;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Pixels of `label` that touch background or the image border (4-neighbourhood).
inline std::vector<std::array<std::size_t, 2>> boundary_pixels(const LabelMap& m,
                                                               std::uint8_t label) {
  std::vector<std::array<std::size_t, 2>> out;
  for (std::size_t y = 0; y < m.h; ++y) {
    for (std::size_t x = 0; x < m.w; ++x) {
      if (m.at(0, y, x) != label) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.h || x + 1 == m.w ||
                        m.at(0, y - 1, x) != label || m.at(0, y + 1, x) != label ||
                        m.at(0, y, x - 1) != label || m.at(0, y, x + 1) != label;
      if (edge) out.push_back({y, x});
    }
  }
  return out;
}

/// Symmetric average surface distance of one 2D slice, in physical units
/// (`spacing` = row, column pixel size). Undefined (nullopt) if either mask is
/// empty for `label`.
inline std::optional<double> asd(const LabelMap& pred, const LabelMap& gt, std::uint8_t label,
                                 std::array<double, 2> spacing = {1.0, 1.0}) {
  check_same_grid(pred, gt, "asd");
  if (pred.batch != 1) throw InvalidInput("asd: expects a single 2D slice");
  const auto bp = boundary_pixels(pred, label);
  const auto bg = boundary_pixels(gt, label);
  if (bp.empty() || bg.empty()) return std::nullopt;
  auto directed = [&](const auto& from, const auto& to) {
    double total = 0.0;
    for (const auto& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : to) {
        const double dy = (static_cast<double>(a[0]) - static_cast<double>(b[0])) * spacing[0];
        const double dx = (static_cast<double>(a[1]) - static_cast<double>(b[1])) * spacing[1];
        best = std::min(best, dy * dy + dx * dx);
      }
      total += std::sqrt(best);
    }
    return total / static_cast<double>(from.size());
  };
  return 0.5 * (directed(bp, bg) + directed(bg, bp));
}

}  // namespace dapsam

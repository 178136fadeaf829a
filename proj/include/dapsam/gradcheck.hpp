#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dapsam/adapter.hpp"
#include "dapsam/decoder.hpp"
#include "dapsam/encoder.hpp"
#include "dapsam/losses.hpp"
#include "dapsam/model.hpp"
#include "dapsam/prompt.hpp"

namespace dapsam {

inline constexpr double kFiniteDifferenceStep = 1e-6;

/// Denominator floor of the relative error. Central differences at step 1e-6
/// carry ~1e-8 absolute rounding noise on these graphs (visible on gradients
/// that are exactly zero, such as attention key biases), so gradients smaller
/// than the floor are effectively compared with an absolute tolerance.
inline constexpr double kRelativeErrorFloor = 1e-3;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
}

/// Max relative error between `analytic` and central differences of `f`
/// with respect to `values` (perturbed in place and restored).
inline double check_against_fd(std::span<double> values, std::span<const double> analytic,
                               const std::function<double()>& f,
                               double step = kFiniteDifferenceStep) {
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + step;
    const double up = f();
    values[i] = orig - step;
    const double down = f();
    values[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

enum class GradComponent { Adapter, Filter, Prompt, Decoder, Loss, Encoder };

inline GradComponent parse_grad_component(const std::string& name) {
  if (name == "adapter") return GradComponent::Adapter;
  if (name == "filter") return GradComponent::Filter;
  if (name == "prompt") return GradComponent::Prompt;
  if (name == "decoder") return GradComponent::Decoder;
  if (name == "loss") return GradComponent::Loss;
  if (name == "encoder") return GradComponent::Encoder;
  throw InventoryError("unknown gradcheck component: " + name);
}

namespace detail {

inline Mat random_mat(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Mat m(r, c);
  for (double& v : m.data) v = dist(rng);
  return m;
}

/// Randomizes every parameter so no gradient path is degenerate (zero-init
/// up-projections and fusion weights would otherwise hide their inputs).
inline void randomize(ParameterStore& ps, Rng& rng, double sd) {
  std::normal_distribution<double> dist(0.0, sd);
  for (auto& [name, p] : ps) {
    for (double& v : p.value.data) v = dist(rng);
    if (name.ends_with(".gamma")) {
      for (double& v : p.value.data) v += 1.0;
    }
  }
}

inline double max_over_params(ParameterStore& ps, const std::string& prefix,
                              const std::function<double()>& f) {
  double worst = 0.0;
  for (auto& [name, p] : ps) {
    if (!name.starts_with(prefix) || p.frozen) continue;
    const std::vector<double> analytic = p.grad.data;
    worst = std::max(worst, check_against_fd(p.value.data, analytic, f));
  }
  return worst;
}

/// Probe objective sum(m * w), accumulated in extended precision so the
/// reduction itself does not dominate finite-difference noise.
inline double weighted_sum(const Mat& m, const Mat& w) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    s += static_cast<long double>(m.data[i]) * static_cast<long double>(w.data[i]);
  }
  return static_cast<double>(s);
}

}  // namespace detail

/// Central-difference check of one component on toy shapes (64-bit).
/// Returns the maximum relative error over the component's parameters and,
/// where the component is parameter-free or sits mid-graph, its inputs.
inline double gradcheck(GradComponent component, std::uint64_t seed) {
  const EncoderConfig cfg = toy_encoder();
  const std::size_t t = cfg.tokens();
  const std::size_t c = cfg.embed_dim;
  Rng rng(derive_seed(seed, "gradcheck"));

  switch (component) {
    case GradComponent::Filter: {
      Mat x = detail::random_mat(t, c, rng);
      const Mat w = detail::random_mat(t, c, rng);
      ChannelFilterCache fc;
      channel_filter_sample(x, &fc);
      const Mat dx = channel_filter_backward_sample(x, fc, w);
      return check_against_fd(x.data, dx.data, [&] {
        return detail::weighted_sum(channel_filter_sample(x, nullptr), w);
      });
    }

    case GradComponent::Adapter: {
      AdapterParams p{detail::random_mat(c, cfg.adapter_rank, rng, 0.5),
                      detail::random_mat(1, cfg.adapter_rank, rng, 0.5),
                      detail::random_mat(cfg.adapter_rank, c, rng, 0.5),
                      detail::random_mat(1, c, rng, 0.5)};
      Mat f = detail::random_mat(t, c, rng);
      Mat low = detail::random_mat(t, c, rng);
      const Mat w = detail::random_mat(t, c, rng);
      const AdapterOptions opt{true, true};
      AdapterCache cache;
      adapter_forward_sample(f, &low, p, opt, &cache);
      const AdapterGrads g = adapter_backward_sample(p, opt, cache, w);
      auto f_eval = [&] {
        return detail::weighted_sum(adapter_forward_sample(f, &low, p, opt, nullptr), w);
      };
      double worst = 0.0;
      worst = std::max(worst, check_against_fd(p.down_weight.data, g.d_params.down_weight.data, f_eval));
      worst = std::max(worst, check_against_fd(p.down_bias.data, g.d_params.down_bias.data, f_eval));
      worst = std::max(worst, check_against_fd(p.up_weight.data, g.d_params.up_weight.data, f_eval));
      worst = std::max(worst, check_against_fd(p.up_bias.data, g.d_params.up_bias.data, f_eval));
      worst = std::max(worst, check_against_fd(f.data, g.d_input.data, f_eval));
      worst = std::max(worst, check_against_fd(low.data, g.d_low_level.data, f_eval));
      return worst;
    }

    case GradComponent::Prompt: {
      ParameterStore ps;
      add_prompt_generator(ps, c, 256, seed);
      Mat e = detail::random_mat(t, c, rng);
      const Mat w = detail::random_mat(t, c, rng);
      PromptCache cache;
      prompt_forward_sample(ps, e, &cache);
      ps.zero_grad();
      const Mat de = prompt_backward_sample(ps, cache, e, w);
      auto f_eval = [&] { return detail::weighted_sum(prompt_forward_sample(ps, e, nullptr), w); };
      return std::max(detail::max_over_params(ps, "prompt.", f_eval),
                      check_against_fd(e.data, de.data, f_eval));
    }

    case GradComponent::Decoder: {
      ParameterStore ps;
      register_decoder(ps, c, cfg.num_labels, seed);
      detail::randomize(ps, rng, 0.3);
      Mat e = detail::random_mat(t, c, rng);
      Mat prompt = detail::random_mat(t, c, rng);
      const Mat w = detail::random_mat(t, cfg.num_labels, rng);
      DecoderCache cache;
      decoder_forward_sample(ps, e, &prompt, cfg.num_heads, &cache);
      ps.zero_grad();
      const DecoderGrads g = decoder_backward_sample(ps, cache, w, cfg.num_heads);
      auto f_eval = [&] {
        return detail::weighted_sum(decoder_forward_sample(ps, e, &prompt, cfg.num_heads, nullptr), w);
      };
      double worst = detail::max_over_params(ps, "decoder.", f_eval);
      worst = std::max(worst, check_against_fd(e.data, g.d_embedding.data, f_eval));
      worst = std::max(worst, check_against_fd(prompt.data, g.d_prompt.data, f_eval));
      return worst;
    }

    case GradComponent::Loss: {
      const std::size_t k = 3;
      FeatureMap logits(2, 8, 8, k);
      std::normal_distribution<double> dist(0.0, 1.5);
      for (double& v : logits.data) v = dist(rng);
      LabelMap target(2, 8, 8);
      std::uniform_int_distribution<int> lab(0, static_cast<int>(k) - 1);
      for (auto& v : target.labels) v = static_cast<std::uint8_t>(lab(rng));
      const LossConfig loss{0.8, 1e-5};
      FeatureMap d;
      combined_loss_grad(logits, target, loss, d);
      return check_against_fd(logits.data, d.data, [&] { return combined_loss(logits, target, loss); });
    }

    case GradComponent::Encoder: {
      ModelSpec spec{cfg, {}, 0, seed};
      ParameterStore ps;
      register_encoder(ps, cfg, true, seed);
      for (auto& [name, p] : ps) {
        if (p.frozen) continue;
        std::normal_distribution<double> dist(0.0, 0.3);
        for (double& v : p.value.data) v = dist(rng);
      }
      ImageBatch image(1, cfg.image_size, cfg.image_size, 1);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (double& v : image.data) v = u(rng);
      const Mat w = detail::random_mat(t, c, rng);
      const EncoderOptions opt = spec.encoder_options();
      EncoderCache cache;
      encoder_forward_sample(image, 0, ps, cfg, opt, &cache);
      ps.zero_grad();
      encoder_backward_sample(ps, cfg, opt, cache, w);
      return detail::max_over_params(ps, "encoder.", [&] {
        return detail::weighted_sum(encoder_forward_sample(image, 0, ps, cfg, opt, nullptr), w);
      });
    }
  }
  return 0.0;
}

}  // namespace dapsam

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dapsam/adapter.hpp"
#include "dapsam/config.hpp"
#include "dapsam/layers.hpp"
#include "dapsam/params.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

/// Images travel as FeatureMaps with h = H, w = W and channels = input channels.
using ImageBatch = FeatureMap;

struct EncoderOptions {
  bool adapters = true;  // false evaluates the bare frozen backbone
  AdapterOptions adapter;
};

inline std::string encoder_block_prefix(std::size_t i) {
  return "encoder.blocks." + std::to_string(i);
}

/// Registers the frozen backbone, the two adapters per block and (when fusion
/// is enabled) the trainable low-level projection.
inline void register_encoder(ParameterStore& ps, const EncoderConfig& cfg, bool low_level_fusion,
                             std::uint64_t seed) {
  cfg.validate();
  const std::size_t c = cfg.embed_dim;
  const std::size_t patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels;
  add_linear(ps, "encoder.patch_embed", patch_in, c, true,
             1.0 / std::sqrt(static_cast<double>(patch_in)), seed);
  ps.add("encoder.pos_embed", {cfg.tokens(), c}, true, Init::Zeros, 0.0, seed);
  if (low_level_fusion) {
    add_linear(ps, "encoder.low_level", c, c, false, 1.0 / std::sqrt(static_cast<double>(c)), seed);
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = encoder_block_prefix(i);
    add_transformer_block(ps, p, c, true, seed);
    add_adapter(ps, p + ".adapter1", c, cfg.adapter_rank, seed);
    add_adapter(ps, p + ".adapter2", c, cfg.adapter_rank, seed);
  }
  add_layernorm(ps, "encoder.neck", c, true, seed);
}

/// Closed-form trainable parameter count contributed by the encoder.
inline std::size_t encoder_trainable_count(const EncoderConfig& cfg, bool low_level_fusion) {
  const std::size_t c = cfg.embed_dim;
  const std::size_t r = cfg.adapter_rank;
  const std::size_t adapters = cfg.depth * 2 * (c * r + r + r * c + c);
  return adapters + (low_level_fusion ? c * c + c : 0);
}

// ---- patch embedding -------------------------------------------------------

inline void check_image(const ImageBatch& image, const EncoderConfig& cfg) {
  if (image.h != cfg.image_size) {
    throw InvalidInput("patch_embed: height " + std::to_string(image.h) + " != image_size " +
                       std::to_string(cfg.image_size));
  }
  if (image.w != cfg.image_size) {
    throw InvalidInput("patch_embed: width " + std::to_string(image.w) + " != image_size " +
                       std::to_string(cfg.image_size));
  }
  if (image.channels != cfg.in_channels) {
    throw InvalidInput("patch_embed: channels " + std::to_string(image.channels) +
                       " != in_channels " + std::to_string(cfg.in_channels));
  }
}

/// Unfolds sample `b` into (tokens x patch_size^2 * channels) rows.
inline Mat unfold_patches(const ImageBatch& image, std::size_t b, std::size_t patch) {
  const std::size_t gh = image.h / patch;
  const std::size_t gw = image.w / patch;
  const std::size_t ch = image.channels;
  Mat out(gh * gw, patch * patch * ch);
  for (std::size_t ty = 0; ty < gh; ++ty) {
    for (std::size_t tx = 0; tx < gw; ++tx) {
      double* row = out.data.data() + (ty * gw + tx) * out.cols;
      std::size_t k = 0;
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          for (std::size_t c = 0; c < ch; ++c) row[k++] = image.at(b, ty * patch + py, tx * patch + px, c);
        }
      }
    }
  }
  return out;
}

inline Mat patch_embed_sample(const ImageBatch& image, std::size_t b, const ParameterStore& ps,
                              const EncoderConfig& cfg) {
  Mat e0 = linear_forward(ps, "encoder.patch_embed", unfold_patches(image, b, cfg.patch_size));
  add_inplace(e0, ps.value("encoder.pos_embed"));
  return e0;
}

inline FeatureMap patch_embed(const ImageBatch& image, const ParameterStore& ps,
                              const EncoderConfig& cfg) {
  check_image(image, cfg);
  FeatureMap out(image.batch, cfg.grid(), cfg.grid(), cfg.embed_dim);
  for (std::size_t b = 0; b < image.batch; ++b) out.set_sample(b, patch_embed_sample(image, b, ps, cfg));
  return out;
}

struct PatchEmbedGrads {
  Mat weight;
  Mat bias;
};

/// Gradients of the (frozen) patch projection for a given upstream gradient;
/// used by verification code, never by the optimizer.
inline PatchEmbedGrads patch_embed_backward(const ImageBatch& image, const FeatureMap& d_e0,
                                            const ParameterStore& ps, const EncoderConfig& cfg) {
  const Mat& w = ps.value("encoder.patch_embed.weight");
  PatchEmbedGrads g{Mat(w.rows, w.cols), Mat(1, w.cols)};
  for (std::size_t b = 0; b < image.batch; ++b) {
    const Mat dy = d_e0.sample(b);
    add_at_b(unfold_patches(image, b, cfg.patch_size), dy, g.weight.data);
    add_colsum(dy, g.bias.data);
  }
  return g;
}

// ---- low-level projection ------------------------------------------------------

inline FeatureMap low_level_project(const FeatureMap& e0, const ParameterStore& ps) {
  const Mat& w = ps.value("encoder.low_level.weight");
  if (w.rows != e0.channels || w.cols != e0.channels) {
    throw InvalidInput("low_level_project: projection is " + std::to_string(w.rows) + "x" +
                       std::to_string(w.cols) + " but features have " +
                       std::to_string(e0.channels) + " channels");
  }
  FeatureMap out = e0;
  for (std::size_t b = 0; b < e0.batch; ++b) {
    out.set_sample(b, linear_forward(ps, "encoder.low_level", e0.sample(b)));
  }
  return out;
}

// ---- transformer encoder ---------------------------------------------------------

struct EncoderBlockCache {
  LayerNormCache norm1;
  AttentionCache attn;
  AdapterCache adapter1;
  LayerNormCache norm2;
  MlpCache mlp;
  AdapterCache adapter2;
};

struct EncoderCache {
  Mat e0;
  Mat f_low;
  std::vector<EncoderBlockCache> blocks;
  LayerNormCache neck;
};

/// Encodes one sample. The low-level feature is computed once from e0 and
/// shared by every adapter.
inline Mat encoder_forward_sample(const ImageBatch& image, std::size_t b, const ParameterStore& ps,
                                  const EncoderConfig& cfg, const EncoderOptions& opt,
                                  EncoderCache* cache) {
  Mat x = patch_embed_sample(image, b, ps, cfg);
  const bool use_low = opt.adapters && opt.adapter.fuse_low_level;
  Mat f_low = use_low ? linear_forward(ps, "encoder.low_level", x) : Mat{};
  if (cache != nullptr) {
    cache->e0 = x;
    cache->blocks.assign(cfg.depth, {});
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = encoder_block_prefix(i);
    EncoderBlockCache* bc = cache != nullptr ? &cache->blocks[i] : nullptr;

    Mat h = layernorm_forward(ps, p + ".norm1", x, bc ? &bc->norm1 : nullptr);
    add_inplace(x, attention_forward(ps, p + ".attn", h, cfg.num_heads, bc ? &bc->attn : nullptr));
    if (opt.adapters) {
      x = adapter_forward_sample(x, use_low ? &f_low : nullptr,
                                 AdapterParams::from_store(ps, p + ".adapter1"), opt.adapter,
                                 bc ? &bc->adapter1 : nullptr);
    }
    h = layernorm_forward(ps, p + ".norm2", x, bc ? &bc->norm2 : nullptr);
    add_inplace(x, mlp_forward(ps, p + ".mlp", h, bc ? &bc->mlp : nullptr));
    if (opt.adapters) {
      x = adapter_forward_sample(x, use_low ? &f_low : nullptr,
                                 AdapterParams::from_store(ps, p + ".adapter2"), opt.adapter,
                                 bc ? &bc->adapter2 : nullptr);
    }
    if (!all_finite(x.data)) {
      throw NumericFailure("encoder: non-finite activation in block " + std::to_string(i));
    }
  }
  Mat out = layernorm_forward(ps, "encoder.neck", x, cache ? &cache->neck : nullptr);
  if (cache != nullptr) cache->f_low = std::move(f_low);
  return out;
}

/// Backpropagates dL/de through one sample, accumulating gradients for the
/// trainable encoder parameters (adapters, low-level projection).
inline void encoder_backward_sample(ParameterStore& ps, const EncoderConfig& cfg,
                                    const EncoderOptions& opt, const EncoderCache& cache,
                                    const Mat& d_out) {
  const bool use_low = opt.adapters && opt.adapter.fuse_low_level;
  Mat dx = layernorm_backward(ps, "encoder.neck", cache.neck, d_out);
  Mat d_low = use_low ? Mat(dx.rows, dx.cols) : Mat{};
  auto adapter_back = [&](const std::string& prefix, const AdapterCache& ac) {
    const AdapterParams p = AdapterParams::from_store(ps, prefix);
    AdapterGrads g = adapter_backward_sample(p, opt.adapter, ac, dx);
    accumulate_adapter_grads(ps, prefix, g.d_params);
    if (use_low) add_inplace(d_low, g.d_low_level);
    dx = std::move(g.d_input);
  };
  for (std::size_t i = cfg.depth; i-- > 0;) {
    const std::string p = encoder_block_prefix(i);
    const EncoderBlockCache& bc = cache.blocks[i];
    if (opt.adapters) adapter_back(p + ".adapter2", bc.adapter2);
    add_inplace(dx, layernorm_backward(ps, p + ".norm2", bc.norm2,
                                       mlp_backward(ps, p + ".mlp", bc.mlp, dx)));
    if (opt.adapters) adapter_back(p + ".adapter1", bc.adapter1);
    add_inplace(dx, layernorm_backward(ps, p + ".norm1", bc.norm1,
                                       attention_backward(ps, p + ".attn", bc.attn, dx,
                                                          cfg.num_heads)));
  }
  if (use_low) linear_backward(ps, "encoder.low_level", cache.e0, d_low, false);
}

inline FeatureMap encoder_forward(const ImageBatch& image, const ParameterStore& ps,
                                  const EncoderConfig& cfg, const EncoderOptions& opt = {}) {
  check_image(image, cfg);
  FeatureMap out(image.batch, cfg.grid(), cfg.grid(), cfg.embed_dim);
  for (std::size_t b = 0; b < image.batch; ++b) {
    out.set_sample(b, encoder_forward_sample(image, b, ps, cfg, opt, nullptr));
  }
  return out;
}

}  // namespace dapsam

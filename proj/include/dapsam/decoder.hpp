#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dapsam/layers.hpp"
#include "dapsam/params.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

inline constexpr std::size_t kDecoderDepth = 2;

inline std::string decoder_block_prefix(std::size_t i) {
  return "decoder.blocks." + std::to_string(i);
}

/// Dense prompt fusion (zero-initialized), two transformer blocks over tokens,
/// a final norm and a per-token linear head. Everything here trains.
inline void register_decoder(ParameterStore& ps, std::size_t c, std::size_t num_labels,
                             std::uint64_t seed) {
  add_linear(ps, "decoder.fusion", c, c, false, 0.0, seed, Init::Zeros);
  for (std::size_t i = 0; i < kDecoderDepth; ++i) {
    add_transformer_block(ps, decoder_block_prefix(i), c, false, seed);
  }
  add_layernorm(ps, "decoder.norm", c, false, seed);
  add_linear(ps, "decoder.head", c, num_labels, false, 1.0 / std::sqrt(static_cast<double>(c)),
             seed);
}

struct DecoderBlockCache {
  LayerNormCache norm1;
  AttentionCache attn;
  LayerNormCache norm2;
  MlpCache mlp;
};

struct DecoderCache {
  Mat prompt;
  std::vector<DecoderBlockCache> blocks;
  LayerNormCache norm;
  Mat head_input;
};

/// Token logits (tokens x K) for one sample. A null prompt is a zero prompt.
inline Mat decoder_forward_sample(const ParameterStore& ps, const Mat& e, const Mat* prompt,
                                  std::size_t num_heads, DecoderCache* cache) {
  Mat x = e;
  Mat p = prompt != nullptr ? *prompt : Mat(e.rows, e.cols);
  add_inplace(x, linear_forward(ps, "decoder.fusion", p));
  if (cache != nullptr) {
    cache->prompt = std::move(p);
    cache->blocks.assign(kDecoderDepth, {});
  }
  for (std::size_t i = 0; i < kDecoderDepth; ++i) {
    const std::string pre = decoder_block_prefix(i);
    DecoderBlockCache* bc = cache != nullptr ? &cache->blocks[i] : nullptr;
    Mat h = layernorm_forward(ps, pre + ".norm1", x, bc ? &bc->norm1 : nullptr);
    add_inplace(x, attention_forward(ps, pre + ".attn", h, num_heads, bc ? &bc->attn : nullptr));
    h = layernorm_forward(ps, pre + ".norm2", x, bc ? &bc->norm2 : nullptr);
    add_inplace(x, mlp_forward(ps, pre + ".mlp", h, bc ? &bc->mlp : nullptr));
  }
  Mat normed = layernorm_forward(ps, "decoder.norm", x, cache ? &cache->norm : nullptr);
  Mat logits = linear_forward(ps, "decoder.head", normed);
  if (cache != nullptr) cache->head_input = std::move(normed);
  return logits;
}

struct DecoderGrads {
  Mat d_embedding;
  Mat d_prompt;
};

inline DecoderGrads decoder_backward_sample(ParameterStore& ps, const DecoderCache& cache,
                                            const Mat& d_logits, std::size_t num_heads) {
  Mat dx = layernorm_backward(ps, "decoder.norm", cache.norm,
                              linear_backward(ps, "decoder.head", cache.head_input, d_logits));
  for (std::size_t i = kDecoderDepth; i-- > 0;) {
    const std::string pre = decoder_block_prefix(i);
    const DecoderBlockCache& bc = cache.blocks[i];
    add_inplace(dx, layernorm_backward(ps, pre + ".norm2", bc.norm2,
                                       mlp_backward(ps, pre + ".mlp", bc.mlp, dx)));
    add_inplace(dx, layernorm_backward(ps, pre + ".norm1", bc.norm1,
                                       attention_backward(ps, pre + ".attn", bc.attn, dx, num_heads)));
  }
  DecoderGrads g;
  g.d_prompt = linear_backward(ps, "decoder.fusion", cache.prompt, dx);
  g.d_embedding = std::move(dx);
  return g;
}

inline FeatureMap decode(const FeatureMap& e, const FeatureMap& prompt, const ParameterStore& ps,
                         std::size_t num_heads) {
  require_same_shape(e, prompt, "decode");
  const std::size_t k = ps.value("decoder.head.weight").cols;
  FeatureMap out(e.batch, e.h, e.w, k);
  for (std::size_t b = 0; b < e.batch; ++b) {
    const Mat p = prompt.sample(b);
    out.set_sample(b, decoder_forward_sample(ps, e.sample(b), &p, num_heads, nullptr));
  }
  return out;
}

// ---- bilinear upsampling (corner-aligned) ------------------------------------------

/// Source coordinate table for corner-aligned resampling of `src` cells onto
/// `dst` cells.
struct AxisMap {
  std::vector<std::size_t> lo;
  std::vector<std::size_t> hi;
  std::vector<double> frac;

  AxisMap(std::size_t src, std::size_t dst) : lo(dst), hi(dst), frac(dst) {
    for (std::size_t i = 0; i < dst; ++i) {
      const double pos = dst > 1 ? static_cast<double>(i) * static_cast<double>(src - 1) /
                                       static_cast<double>(dst - 1)
                                 : 0.0;
      std::size_t l = static_cast<std::size_t>(std::floor(pos));
      if (l > src - 1) l = src - 1;
      lo[i] = l;
      hi[i] = std::min(l + 1, src - 1);
      frac[i] = pos - static_cast<double>(l);
    }
  }
};

/// Resamples one (h*w x K) token-logit matrix to (H*W x K).
inline Mat upsample_sample(const Mat& logits, std::size_t h, std::size_t w, std::size_t out_h,
                           std::size_t out_w) {
  const std::size_t k = logits.cols;
  const AxisMap ys(h, out_h);
  const AxisMap xs(w, out_w);
  Mat out(out_h * out_w, k);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = ys.frac[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = xs.frac[x];
      const double w00 = (1 - fy) * (1 - fx);
      const double w01 = (1 - fy) * fx;
      const double w10 = fy * (1 - fx);
      const double w11 = fy * fx;
      const auto r00 = logits.row(ys.lo[y] * w + xs.lo[x]);
      const auto r01 = logits.row(ys.lo[y] * w + xs.hi[x]);
      const auto r10 = logits.row(ys.hi[y] * w + xs.lo[x]);
      const auto r11 = logits.row(ys.hi[y] * w + xs.hi[x]);
      auto o = out.row(y * out_w + x);
      for (std::size_t c = 0; c < k; ++c) {
        o[c] = w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c];
      }
    }
  }
  return out;
}

inline Mat upsample_backward_sample(const Mat& d_out, std::size_t h, std::size_t w,
                                    std::size_t out_h, std::size_t out_w) {
  const std::size_t k = d_out.cols;
  const AxisMap ys(h, out_h);
  const AxisMap xs(w, out_w);
  Mat d(h * w, k);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = ys.frac[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = xs.frac[x];
      const auto g = d_out.row(y * out_w + x);
      auto r00 = d.row(ys.lo[y] * w + xs.lo[x]);
      auto r01 = d.row(ys.lo[y] * w + xs.hi[x]);
      auto r10 = d.row(ys.hi[y] * w + xs.lo[x]);
      auto r11 = d.row(ys.hi[y] * w + xs.hi[x]);
      for (std::size_t c = 0; c < k; ++c) {
        r00[c] += (1 - fy) * (1 - fx) * g[c];
        r01[c] += (1 - fy) * fx * g[c];
        r10[c] += fy * (1 - fx) * g[c];
        r11[c] += fy * fx * g[c];
      }
    }
  }
  return d;
}

inline FeatureMap upsample_logits(const FeatureMap& logits, long out_h, long out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw InvalidInput("upsample_logits: target size must be positive, got " +
                       std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const auto oh = static_cast<std::size_t>(out_h);
  const auto ow = static_cast<std::size_t>(out_w);
  FeatureMap out(logits.batch, oh, ow, logits.channels);
  for (std::size_t b = 0; b < logits.batch; ++b) {
    out.set_sample(b, upsample_sample(logits.sample(b), logits.h, logits.w, oh, ow));
  }
  return out;
}

/// Per-pixel argmax; ties go to the smaller label index.
inline LabelMap predict_mask(const FeatureMap& logits) {
  LabelMap out(logits.batch, logits.h, logits.w);
  const std::size_t k = logits.channels;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    const double* row = logits.data.data() + i * k;
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace dapsam

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dapsam/config.hpp"
#include "dapsam/decoder.hpp"
#include "dapsam/encoder.hpp"
#include "dapsam/losses.hpp"
#include "dapsam/params.hpp"
#include "dapsam/prompt.hpp"

namespace dapsam {

/// Everything that determines the parameter inventory and the forward graph.
struct ModelSpec {
  EncoderConfig encoder;
  Toggles toggles;
  std::size_t bank_size = 256;
  std::uint64_t seed = 0;

  bool prompt_enabled() const { return toggles.prompt_generator && bank_size > 0; }

  EncoderOptions encoder_options() const {
    return {true, {toggles.low_level_fusion, toggles.channel_filter}};
  }

  static ModelSpec from(const Config& c) {
    return {c.encoder, c.train.toggles, c.train.bank_size, c.train.seed};
  }
};

inline ParameterStore build_parameters(const ModelSpec& spec) {
  ParameterStore ps;
  register_encoder(ps, spec.encoder, spec.toggles.low_level_fusion, spec.seed);
  if (spec.prompt_enabled()) add_prompt_generator(ps, spec.encoder.embed_dim, spec.bank_size, spec.seed);
  register_decoder(ps, spec.encoder.embed_dim, spec.encoder.num_labels, spec.seed);
  partition_parameters(ps);  // validates names against the freezing policy
  return ps;
}

inline MemoryBank memory_bank(const ParameterStore& ps) {
  if (!ps.contains("prompt.bank")) throw InventoryError("model has no memory bank");
  return {ps.value("prompt.bank")};
}

struct SampleCache {
  EncoderCache encoder;
  Mat embedding;
  PromptCache prompt;
  Mat prompt_out;
  DecoderCache decoder;
};

struct ForwardResult {
  FeatureMap logits;  // batch x H x W x K at image resolution
  std::vector<SampleCache> caches;
};

/// Full forward pass. Caches are kept only when a backward pass follows.
inline ForwardResult model_forward(const ParameterStore& ps, const ModelSpec& spec,
                                   const ImageBatch& images, bool keep_cache) {
  const EncoderConfig& cfg = spec.encoder;
  check_image(images, cfg);
  const EncoderOptions opt = spec.encoder_options();
  ForwardResult r;
  r.logits = FeatureMap(images.batch, images.h, images.w, cfg.num_labels);
  if (keep_cache) r.caches.resize(images.batch);
  for (std::size_t b = 0; b < images.batch; ++b) {
    SampleCache local;
    SampleCache& sc = keep_cache ? r.caches[b] : local;
    sc.embedding = encoder_forward_sample(images, b, ps, cfg, opt, keep_cache ? &sc.encoder : nullptr);
    const Mat* prompt = nullptr;
    if (spec.prompt_enabled()) {
      sc.prompt_out = prompt_forward_sample(ps, sc.embedding, &sc.prompt);
      prompt = &sc.prompt_out;
    }
    const Mat tok = decoder_forward_sample(ps, sc.embedding, prompt, cfg.num_heads,
                                           keep_cache ? &sc.decoder : nullptr);
    r.logits.set_sample(b, upsample_sample(tok, cfg.grid(), cfg.grid(), images.h, images.w));
  }
  if (!all_finite(r.logits.data)) throw NumericFailure("model: non-finite logits");
  return r;
}

/// Accumulates parameter gradients for dL/dlogits (image resolution).
inline void model_backward(ParameterStore& ps, const ModelSpec& spec, const ForwardResult& fwd,
                           const FeatureMap& d_logits) {
  const EncoderConfig& cfg = spec.encoder;
  const EncoderOptions opt = spec.encoder_options();
  for (std::size_t b = 0; b < fwd.caches.size(); ++b) {
    const SampleCache& sc = fwd.caches[b];
    const Mat d_tok = upsample_backward_sample(d_logits.sample(b), cfg.grid(), cfg.grid(),
                                               d_logits.h, d_logits.w);
    DecoderGrads dg = decoder_backward_sample(ps, sc.decoder, d_tok, cfg.num_heads);
    if (spec.prompt_enabled()) {
      add_inplace(dg.d_embedding, prompt_backward_sample(ps, sc.prompt, sc.embedding, dg.d_prompt));
    }
    encoder_backward_sample(ps, cfg, opt, sc.encoder, dg.d_embedding);
  }
}

inline FeatureMap embed(const ParameterStore& ps, const ModelSpec& spec, const ImageBatch& images) {
  return encoder_forward(images, ps, spec.encoder, spec.encoder_options());
}

inline LabelMap predict(const ParameterStore& ps, const ModelSpec& spec, const ImageBatch& images) {
  return predict_mask(model_forward(ps, spec, images, false).logits);
}

/// Loss and gradients for one batch; gradients are accumulated, not reset.
inline LossValue loss_and_grad(ParameterStore& ps, const ModelSpec& spec, const ImageBatch& images,
                               const LabelMap& target, const LossConfig& loss) {
  const ForwardResult fwd = model_forward(ps, spec, images, true);
  FeatureMap d_logits;
  const LossValue v = combined_loss_grad(fwd.logits, target, loss, d_logits);
  if (!std::isfinite(v.total)) return v;
  model_backward(ps, spec, fwd, d_logits);
  return v;
}

}  // namespace dapsam

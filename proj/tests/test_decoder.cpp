#include <gtest/gtest.h>

#include "dapsam/dapsam.hpp"
#include "test_util.hpp"

using namespace dapsam;
using testutil::random_map;

namespace {

ParameterStore decoder_store(std::size_t k = 2, std::uint64_t seed = 0) {
  ParameterStore ps;
  register_decoder(ps, 16, k, seed);
  return ps;
}

}  // namespace

TEST(Decode, ZeroFusionIgnoresPrompt) {
  const ParameterStore ps = decoder_store();
  const FeatureMap e = random_map(2, 8, 8, 16, 1);
  const FeatureMap zero(2, 8, 8, 16);
  const FeatureMap prompt = random_map(2, 8, 8, 16, 2);
  EXPECT_EQ(decode(e, zero, ps, 2), decode(e, prompt, ps, 2));
  // a null prompt in the sample path is the zero prompt
  const Mat none = decoder_forward_sample(ps, e.sample(0), nullptr, 2, nullptr);
  EXPECT_EQ(none, decode(e, zero, ps, 2).sample(0));
}

TEST(Decode, ToyShape) {
  const FeatureMap logits = decode(random_map(1, 8, 8, 16, 3), FeatureMap(1, 8, 8, 16), decoder_store(), 2);
  EXPECT_EQ(logits.batch, 1u);
  EXPECT_EQ(logits.h, 8u);
  EXPECT_EQ(logits.w, 8u);
  EXPECT_EQ(logits.channels, 2u);
  EXPECT_EQ(decode(random_map(1, 8, 8, 16, 3), FeatureMap(1, 8, 8, 16), decoder_store(3), 2).channels, 3u);
}

TEST(Decode, ShapeMismatch) {
  EXPECT_THROW(decode(random_map(1, 8, 8, 16, 4), FeatureMap(1, 4, 8, 16), decoder_store(), 2), InvalidInput);
}

TEST(Decode, NoFrozenParameters) {
  const ParameterStore ps = decoder_store();
  EXPECT_EQ(ps.frozen_count(), 0u);
  EXPECT_GT(ps.trainable_count(), 0u);
}

TEST(Decode, GradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_LT(gradcheck(GradComponent::Decoder, s), 1e-4);
}

TEST(Decode, MeanLogitGradient) {
  ParameterStore ps = decoder_store(2, 5);
  for (double& v : ps.at("decoder.fusion.weight").value.data) v = 0.1;
  const Mat e = random_map(1, 8, 8, 16, 6).sample(0);
  const Mat p = random_map(1, 8, 8, 16, 7).sample(0);
  DecoderCache cache;
  const Mat out = decoder_forward_sample(ps, e, &p, 2, &cache);
  const Mat w(out.rows, out.cols, 1.0 / static_cast<double>(out.size()));
  ps.zero_grad();
  decoder_backward_sample(ps, cache, w, 2);
  auto f = [&] { return detail::weighted_sum(decoder_forward_sample(ps, e, &p, 2, nullptr), w); };
  EXPECT_LT(detail::max_over_params(ps, "decoder.", f), 1e-4);
}

TEST(Decode, PromptInfluencesTrainedModel) {
  const ModelSpec spec{toy_encoder(), {}, 32, 0};
  ParameterStore ps = build_parameters(spec);
  const ImageBatch img = testutil::random_image(2, 64, 8);
  LabelMap target(2, 64, 64);
  for (std::size_t i = 0; i < target.labels.size(); i += 2) target.labels[i] = 1;
  AdamW opt;
  for (int s = 0; s < 3; ++s) {
    ps.zero_grad();
    loss_and_grad(ps, spec, img, target, {});
    opt.step(ps, 1e-2);
  }
  const FeatureMap e = embed(ps, spec, img);
  FeatureMap prompt(e.batch, e.h, e.w, e.channels);
  for (std::size_t b = 0; b < e.batch; ++b) prompt.set_sample(b, prompt_forward_sample(ps, e.sample(b), nullptr));
  EXPECT_NE(decode(e, prompt, ps, 2), decode(e, FeatureMap(e.batch, e.h, e.w, e.channels), ps, 2));
}

TEST(Upsample, SameSizeIsIdentity) {
  const FeatureMap l = random_map(2, 8, 8, 3, 9);
  EXPECT_EQ(upsample_logits(l, 8, 8), l);
}

TEST(Upsample, ConstantStaysConstant) {
  const FeatureMap out = upsample_logits(FeatureMap(1, 8, 8, 2, 1.25), 64, 64);
  for (double v : out.data) EXPECT_DOUBLE_EQ(v, 1.25);
}

TEST(Upsample, HandBilinear) {
  FeatureMap l(1, 2, 2, 1);
  l.data = {0, 0, 0, 4};
  const FeatureMap out = upsample_logits(l, 4, 4);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      // corner-aligned: source coordinate = i * (2-1)/(4-1)
      const double expect = 4.0 * (y / 3.0) * (x / 3.0);
      EXPECT_NEAR(out.at(0, y, x, 0), expect, 1e-12);
      EXPECT_GE(out.at(0, y, x, 0), 0.0);
      EXPECT_LE(out.at(0, y, x, 0), 4.0);
    }
  }
  EXPECT_EQ(out.at(0, 0, 0, 0), 0.0);
  EXPECT_EQ(out.at(0, 3, 3, 0), 4.0);
  EXPECT_EQ(out.at(0, 0, 3, 0), 0.0);
}

TEST(Upsample, BackwardIsAdjoint) {
  const Mat x = random_map(1, 4, 4, 2, 10).sample(0);
  const Mat g = random_map(1, 9, 7, 2, 11).sample(0);
  const Mat up = upsample_sample(x, 4, 4, 9, 7);
  const Mat back = upsample_backward_sample(g, 4, 4, 9, 7);
  EXPECT_NEAR(dot(up.data, g.data), dot(x.data, back.data), 1e-12);
}

TEST(Upsample, NonpositiveSize) {
  const FeatureMap l(1, 2, 2, 1);
  EXPECT_THROW(upsample_logits(l, 0, 4), InvalidInput);
  EXPECT_THROW(upsample_logits(l, 4, -1), InvalidInput);
}

TEST(PredictMask, Argmax) {
  FeatureMap l(1, 1, 2, 2);
  l.data = {0.1, 0.9, 0.5, 0.5};
  const LabelMap m = predict_mask(l);
  EXPECT_EQ(m.labels[0], 1);
  EXPECT_EQ(m.labels[1], 0);
}

TEST(PredictMask, ShiftInvariant) {
  FeatureMap l = random_map(2, 8, 8, 3, 12);
  const LabelMap a = predict_mask(l);
  for (double& v : l.data) v += 7.5;
  EXPECT_EQ(predict_mask(l), a);
}

#include <gtest/gtest.h>

#include "dapsam/config.hpp"
#include "dapsam/rng.hpp"

using namespace dapsam;

TEST(Config, DefaultsMatchPaperSettings) {
  const Config c = default_config();
  EXPECT_DOUBLE_EQ(c.train.base_lr, 5e-4);
  EXPECT_DOUBLE_EQ(c.train.weight_decay, 0.1);
  EXPECT_EQ(c.train.warmup_steps, 250u);
  EXPECT_EQ(c.train.max_epochs, 200u);
  EXPECT_EQ(c.train.stop_epoch, 160u);
  EXPECT_DOUBLE_EQ(c.train.lambda, 0.8);
  EXPECT_EQ(c.train.bank_size, 256u);
  EXPECT_EQ(c.encoder.adapter_rank, 4u);
  EXPECT_EQ(c.data.domains.size(), 6u);
  EXPECT_EQ(fundus_config().train.warmup_steps, 25u);
  EXPECT_EQ(fundus_config().data.domains.size(), 5u);
  EXPECT_EQ(fundus_config().encoder.num_labels, 3u);
}

TEST(Config, VitbPreset) {
  const EncoderConfig v = vitb_encoder();
  EXPECT_EQ(v.image_size, 384u);
  EXPECT_EQ(v.patch_size, 16u);
  EXPECT_EQ(v.embed_dim, 768u);
  EXPECT_EQ(v.depth, 12u);
  EXPECT_EQ(v.num_heads, 12u);
  EXPECT_NO_THROW(v.validate());
}

TEST(Config, JsonRoundTrip) {
  const Config c = fundus_config();
  const Config back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json(Json{{"trian", Json::object()}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"train", {{"lr", 1.0}}}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"train", {{"toggles", {{"ppg", true}}}}}}), InvalidInput);
}

TEST(Config, InvariantsEnforced) {
  EXPECT_THROW(config_from_json(Json{{"train", {{"stop_epoch", 300}}}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"encoder", {{"adapter_rank", 16}}}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"encoder", {{"patch_size", 7}}}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"encoder", {{"image_size", 32}}}}), InvalidInput);
  Json bad_gamma = {{"data", {{"domains", {{{"name", "X"}, {"gamma", 0.0}}}}}}};
  EXPECT_THROW(config_from_json(bad_gamma), InvalidInput);
  Json bad_noise = {{"data", {{"domains", {{{"name", "X"}, {"noise_std", -1.0}}}}}}};
  EXPECT_THROW(config_from_json(bad_noise), InvalidInput);
}

TEST(Config, PartialDocumentKeepsDefaults) {
  const Config c = config_from_json(Json{{"train", {{"seed", 7}}}});
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.train.warmup_steps, 250u);
  EXPECT_TRUE(c.train.toggles.prompt_generator);
}

TEST(Rng, DeriveSeedSeparatesTags) {
  EXPECT_NE(derive_seed(0, "a"), derive_seed(0, "b"));
  EXPECT_NE(derive_seed(0, "a"), derive_seed(1, "a"));
  EXPECT_NE(derive_seed(0, "a", 0), derive_seed(0, "a", 1));
  EXPECT_EQ(derive_seed(5, "x", 3), derive_seed(5, "x", 3));
}

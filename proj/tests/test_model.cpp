#include <gtest/gtest.h>

#include <cmath>

#include <chrono>
#include <numeric>

#include "hdmae/errors.hpp"
#include "hdmae/model.hpp"
#include "hdmae/phantom.hpp"

using namespace hdmae;
using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

ViTConfig small_config() {
  ViTConfig c;
  c.patch = PatchConfig{16, 4, 16};
  c.enc_dim = 16;
  c.enc_heads = 2;
  c.enc_depth = 1;
  c.dec_dim = 8;
  c.dec_heads = 2;
  c.dec_depth = 1;
  c.mlp_ratio = 2;
  return c;
}

ImageGray noise_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  ImageGray img;
  img.side = side;
  for (int i = 0; i < side * side; ++i) img.pixels.push_back(static_cast<float>(rng.uniform()));
  return img;
}

std::vector<std::pair<std::string, std::vector<float>>> dump(const ModelParams<float>& p) {
  std::vector<std::pair<std::string, std::vector<float>>> out;
  p.visit([&](const std::string& n, const TF& t, bool) {
    out.emplace_back(n, std::vector<float>(t.data().begin(), t.data().end()));
  });
  return out;
}

}  // namespace

TEST(ViTConfigTest, ToyParameterCountMatchesHandSum) {
  const auto cfg = ViTConfig::toy();
  const std::int64_t patch = 64 * 64 + 64;
  const std::int64_t enc_block = 2 * 64 + 4 * (64 * 64 + 64) + 2 * 64 + (64 * 256 + 256) + (256 * 64 + 64);
  const std::int64_t dec_block = 2 * 32 + 4 * (32 * 32 + 32) + 2 * 32 + (32 * 128 + 128) + (128 * 32 + 32);
  const std::int64_t expected = patch + 4 * enc_block + 2 * 64 + (64 * 32 + 32) + 32 +
                                2 * dec_block + 2 * 32 + (32 * 64 + 64);
  EXPECT_EQ(expected, 233920);
  EXPECT_EQ(cfg.parameter_count(), expected);
  EXPECT_EQ(init_params<float>(cfg, 0).numel(), expected);
}

TEST(ViTConfigTest, FullScaleIsLegal) {
  const auto cfg = ViTConfig::full_scale();
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.patch.token_count(), 400);
  EXPECT_EQ(cfg.enc_depth, 24);
  EXPECT_EQ(cfg.enc_heads, 16);
  EXPECT_EQ(cfg.enc_dim, 1024);
  EXPECT_EQ(cfg.dec_depth, 8);
  auto block = [](std::int64_t d, std::int64_t h) {
    return 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
  };
  const std::int64_t expected = (4096 * 1024 + 1024) + 24 * block(1024, 4096) + 2 * 1024 +
                                (1024 * 512 + 512) + 512 + 8 * block(512, 2048) + 2 * 512 +
                                (512 * 4096 + 4096);
  EXPECT_EQ(cfg.parameter_count(), expected);
}

TEST(ViTConfigTest, HeadsMustDivideWidth) {
  auto cfg = ViTConfig::toy();
  cfg.enc_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ViTConfig::toy();
  cfg.dec_heads = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(InitParams, DeterministicAndSchemeExact) {
  const auto cfg = small_config();
  const auto a = init_params<float>(cfg, 3);
  const auto b = init_params<float>(cfg, 3);
  const auto c = init_params<float>(cfg, 4);
  EXPECT_EQ(dump(a), dump(b));
  EXPECT_NE(dump(a), dump(c));
  a.visit([](const std::string& name, const TF& t, bool decays) {
    const bool gain = name.size() > 2 && name.substr(name.size() - 2) == ".g";
    for (float v : t.data()) {
      if (gain) {
        ASSERT_EQ(v, 1.0f) << name;
      } else if (!decays && name != "mask_token") {
        ASSERT_EQ(v, 0.0f) << name;
      } else {
        ASSERT_LE(std::abs(v), 0.04f + 1e-7f) << name;
      }
    }
  });
  bool mask_token_nonzero = false;
  for (float v : a.mask_token.data()) mask_token_nonzero |= v != 0.0f;
  EXPECT_TRUE(mask_token_nonzero);
}

TEST(InitParams, DecayFlags) {
  std::vector<std::string> no_decay;
  init_params<float>(small_config(), 0).visit([&](const std::string& n, const TF&, bool d) {
    if (!d) no_decay.push_back(n);
  });
  EXPECT_NE(std::find(no_decay.begin(), no_decay.end(), "mask_token"), no_decay.end());
  EXPECT_NE(std::find(no_decay.begin(), no_decay.end(), "enc.0.attn.bq"), no_decay.end());
  EXPECT_EQ(std::find(no_decay.begin(), no_decay.end(), "enc.0.attn.wq"), no_decay.end());
}

TEST(CheckParams, ShapeMismatchThrows) {
  auto p = init_params<float>(small_config(), 0);
  p.head_w = TF::zeros({3, 3});
  EXPECT_THROW(check_params(p, small_config()), ContractError);
}

TEST(Attention, SingleTokenReturnsValue) {
  TD q({1, 4}, {1, 2, 3, 4}), k({1, 4}, {-1, 0, 2, 1}), v({1, 4}, {0.5, -0.25, 3, 7});
  const auto y = attention(q, k, v, 2);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(y.data()[static_cast<std::size_t>(i)], v.data()[static_cast<std::size_t>(i)]);
}

TEST(Attention, IdenticalKeysAverageValues) {
  Rng rng(1);
  const auto q = gaussian_init<double>({3, 4}, rng, 0, 1);
  TD k({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  const auto v = gaussian_init<double>({3, 4}, rng, 0, 1);
  const auto y = attention(q, k, v, 2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) {
      const double m = (v.data()[static_cast<std::size_t>(c)] + v.data()[static_cast<std::size_t>(4 + c)] +
                        v.data()[static_cast<std::size_t>(8 + c)]) / 3.0;
      EXPECT_NEAR(y.data()[static_cast<std::size_t>(r * 4 + c)], m, 1e-12);
    }
}

TEST(Attention, PerHeadScaleMatchesHandComputation) {
  // Two tokens, two heads of width 1: logits are q*k / sqrt(1).
  TD q({2, 2}, {1, 0, 0, 2}), k({2, 2}, {0, 1, 1, 0}), v({2, 2}, {1, 10, 3, 30});
  const auto y = attention(q, k, v, 2);
  // Token 0, head 0: logits [0, 1]; head 1: logits [0, 0].
  const double p = 1.0 / (1.0 + std::exp(1.0));
  EXPECT_NEAR(y.data()[0], p * 1 + (1 - p) * 3, 1e-12);
  EXPECT_NEAR(y.data()[1], 20.0, 1e-12);
  // Token 1, head 1: logits [2, 0].
  const double p1 = 1.0 / (1.0 + std::exp(-2.0));
  EXPECT_NEAR(y.data()[3], p1 * 10 + (1 - p1) * 30, 1e-12);
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(2);
  const auto q = gaussian_init<float>({5, 8}, rng, 0, 1);
  const auto k = gaussian_init<float>({5, 8}, rng, 0, 1);
  const auto v = gaussian_init<float>({5, 8}, rng, 0, 1);
  const std::int64_t perm[] = {3, 0, 4, 1, 2};
  const auto y = attention(q, k, v, 2);
  const auto yp = attention(gather_rows(q, perm), gather_rows(k, perm), gather_rows(v, perm), 2);
  const auto y_perm = gather_rows(y, perm);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(yp.data()[i], y_perm.data()[i], 1e-5);
}

TEST(Attention, HeadsMustDivide) {
  EXPECT_THROW(attention(TD::zeros({2, 6}), TD::zeros({2, 6}), TD::zeros({2, 6}), 4), ConfigError);
}

TEST(Encoder, ZeroDepthIsFinalNormOnly) {
  auto cfg = small_config();
  cfg.enc_depth = 0;
  const auto p = init_params<double>(cfg, 0);
  Rng rng(5);
  const auto x = gaussian_init<double>({3, 16}, rng, 0, 1);
  const auto y = encoder_forward(p, cfg, x);
  const auto ref = layer_norm(x, p.enc_norm_g, p.enc_norm_b, 1e-6);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.data()[i], ref.data()[i]);
}

TEST(Encoder, ShapePreservedForAnyTokenCount) {
  const auto cfg = small_config();
  const auto p = init_params<float>(cfg, 0);
  for (int m : {1, 2, 7, 16}) {
    EXPECT_EQ(encoder_forward(p, cfg, TF::zeros({m, 16})).shape(), (Shape{m, 16}));
  }
}

TEST(Decoder, LatentCountMustMatchPlan) {
  const auto cfg = small_config();
  const auto p = init_params<float>(cfg, 0);
  const auto pos = PositionTables<float>::make(cfg);
  const auto plan = MaskPlan::from_masked(16, {0, 1, 2}, 0.2);
  EXPECT_THROW(decoder_forward(p, cfg, TF::zeros({4, 16}), plan, pos.dec), ContractError);
}

TEST(Decoder, MaskedPositionsShareMaskTokenInput) {
  // With no decoder blocks and a zeroed pos table, two masked tokens both
  // see only the mask token, so their predictions coincide.
  auto cfg = small_config();
  cfg.dec_depth = 0;
  const auto p = init_params<double>(cfg, 1);
  const auto plan = MaskPlan::from_masked(16, {2, 9}, 0.125);
  Rng rng(2);
  const auto latents = gaussian_init<double>({14, 16}, rng, 0, 1);
  const auto out = decoder_forward(p, cfg, latents, plan, TD::zeros({16, 8}));
  for (int c = 0; c < 16; ++c) EXPECT_EQ(out.data()[static_cast<std::size_t>(2 * 16 + c)], out.data()[static_cast<std::size_t>(9 * 16 + c)]);
  const auto pos = PositionTables<double>::make(cfg);
  const auto out2 = decoder_forward(p, cfg, latents, plan, pos.dec);
  bool differs = false;
  for (int c = 0; c < 16; ++c) differs |= out2.data()[static_cast<std::size_t>(2 * 16 + c)] != out2.data()[static_cast<std::size_t>(9 * 16 + c)];
  EXPECT_TRUE(differs);
}

TEST(Decoder, NoMaskedTokensIgnoresMaskToken) {
  const auto cfg = small_config();
  auto p = init_params<double>(cfg, 1);
  const auto plan = MaskPlan::from_masked(16, {}, 0.0);
  Rng rng(3);
  const auto latents = gaussian_init<double>({16, 16}, rng, 0, 1);
  const auto pos = PositionTables<double>::make(cfg);
  const auto a = decoder_forward(p, cfg, latents, plan, pos.dec);
  for (auto& v : p.mask_token.mutable_data()) v += 1.0;
  const auto b = decoder_forward(p, cfg, latents, plan, pos.dec);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(MaeLoss, HandExamplesAndVisibleInvariance) {
  const auto plan = MaskPlan::from_masked(3, {1}, 0.33);
  TD target = TD::zeros({3, 4});
  TD pred = TD::zeros({3, 4});
  EXPECT_EQ(mae_loss(pred, target, plan).item(), 0.0);
  for (int c = 0; c < 4; ++c) pred.mutable_data()[static_cast<std::size_t>(4 + c)] = 0.5;
  EXPECT_EQ(mae_loss(pred, target, plan).item(), 0.25);
  for (int c = 0; c < 4; ++c) target.mutable_data()[static_cast<std::size_t>(c)] = 9.0;
  EXPECT_EQ(mae_loss(pred, target, plan).item(), 0.25);
  EXPECT_THROW(mae_loss(pred, target, MaskPlan::from_masked(3, {}, 0.0)), ContractError);
  EXPECT_THROW(mae_loss(pred, TD::zeros({3, 5}), plan), DimensionError);
}

TEST(MaeForward, DeterministicAndVisibleTargetInvariant) {
  const auto cfg = small_config();
  const auto p = init_params<float>(cfg, 0);
  const auto pos = PositionTables<float>::make(cfg);
  const auto img = noise_image(16, 1);
  const auto patches = patchify<float>(img, cfg.patch);
  Rng rng(4);
  const auto plan = random_mask(16, 0.75, rng);
  const auto a = mae_forward(p, cfg, pos, patches, plan);
  const auto b = mae_forward(p, cfg, pos, patches, plan);
  EXPECT_EQ(a.loss.item(), b.loss.item());
  EXPECT_TRUE(std::equal(a.pred.data().begin(), a.pred.data().end(), b.pred.data().begin()));
  GradTape<float>::current().clear();
}

TEST(Encoder, ComputeScalesWithVisibleTokens) {
  ViTConfig cfg = ViTConfig::toy();
  cfg.patch.image_side = 128;  // N = 256
  const auto p = init_params<float>(cfg, 0);
  const auto pos = PositionTables<float>::make(cfg);
  const auto patches = patchify<float>(noise_image(128, 2), cfg.patch);
  Rng rng(1);
  const auto plan = random_mask(256, 0.75, rng);
  std::vector<std::int64_t> all(256);
  std::iota(all.begin(), all.end(), 0);
  NoGradGuard no_grad;
  auto time = [&](std::span<const std::int64_t> vis) {
    double best = 1e9;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      encode_visible(p, cfg, patches, vis, pos.enc);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  const double masked = time(plan.visible);
  const double full = time(all);
  EXPECT_GT(full / masked, 1.5);
}

#include <gtest/gtest.h>

#include <cmath>

#include "densegrade/gradcam.hpp"
#include "testutil.hpp"

using namespace densegrade;
using dgtest::random_tensor;
using dgtest::TempDir;

namespace {

TEST(Cam, UnitWeightSingleChannelIsReluOfActivation) {
  auto a = Tensor::from_vector({1, 2, 2}, {1, -2, 3, -4});
  auto g = Tensor::full({1, 2, 2}, 1.0f);
  auto map = cam(a, g);
  EXPECT_EQ(map, (std::vector<float>{1, 0, 3, 0}));
}

TEST(Cam, NegativeGradientOnNonNegativeActivationClipsToZero) {
  auto a = Tensor::from_vector({1, 2, 2}, {1, 2, 3, 4});
  auto g = Tensor::full({1, 2, 2}, -1.0f);
  auto map = cam(a, g);
  EXPECT_EQ(map, (std::vector<float>{0, 0, 0, 0}));
}

TEST(Cam, ShapeMismatchIsError) {
  auto a = Tensor::zeros({2, 3, 3});
  auto g = Tensor::zeros({2, 3, 4});
  EXPECT_THROW(cam(a, g), std::invalid_argument);
}

TEST(Cam, MatchesBruteForceWeightedSumOracle) {
  RngStream rng(1);
  auto a = random_tensor<float>({3, 4, 5}, rng);
  auto g = random_tensor<float>({3, 4, 5}, rng);
  auto map = cam(a, g);

  // brute-force per-pixel oracle straight from the definition
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      double expect = 0.0;
      for (int c = 0; c < 3; ++c) {
        double alpha = 0.0;
        for (int i = 0; i < 20; ++i) alpha += g.values()[c * 20 + i];
        alpha /= 20.0;
        expect += alpha * a.values()[c * 20 + y * 5 + x];
      }
      expect = std::max(expect, 0.0);
      EXPECT_NEAR(map[y * 5 + x], expect, 1e-6) << y << "," << x;
    }
}

TEST(Cam, LinearInActivationsBeforeClip) {
  RngStream rng(2);
  auto a1 = random_tensor<float>({2, 3, 3}, rng);
  auto a2 = random_tensor<float>({2, 3, 3}, rng);
  auto g = random_tensor<float>({2, 3, 3}, rng);
  auto sum_map = cam_weighted_sum(add(a1, a2), g);
  auto m1 = cam_weighted_sum(a1, g);
  auto m2 = cam_weighted_sum(a2, g);
  for (std::size_t i = 0; i < sum_map.size(); ++i)
    EXPECT_NEAR(sum_map[i], m1[i] + m2[i], 1e-5);
}

TEST(Capture, TinyFinalStageSpatialSizeFromStrideArithmetic) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 18;
  cfg.input_height = cfg.input_width = 32;
  auto model = Model::build(cfg, 1);
  RngStream rng(3);
  auto img = random_tensor<float>({3, 32, 32}, rng, 0.0, 1.0);
  auto cap = capture(model, img, model.default_cam_layer());
  // 32 -> stem conv /2 -> 16 -> max pool /2 -> 8 -> transition /2 -> 4
  EXPECT_EQ(cap.activations.shape(), (Shape{1, 8, 4, 4}));
  EXPECT_EQ(cap.logits.shape(), (Shape{1, 18}));
}

TEST(Capture, DeterministicAndSideEffectFree) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 5;
  cfg.input_height = cfg.input_width = 16;
  auto model = Model::build(cfg, 4);
  RngStream rng(5);
  auto img = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);

  auto cap_a = capture(model, img, model.default_cam_layer());
  auto cap_b = capture(model, img, model.default_cam_layer());
  EXPECT_EQ(cap_a.activations.values(), cap_b.activations.values());
  EXPECT_EQ(cap_a.logits.values(), cap_b.logits.values());

  auto batched = Tensor::zeros({1, 3, 16, 16});
  std::copy(img.data(), img.data() + img.size(), batched.data());
  NoGradGuard ng;
  auto plain = model.forward(batched, false);
  EXPECT_EQ(plain.values(), cap_a.logits.values());
}

TEST(Capture, UnknownLayerIsError) {
  auto cfg = DenseNetConfig::preset("tiny");
  auto model = Model::build(cfg, 4);
  RngStream rng(5);
  auto img = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
  EXPECT_THROW(capture(model, img, "block9.layer9.conv2"), std::runtime_error);
}

// Minimal hand-wired network whose captured activation is nonzero in exactly
// one spatial cell: identity-tap stem conv, default (identity) eval-mode BN,
// identity-tap 3x3 conv, all-positive head.
Model build_peaked_model() {
  DenseNetConfig cfg;
  cfg.growth_rate = 1;
  cfg.block_layout = {1};
  cfg.bottleneck = false;
  cfg.compression = 1.0;
  cfg.stem_channels = 1;
  cfg.num_classes = 2;
  cfg.input_channels = 1;
  cfg.input_height = cfg.input_width = 8;
  auto model = Model::build(cfg, 1);
  for (auto& [name, t] : model.parameters()) {
    if (name == "stem.conv.kernel") {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
      t.values()[3 * 7 + 3] = 1.0f;  // center tap
    } else if (name == "block1.layer1.conv2.kernel") {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
      t.values()[1 * 3 + 1] = 1.0f;  // center tap
    } else if (name == "head.weight") {
      std::fill(t.values().begin(), t.values().end(), 1.0f);
    } else if (name == "head.bias") {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
    }
  }
  return model;
}

TEST(Explain, AnalyticallyForcedPeakLocation) {
  auto model = build_peaked_model();
  // bright patch in the top-left corner; zero elsewhere
  auto img = Tensor::zeros({1, 8, 8});
  img.values()[0] = 1.0f;
  img.values()[1] = 1.0f;
  img.values()[8] = 1.0f;
  img.values()[9] = 1.0f;

  auto heat = explain(model, img, /*target_class=*/0);
  EXPECT_FALSE(heat.all_zero);
  EXPECT_EQ(heat.height, 8);
  EXPECT_EQ(heat.width, 8);
  // the only active cell of the 2x2 map is (0,0); its upsampled peak stays
  // in the top-left quarter
  EXPECT_EQ(heat.peak_row, 0);
  EXPECT_EQ(heat.peak_col, 0);
  EXPECT_FLOAT_EQ(heat.values[0], 1.0f);
  EXPECT_LT(heat.values[7 * 8 + 7], 0.05f);
}

TEST(Explain, AllZeroInputOnZeroBiasModelIsFlagged) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 4;
  cfg.input_height = cfg.input_width = 16;
  auto model = Model::build(cfg, 9);
  auto img = Tensor::zeros({3, 16, 16});
  auto heat = explain(model, img, 0);
  EXPECT_TRUE(heat.all_zero);
  for (float v : heat.values) EXPECT_EQ(v, 0.0f);
}

TEST(Explain, HeatmapNonNegativeAtInputResolution) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 6;
  cfg.input_height = cfg.input_width = 16;
  auto model = Model::build(cfg, 10);
  RngStream rng(11);
  auto img = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
  auto heat = explain(model, img);
  EXPECT_EQ(heat.height, 16);
  EXPECT_EQ(heat.width, 16);
  float max_v = 0.0f;
  for (float v : heat.values) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
    max_v = std::max(max_v, v);
  }
  if (!heat.all_zero) EXPECT_FLOAT_EQ(max_v, 1.0f);
  EXPECT_EQ(heat.source_layer, "block2.layer2.conv2");
  EXPECT_GE(heat.target_class, 0);
  EXPECT_LT(heat.target_class, 6);
}

TEST(Explain, NormalizedMapInvariantUnderLogitScaling) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 3;
  cfg.input_height = cfg.input_width = 16;
  auto model = Model::build(cfg, 12);
  RngStream rng(13);
  auto img = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
  auto base = explain(model, img, 1);

  // scaling head weight and bias scales every logit by the same factor
  for (auto& [name, t] : model.parameters())
    if (name == "head.weight" || name == "head.bias")
      for (float& v : t.values()) v *= 3.0f;
  auto scaled = explain(model, img, 1);

  ASSERT_EQ(base.values.size(), scaled.values.size());
  EXPECT_EQ(base.all_zero, scaled.all_zero);
  for (std::size_t i = 0; i < base.values.size(); ++i)
    EXPECT_NEAR(base.values[i], scaled.values[i], 1e-4);
  EXPECT_EQ(base.peak_row, scaled.peak_row);
  EXPECT_EQ(base.peak_col, scaled.peak_col);
}

TEST(Explain, OutOfRangeClassIsError) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 4;
  cfg.input_height = cfg.input_width = 16;
  auto model = Model::build(cfg, 14);
  auto img = Tensor::full({3, 16, 16}, 0.5f);
  EXPECT_THROW(explain(model, img, 4), std::invalid_argument);
  EXPECT_THROW(explain(model, img, -1), std::invalid_argument);
}

TEST(Explain, LossTargetAlsoProducesValidMap) {
  auto cfg = DenseNetConfig::preset("tiny");
  cfg.num_classes = 4;
  cfg.input_height = cfg.input_width = 16;
  auto model = Model::build(cfg, 15);
  RngStream rng(16);
  auto img = random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0);
  auto heat = explain(model, img, 2, CamTarget::Loss);
  EXPECT_EQ(static_cast<int>(heat.values.size()), 16 * 16);
  for (float v : heat.values) EXPECT_GE(v, 0.0f);
}

TEST(RenderOverlay, ZeroHeatmapDimsInput) {
  RngStream rng(17);
  auto img = random_tensor<float>({3, 6, 6}, rng, 0.0, 1.0);
  Heatmap zero;
  zero.height = zero.width = 6;
  zero.values.assign(36, 0.0f);
  zero.all_zero = true;
  const double alpha = 0.4;
  auto out = render_overlay(img, zero, Colormap::Hot, alpha);
  for (std::size_t i = 0; i < 36; ++i)
    for (int c = 0; c < 3; ++c) {
      const double expect = (1.0 - alpha) * img.values()[c * 36 + i];
      EXPECT_EQ(out.pixels[i * 3 + c],
                static_cast<std::uint8_t>(std::clamp(std::round(expect * 255.0), 0.0, 255.0)));
    }
}

TEST(RenderOverlay, DeterministicBytesAndMatchingDimensions) {
  TempDir tmp("overlay");
  RngStream rng(18);
  auto img = random_tensor<float>({3, 12, 10}, rng, 0.0, 1.0);
  Heatmap heat;
  heat.height = 12;
  heat.width = 10;
  heat.values.resize(120);
  for (std::size_t i = 0; i < 120; ++i) heat.values[i] = static_cast<float>(i) / 119.0f;

  auto a = render_overlay(img, heat);
  auto b = render_overlay(img, heat);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.width, 10);
  EXPECT_EQ(a.height, 12);

  write_png(tmp.path() / "a.png", a);
  write_png(tmp.path() / "b.png", b);
  std::ifstream fa(tmp.path() / "a.png", std::ios::binary);
  std::ifstream fb(tmp.path() / "b.png", std::ios::binary);
  std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  EXPECT_EQ(da, db);
  EXPECT_FALSE(da.empty());
}

TEST(RenderOverlay, MismatchedResolutionIsError) {
  auto img = Tensor::full({3, 8, 8}, 0.5f);
  Heatmap heat;
  heat.height = heat.width = 4;
  heat.values.assign(16, 0.5f);
  EXPECT_THROW(render_overlay(img, heat), std::invalid_argument);
}

TEST(Colormap, HotMapsZeroToBlack) {
  auto black = colormap_rgb(Colormap::Hot, 0.0);
  EXPECT_EQ(black, (std::array<double, 3>{0, 0, 0}));
  auto white = colormap_rgb(Colormap::Hot, 1.0);
  EXPECT_EQ(white, (std::array<double, 3>{1, 1, 1}));
}

}  // namespace

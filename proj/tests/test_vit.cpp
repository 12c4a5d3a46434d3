#include "dicom/nn/vit.hpp"
#include "support.hpp"

namespace dicom {
namespace {

BackboneConfig tiny_backbone() { return test::tiny_config().backbone; }

TEST(Patchify, FourByFourWithPatchTwoGivesFourPatches) {
  Mat img(4, 4);
  for (int i = 0; i < 16; ++i) img.data()[i] = i;
  const Mat p = patchify(img, 2);
  ASSERT_EQ(p.rows(), 4);
  ASSERT_EQ(p.cols(), 4);
  // Patch 1 is the top-right 2x2 block.
  EXPECT_EQ(p.row(1), (RowVec(4) << 2, 3, 6, 7).finished());
}

TEST(Patchify, ConstantImageGivesIdenticalPatches) {
  const Mat p = patchify(Mat::Constant(8, 12, 0.25), 4);
  for (Eigen::Index r = 1; r < p.rows(); ++r) EXPECT_EQ(p.row(r), p.row(0));
}

TEST(Patchify, RoundTripIsBitExact) {
  Rng rng(1);
  const Mat img = test::random_image(rng, 8, 8);
  EXPECT_EQ(unpatchify(patchify(img, 4), 8, 8, 4), img);
}

TEST(Patchify, IndivisibleSizeThrows) {
  test::expect_error([] { patchify(Mat::Zero(6, 8), 4); }, "vit.shape");
}

TEST(BackboneConfig, ValidationListsEveryProblem) {
  BackboneConfig c;
  c.embed_dim = 10;
  c.heads = 3;
  c.image_height = 60;
  const auto msg = test::expect_error([&] { c.validate(); }, "config.invalid");
  EXPECT_NE(msg.find("heads"), std::string::npos);
  EXPECT_NE(msg.find("patch"), std::string::npos);
}

TEST(Encode, ShapeIsBatchTimesSequence) {
  Rng rng(2);
  const VisionTransformer vit(tiny_backbone(), rng);
  const std::vector<Image> imgs = {test::random_image(rng, 8, 8), test::random_image(rng, 8, 8)};
  const TokenSequence t = vit.encode(imgs);
  EXPECT_EQ(t.batch, 2);
  EXPECT_EQ(t.length, 5);
  EXPECT_EQ(t.tokens.rows(), 10);
  EXPECT_EQ(t.tokens.cols(), 16);
  EXPECT_TRUE(t.tokens.allFinite());
}

TEST(Encode, ZeroResidualBranchesLeaveEmbeddingPlusPosition) {
  Rng rng(3);
  VisionTransformer vit(tiny_backbone(), rng);
  for (auto& b : vit.blocks) {
    b.attn.proj.weight.value.setZero();
    b.attn.proj.bias.value.setZero();
    b.mlp.fc2.weight.value.setZero();
    b.mlp.fc2.bias.value.setZero();
  }
  for (Eigen::Index i = 0; i < vit.norm.gamma.value.size(); ++i) {
    vit.norm.gamma.value(0, i) = 1.0 + 0.1 * i;
    vit.norm.beta.value(0, i) = 0.01 * i;
  }
  const Image img = test::random_image(rng, 8, 8);
  const TokenSequence t = vit.encode({img});

  // Oracle: embed by hand, then the final layer norm written out directly.
  const Mat patches = patchify(img, 4);
  Mat x(5, 16);
  x.row(0) = vit.cls_token.value.row(0) + vit.pos_embed.value.row(0);
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 16; ++k) {
      double s = vit.patch_embed.bias.value(0, k);
      for (int j = 0; j < 16; ++j) s += patches(i, j) * vit.patch_embed.weight.value(k, j);
      x(i + 1, k) = s + vit.pos_embed.value(i + 1, k);
    }
  }
  for (int r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (int k = 0; k < 16; ++k) mean += x(r, k) / 16.0;
    for (int k = 0; k < 16; ++k) var += (x(r, k) - mean) * (x(r, k) - mean) / 16.0;
    for (int k = 0; k < 16; ++k) {
      const double expect = (x(r, k) - mean) / std::sqrt(var + 1e-6) * vit.norm.gamma.value(0, k) + vit.norm.beta.value(0, k);
      EXPECT_NEAR(t.tokens(r, k), expect, 1e-12);
    }
  }
}

TEST(Encode, IdenticalImagesGiveIdenticalTokens) {
  Rng rng(4);
  const VisionTransformer vit(tiny_backbone(), rng);
  const Image img = test::random_image(rng, 8, 8);
  const TokenSequence t = vit.encode({img, img});
  EXPECT_EQ(t.image_tokens(0), t.image_tokens(1));
}

TEST(Encode, PixelPerturbationChangeIsNonzeroAndLinear) {
  Rng rng(5);
  const VisionTransformer vit(tiny_backbone(), rng);
  const Image img = test::random_image(rng, 8, 8);
  const Mat base = vit.encode({img}).tokens;
  auto delta = [&](double eps) {
    Image p = img;
    p(3, 5) += eps;
    return (vit.encode({p}).tokens - base).norm();
  };
  const double d1 = delta(1e-4);
  const double d2 = delta(2e-4);
  EXPECT_GT(d1, 0.0);
  // Bounded: a first-order change doubles with the step.
  EXPECT_NEAR(d2 / d1, 2.0, 1e-3);
}

TEST(Encode, BatchPermutationPermutesOutputs) {
  Rng rng(6);
  const VisionTransformer vit(tiny_backbone(), rng);
  std::vector<Image> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(test::random_image(rng, 8, 8));
  const TokenSequence a = vit.encode(imgs);
  const TokenSequence b = vit.encode({imgs[2], imgs[0], imgs[1]});
  EXPECT_EQ(b.image_tokens(0), a.image_tokens(2));
  EXPECT_EQ(b.image_tokens(1), a.image_tokens(0));
  EXPECT_EQ(b.image_tokens(2), a.image_tokens(1));
}

TEST(Encode, LayerCacheHoldsEveryBlock) {
  Rng rng(7);
  const VisionTransformer vit(tiny_backbone(), rng);
  const TokenSequence t = vit.encode({test::random_image(rng, 8, 8)}, true);
  ASSERT_EQ(t.layers.size(), 2u);
  EXPECT_EQ(t.layers[1].rows(), 5);
}

TEST(Encode, WrongImageSizeThrows) {
  Rng rng(8);
  const VisionTransformer vit(tiny_backbone(), rng);
  test::expect_error([&] { vit.encode({Mat::Zero(12, 8)}); }, "vit.shape");
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  VisionTransformer vit(tiny_backbone(), rng);
  const std::vector<Image> imgs = {test::random_image(rng, 8, 8), test::random_image(rng, 8, 8)};
  const Mat weights = test::random_matrix(rng, 10, 16);
  const std::vector<Mat> layer_weights = {test::random_matrix(rng, 10, 16), Mat()};
  auto loss = [&] {
    const TokenSequence t = vit.encode(imgs, true);
    return (t.tokens.array() * weights.array()).sum() + (t.layers[0].array() * layer_weights[0].array()).sum();
  };
  ParamList params;
  vit.collect("", params);
  zero_grads(params);
  VisionTransformer::Cache cache;
  vit.encode(imgs, true, &cache);
  vit.backward(cache, weights, layer_weights);
  const auto r = test::check_gradients(params, loss, rng);
  EXPECT_LT(r.worst, 1e-4) << r.where;
  EXPECT_GE(r.checked, 20u);
}

}  // namespace
}  // namespace dicom

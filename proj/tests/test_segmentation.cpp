#include "dicom/data/synthetic.hpp"
#include "dicom/segmentation.hpp"
#include "support.hpp"

namespace dicom {
namespace {

SegMask square(int size, int top, int left, int side) {
  SegMask m = SegMask::Zero(size, size);
  m.block(top, left, side, side).setOnes();
  return m;
}

// All-pairs boundary distances, 95th percentile with linear interpolation
// between order statistics, max over both directions.
double hd95_oracle(const SegMask& a, const SegMask& b) {
  auto boundary = [](const SegMask& m) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.rows(); ++y) {
      for (int x = 0; x < m.cols(); ++x) {
        if (m(y, x) != 1) continue;
        const bool edge = y == 0 || x == 0 || y == m.rows() - 1 || x == m.cols() - 1 || m(y - 1, x) != 1 ||
                          m(y + 1, x) != 1 || m(y, x - 1) != 1 || m(y, x + 1) != 1;
        if (edge) out.emplace_back(y, x);
      }
    }
    return out;
  };
  auto directed = [](const auto& from, const auto& to) {
    std::vector<double> d;
    for (auto [y, x] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [v, u] : to) best = std::min(best, std::hypot(double(y - v), double(x - u)));
      d.push_back(best);
    }
    std::sort(d.begin(), d.end());
    const double pos = 0.95 * static_cast<double>(d.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, d.size() - 1);
    return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
  };
  const auto ba = boundary(a), bb = boundary(b);
  return std::max(directed(ba, bb), directed(bb, ba));
}

TEST(Dice, Examples) {
  const SegMask full = SegMask::Ones(8, 8);
  SegMask left = SegMask::Zero(8, 8);
  left.leftCols(4).setOnes();
  EXPECT_EQ(dice(full, full, 1), 1.0);
  EXPECT_EQ(dice(square(8, 0, 0, 2), square(8, 5, 5, 2), 1), 0.0);
  EXPECT_EQ(dice(left, full, 1), (2.0 * 0.5) / (0.5 + 1.0));
  EXPECT_EQ(dice(left, full, 1), dice(full, left, 1));
  EXPECT_EQ(dice(SegMask::Zero(4, 4), SegMask::Zero(4, 4), 1), 1.0);
}

TEST(Hd95, Examples) {
  const SegMask sq = square(20, 3, 3, 10);
  EXPECT_EQ(hd95(sq, sq, 1), 0.0);
  SegMask a = SegMask::Zero(12, 12), b = SegMask::Zero(12, 12);
  a(2, 1) = 1;
  b(2, 6) = 1;
  EXPECT_EQ(hd95(a, b, 1), 5.0);
  const SegMask shifted = square(20, 3, 6, 10);
  EXPECT_NEAR(hd95(sq, shifted, 1), hd95_oracle(sq, shifted), 1e-12);
  test::expect_error([&] { hd95(sq, SegMask::Zero(20, 20), 1); }, "metrics.undefined");
}

TEST(Hd95, RandomMasksMatchBruteForceAndAreSymmetric) {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    SegMask a = SegMask::Zero(16, 16), b = SegMask::Zero(16, 16);
    for (int k = 0; k < 3; ++k) {
      a.block(rng() % 10, rng() % 10, 1 + rng() % 6, 1 + rng() % 6).setOnes();
      b.block(rng() % 10, rng() % 10, 1 + rng() % 6, 1 + rng() % 6).setOnes();
    }
    const double h = hd95(a, b, 1);
    EXPECT_NEAR(h, hd95_oracle(a, b), 1e-12);
    EXPECT_EQ(h, hd95(b, a, 1));
    EXPECT_GE(h, 0.0);
    const double d = dice(a, b, 1);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

RunConfig seg_config() {
  RunConfig cfg = test::tiny_config();
  cfg.backbone.image_height = cfg.backbone.image_width = 16;
  return cfg;
}

TEST(UnetrForward, DefaultGeometryGivesFullResolutionScores) {
  RunConfig cfg;
  cfg.backbone.embed_dim = 24;
  cfg.backbone.heads = 2;
  cfg.backbone.depth = 4;
  cfg.segment.skip_layers = {1, 2, 3, 4};
  cfg.segment.channels = {8, 6, 4};
  cfg.validate();
  Rng rng(2);
  const SegmentationModel model(VisionTransformer(cfg.backbone, rng), cfg.segment, cfg.resolved_skip_layers(), rng);
  const Mat out = model.forward({test::random_image(rng, 64, 64)});
  EXPECT_EQ(out.rows(), 64 * 64);
  EXPECT_EQ(out.cols(), 2);
  EXPECT_TRUE(out.allFinite());
  const auto pred = model.predict({test::random_image(rng, 64, 64)});
  EXPECT_EQ(pred[0].rows(), 64);
  EXPECT_LE(pred[0].maxCoeff(), 1);
}

TEST(UnetrForward, BatchPermutationPermutesOutputs) {
  const RunConfig cfg = seg_config();
  Rng rng(3);
  const SegmentationModel model(VisionTransformer(cfg.backbone, rng), cfg.segment, cfg.resolved_skip_layers(), rng);
  const std::vector<Image> imgs = {test::random_image(rng, 16, 16), test::random_image(rng, 16, 16),
                                   test::random_image(rng, 16, 16)};
  const Mat a = model.forward(imgs);
  const Mat b = model.forward({imgs[1], imgs[2], imgs[0]});
  const int px = 256;
  EXPECT_EQ(b.middleRows(0, px), a.middleRows(px, px));
  EXPECT_EQ(b.middleRows(px, px), a.middleRows(2 * px, px));
  EXPECT_EQ(b.middleRows(2 * px, px), a.middleRows(0, px));
}

TEST(UnetrForward, WrongImageSizeThrows) {
  const RunConfig cfg = seg_config();
  Rng rng(4);
  const SegmentationModel model(VisionTransformer(cfg.backbone, rng), cfg.segment, cfg.resolved_skip_layers(), rng);
  EXPECT_THROW(model.forward({test::random_image(rng, 8, 8)}), Error);
}

TEST(SegConfig, TapsMustIncreaseAndMatchPatchPower) {
  RunConfig cfg = seg_config();
  cfg.segment.skip_layers = {2, 1};
  test::expect_error([&] { cfg.validate(); }, "config.invalid");
  cfg.segment.skip_layers = {1, 2};
  cfg.backbone.patch_size = 8;
  cfg.backbone.image_height = cfg.backbone.image_width = 16;
  cfg.segment.channels = {4};
  EXPECT_NO_THROW(cfg.validate());
  cfg.backbone.patch_size = 4;
  cfg.backbone.depth = 3;
  cfg.segment.skip_layers = {1, 2, 3};
  cfg.segment.channels = {4, 4};
  EXPECT_NO_THROW(cfg.validate());
  cfg.backbone.patch_size = 8;
  cfg.backbone.image_height = cfg.backbone.image_width = 24;
  cfg.segment.skip_layers = {1, 2, 3};
  const std::string msg = test::expect_error([&] { cfg.validate(); }, "config.invalid");
  EXPECT_NE(msg.find("upsampling factor"), std::string::npos);
  EXPECT_EQ(upsample_factor(8, 3), 2);
  EXPECT_EQ(upsample_factor(8, 2), 0);
  EXPECT_EQ(upsample_factor(16, 2), 4);
}

TEST(SegmentationLoss, PerfectLogitsApproachZero) {
  std::vector<SegMask> truth = {square(4, 1, 1, 2)};
  Mat logits(16, 2);
  for (int i = 0; i < 16; ++i) {
    const int c = truth[0](i / 4, i % 4);
    logits(i, c) = 30.0;
    logits(i, 1 - c) = -30.0;
  }
  EXPECT_LT(segmentation_loss(logits, truth, 2), 1e-9);
  Mat swapped = -logits;
  EXPECT_GT(segmentation_loss(swapped, truth, 2), 10.0);
  std::vector<SegMask> bad = {SegMask::Constant(4, 4, 5)};
  test::expect_error([&] { segmentation_loss(logits, bad, 2); }, "seg.label");
}

TEST(EvaluateSegmentation, AveragesForegroundClasses) {
  const std::vector<SegMask> truth = {square(20, 3, 3, 10), square(20, 3, 3, 10)};
  const std::vector<SegMask> pred = {square(20, 3, 3, 10), SegMask::Zero(20, 20)};
  const SegMetrics m = evaluate_segmentation(pred, truth, 2);
  EXPECT_EQ(m.dice, 0.5);
  EXPECT_EQ(m.count, 2u);
  EXPECT_EQ(*m.hd95, 0.0);
  EXPECT_EQ(m.hd95_undefined, 1u);
  const auto j = to_json(m);
  EXPECT_EQ(j.at("Dice").get<double>(), 0.5);
}

TEST(TrainSegmentation, ShortRunProducesReport) {
  test::TempDir dir;
  generate_synthetic({2, 7, 16, 16, 3, 4}, dir / "data");
  LoadOptions o;
  o.height = o.width = 16;
  o.patch_size = 4;
  o.load_masks = true;
  const Dataset data = load_dataset(dir / "data/manifest.csv", o);
  RunConfig cfg = seg_config();
  cfg.segment.epochs = 2;
  Rng rng(5);
  const SegReport r = train_segmentation(VisionTransformer(cfg.backbone, rng), data, cfg);
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.test.count, data.indices(Split::kTest).size());
  EXPECT_GE(r.test.dice, 0.0);
  EXPECT_LE(r.test.dice, 1.0);
  EXPECT_EQ(to_json(r).at("mode"), "segment");

  o.load_masks = false;
  const Dataset no_masks = load_dataset(dir / "data/manifest.csv", o);
  test::expect_error([&] { train_segmentation(VisionTransformer(cfg.backbone, rng), no_masks, cfg); },
                     "seg.missing_mask");
}

}  // namespace
}  // namespace dicom

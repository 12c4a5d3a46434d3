#include "dicom/corruption.hpp"
#include "support.hpp"

#include <queue>

namespace dicom {
namespace {

// Sizes of the 4-connected components of masked tokens, by BFS.
std::vector<int> component_sizes(const TokenMask& mask, int rows, int cols) {
  std::vector<int> sizes;
  std::vector<bool> seen(mask.size(), false);
  for (int start = 0; start < rows * cols; ++start) {
    if (!mask[start] || seen[start]) continue;
    int size = 0;
    std::queue<int> q;
    q.push(start);
    seen[start] = true;
    while (!q.empty()) {
      const int t = q.front();
      q.pop();
      ++size;
      const int r = t / cols, c = t % cols;
      const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[0] >= rows || n[1] < 0 || n[1] >= cols) continue;
        const int k = n[0] * cols + n[1];
        if (mask[k] && !seen[k]) {
          seen[k] = true;
          q.push(k);
        }
      }
    }
    sizes.push_back(size);
  }
  return sizes;
}

TEST(GroupMask, RatioZeroMasksNothing) {
  Rng rng(1);
  const TokenMask m = sample_group_mask(8, 8, {0.0, 3.0}, rng);
  EXPECT_EQ(std::count(m.begin(), m.end(), 1), 0);
}

TEST(GroupMask, RatioOneMasksEverything) {
  Rng rng(2);
  const TokenMask m = sample_group_mask(8, 8, {1.0, 3.0}, rng);
  EXPECT_EQ(std::count(m.begin(), m.end(), 1), 64);
}

TEST(GroupMask, RatioOutsideUnitIntervalThrows) {
  Rng rng(3);
  test::expect_error([&] { sample_group_mask(8, 8, {1.3, 3.0}, rng); }, "corruption.ratio");
  test::expect_error([&] { sample_group_mask(8, 8, {-0.1, 3.0}, rng); }, "corruption.ratio");
}

TEST(GroupMask, CountIsFirstIntegerAtOrAboveRatio) {
  Rng rng(4);
  for (double ratio : {0.1, 0.33, 0.5, 0.7, 0.95}) {
    for (int i = 0; i < 20; ++i) {
      const TokenMask m = sample_group_mask(8, 8, {ratio, 3.0}, rng);
      EXPECT_EQ(std::count(m.begin(), m.end(), 1), static_cast<long>(std::ceil(ratio * 64 - 1e-9)));
      EXPECT_NEAR(masked_fraction(m), ratio, 0.05);
    }
  }
}

TEST(GroupMask, SameGeneratorStateGivesSameMask) {
  Rng a(5), b(5);
  EXPECT_EQ(sample_group_mask(8, 8, {}, a), sample_group_mask(8, 8, {}, b));
}

TEST(GroupMask, StatisticsOverThousandSamples) {
  Rng rng(6);
  const int rows = 8, cols = 8, n = rows * cols, samples = 1000;
  std::vector<int> freq(n, 0);
  double fraction = 0.0;
  long masked = 0, in_groups = 0;
  for (int s = 0; s < samples; ++s) {
    const TokenMask m = sample_group_mask(rows, cols, {0.7, 3.0}, rng);
    fraction += masked_fraction(m) / samples;
    for (int t = 0; t < n; ++t) freq[t] += m[t];
    for (int size : component_sizes(m, rows, cols)) {
      EXPECT_GE(size, 1);
      masked += size;
      if (size >= 2) in_groups += size;
    }
  }
  EXPECT_NEAR(fraction, 0.70, 0.05);
  EXPECT_GE(static_cast<double>(in_groups) / masked, 0.90);
  const double sigma = std::sqrt(samples * fraction * (1.0 - fraction));
  for (int t = 0; t < n; ++t) EXPECT_NEAR(freq[t], samples * fraction, 3.0 * sigma) << "token " << t;
}

ImageBatch random_batch(Rng& rng, int count, int h, int w) {
  ImageBatch b;
  for (int i = 0; i < count; ++i) {
    b.images.push_back(test::random_image(rng, h, w));
    b.labels.push_back(0);
    b.ids.push_back("i" + std::to_string(i));
  }
  return b;
}

TEST(ApplyMask, EmptyMaskLeavesImagesUntouched) {
  Rng rng(7);
  const ImageBatch b = random_batch(rng, 2, 16, 16);
  const MaskPair mp = apply_mask(b, {TokenMask(16, 0), TokenMask(16, 0)}, 4);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(mp.corrupted.images[i], b.images[i]);
    EXPECT_EQ(mp.pixel_masks[i].sum(), 0.0);
  }
  EXPECT_EQ(mp.corrupted.ids, b.ids);
}

TEST(ApplyMask, FullMaskZeroesEverything) {
  Rng rng(8);
  const ImageBatch b = random_batch(rng, 1, 16, 16);
  const MaskPair mp = apply_mask(b, {TokenMask(16, 1)}, 4);
  EXPECT_EQ(mp.corrupted.images[0], Mat::Zero(16, 16));
}

TEST(ApplyMask, SingleTokenZeroesItsBlockOnly) {
  Rng rng(9);
  const int p = 4;
  const ImageBatch b = random_batch(rng, 1, 16, 16);
  for (int token = 0; token < 16; ++token) {
    TokenMask t(16, 0);
    t[token] = 1;
    const MaskPair mp = apply_mask(b, {t}, p);
    const int r0 = (token / 4) * p, c0 = (token % 4) * p;
    int zeroed = 0;
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        const bool inside = i >= r0 && i < r0 + p && j >= c0 && j < c0 + p;
        EXPECT_EQ(mp.pixel_masks[0](i, j), inside ? 1.0 : 0.0);
        EXPECT_EQ(mp.corrupted.images[0](i, j), inside ? 0.0 : b.images[0](i, j));
        zeroed += inside;
      }
    }
    EXPECT_EQ(zeroed, p * p);
  }
}

TEST(ApplyMask, PixelMaskIsDilationOfSampledTokenMask) {
  Rng rng(10);
  const ImageBatch b = random_batch(rng, 3, 32, 32);
  std::vector<TokenMask> masks;
  for (int i = 0; i < 3; ++i) masks.push_back(sample_group_mask(4, 4, {0.7, 3.0}, rng));
  const MaskPair mp = apply_mask(b, masks, 8);
  for (int i = 0; i < 3; ++i) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const bool m = masks[i][(y / 8) * 4 + x / 8];
        EXPECT_EQ(mp.pixel_masks[i](y, x), m ? 1.0 : 0.0);
        EXPECT_EQ(mp.corrupted.images[i](y, x), m ? 0.0 : b.images[i](y, x));
      }
    }
    EXPECT_EQ(mp.token_masks[i], masks[i]);
  }
}

TEST(ApplyMask, GeometryMismatchThrows) {
  Rng rng(11);
  const ImageBatch b = random_batch(rng, 1, 16, 16);
  test::expect_error([&] { apply_mask(b, {TokenMask(15, 0)}, 4); }, "corruption.shape");
  test::expect_error([&] { apply_mask(b, {}, 4); }, "corruption.shape");
}

}  // namespace
}  // namespace dicom

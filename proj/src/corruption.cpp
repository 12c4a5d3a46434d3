#include "dicom/corruption.hpp"

#include "dicom/error.hpp"

#include <algorithm>
#include <cmath>

namespace dicom {
namespace {

int geometric_side(double mean, Rng& rng) {
  if (mean <= 1.0) return 1;
  std::geometric_distribution<int> dist(1.0 / mean);
  return 1 + dist(rng);
}

}  // namespace

TokenMask sample_group_mask(int grid_rows, int grid_cols, const MaskConfig& config, Rng& rng) {
  if (!(config.ratio >= 0.0 && config.ratio <= 1.0)) {
    throw Error("corruption.ratio", "mask ratio must lie in [0,1], got " + std::to_string(config.ratio));
  }
  if (grid_rows <= 0 || grid_cols <= 0) throw Error("corruption.shape", "empty patch grid");
  const int n = grid_rows * grid_cols;
  const int target = std::min(n, static_cast<int>(std::ceil(config.ratio * n - 1e-9)));
  TokenMask mask(n, 0);
  int masked = 0;
  std::vector<int> unmasked;
  std::vector<int> added;
  while (masked < target) {
    unmasked.clear();
    for (int i = 0; i < n; ++i) {
      if (!mask[i]) unmasked.push_back(i);
    }
    const int seed = unmasked[rng() % unmasked.size()];
    const int seed_r = seed / grid_cols;
    const int seed_c = seed % grid_cols;
    const int h = std::min(grid_rows, geometric_side(config.mean_block_side, rng));
    const int w = std::min(grid_cols, geometric_side(config.mean_block_side, rng));
    const int top = seed_r - static_cast<int>(rng() % static_cast<unsigned>(h));
    const int left = seed_c - static_cast<int>(rng() % static_cast<unsigned>(w));

    // Blocks wrap around the grid edges instead of being clipped there;
    // clipping leaves border and corner tokens under-masked.
    added.clear();
    for (int i = 0; i < h; ++i) {
      const int r = ((top + i) % grid_rows + grid_rows) % grid_rows;
      for (int j = 0; j < w; ++j) {
        const int c = ((left + j) % grid_cols + grid_cols) % grid_cols;
        const int idx = r * grid_cols + c;
        if (!mask[idx]) {
          mask[idx] = 1;
          added.push_back(idx);
        }
      }
    }
    masked += static_cast<int>(added.size());
    while (masked > target) {
      const std::size_t k = rng() % added.size();
      mask[added[k]] = 0;
      added.erase(added.begin() + static_cast<std::ptrdiff_t>(k));
      --masked;
    }
  }
  return mask;
}

Mat expand_token_mask(const TokenMask& mask, int height, int width, int p) {
  const int gc = width / p;
  if (p <= 0 || height % p != 0 || width % p != 0 || static_cast<int>(mask.size()) != (height / p) * gc) {
    throw Error("corruption.shape", "token mask of length " + std::to_string(mask.size()) +
                                        " does not match a " + std::to_string(height) + "x" + std::to_string(width) +
                                        " image with patch size " + std::to_string(p));
  }
  Mat m = Mat::Zero(height, width);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) m.block((static_cast<int>(i) / gc) * p, (static_cast<int>(i) % gc) * p, p, p).setOnes();
  }
  return m;
}

MaskPair apply_mask(const ImageBatch& batch, const std::vector<TokenMask>& token_masks, int patch_size) {
  if (token_masks.size() != batch.size()) throw Error("corruption.shape", "one token mask per image required");
  MaskPair out;
  out.token_masks = token_masks;
  out.corrupted = batch;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image& img = batch.images[i];
    Mat m = expand_token_mask(token_masks[i], static_cast<int>(img.rows()), static_cast<int>(img.cols()), patch_size);
    out.corrupted.images[i] = img.array() * (1.0 - m.array());
    out.pixel_masks.push_back(std::move(m));
  }
  return out;
}

double masked_fraction(const TokenMask& mask) {
  if (mask.empty()) return 0.0;
  return static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
}

}  // namespace dicom

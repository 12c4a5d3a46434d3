#pragma once

#include "dicom/data/image.hpp"
#include "dicom/rng.hpp"

#include <cstdint>
#include <vector>

namespace dicom {

// One entry per patch in row-major grid order; 1 = masked.
using TokenMask = std::vector<std::uint8_t>;

struct MaskConfig {
  double ratio = 0.70;
  double mean_block_side = 3.0;
};

// Grows random rectangular blocks of patches (geometric side lengths with the
// configured mean, each block containing a uniformly drawn unmasked seed
// patch, wrapping around the grid edges) until ceil(ratio * n) patches are
// masked. The final block is trimmed token-by-token back to that count.
TokenMask sample_group_mask(int grid_rows, int grid_cols, const MaskConfig& config, Rng& rng);

// Corrupted view of a batch: masked patches replaced with zeros.
struct MaskPair {
  std::vector<TokenMask> token_masks;  // per image, length n
  std::vector<Mat> pixel_masks;        // per image, H x W of 0/1
  ImageBatch corrupted;
};

// Expands each token mask to pixel space by patch geometry and zeroes the
// masked pixels.
MaskPair apply_mask(const ImageBatch& batch, const std::vector<TokenMask>& token_masks, int patch_size);

Mat expand_token_mask(const TokenMask& mask, int height, int width, int patch_size);

double masked_fraction(const TokenMask& mask);

}  // namespace dicom

#pragma once

#include "dicom/data/image.hpp"
#include "dicom/nn/layers.hpp"

#include <vector>

namespace dicom {

struct BackboneConfig {
  int patch_size = 8;
  int embed_dim = 192;
  int depth = 6;
  int heads = 3;
  double mlp_ratio = 4.0;
  int image_height = 64;
  int image_width = 64;

  int grid_rows() const { return image_height / patch_size; }
  int grid_cols() const { return image_width / patch_size; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int sequence_length() const { return num_patches() + 1; }

  // Throws config.invalid listing every violated constraint.
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

// Rows are patches in row-major grid order, columns the p*p pixels of each
// patch in row-major order.
Mat patchify(const Image& image, int patch_size);
Image unpatchify(const Mat& patches, int height, int width, int patch_size);

// Encoder output for a batch: N*(n+1) rows of width d, each image's class
// token first followed by its n data tokens.
struct TokenSequence {
  Mat tokens;
  int batch = 0;
  int length = 0;
  // Residual-stream output of every block, same layout as tokens; filled only
  // when requested.
  std::vector<Mat> layers;

  auto image_tokens(int b) const { return tokens.middleRows(static_cast<Eigen::Index>(b) * length, length); }
  RowVec class_token(int b) const { return tokens.row(static_cast<Eigen::Index>(b) * length); }
  Mat class_tokens() const;
  Mat data_tokens() const;  // N*n rows
};

class VisionTransformer {
 public:
  // Images are encoded one at a time so each output row is bit-identical
  // whatever its batch position.
  struct ImageCache {
    Mat patches;
    std::vector<nn::Block::Cache> blocks;
    nn::LayerNorm::Cache norm;
  };
  struct Cache {
    std::vector<ImageCache> images;
  };

  VisionTransformer() = default;
  VisionTransformer(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const { return config_; }

  TokenSequence encode(const std::vector<Image>& images, bool cache_layers = false, Cache* cache = nullptr) const;

  // Backpropagates dL/d(final tokens) plus optional gradients w.r.t. block
  // outputs (one entry per block, empty matrices skipped).
  void backward(const Cache& cache, const Mat& dtokens, const std::vector<Mat>& dlayers = {});

  void collect(const std::string& prefix, ParamList& out);

  nn::Linear patch_embed;
  Param cls_token;
  Param pos_embed;
  std::vector<nn::Block> blocks;
  nn::LayerNorm norm;

 private:
  Mat encode_one(const Image& image, std::vector<Mat>* layers, ImageCache* cache) const;
  void backward_one(const ImageCache& cache, const Mat& dtokens, const std::vector<Mat>& dlayers, Eigen::Index row0);

  BackboneConfig config_;
};

}  // namespace dicom

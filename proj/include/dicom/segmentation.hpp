#pragma once

#include "dicom/config.hpp"
#include "dicom/data/dataset.hpp"
#include "dicom/nn/vit.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace dicom {

using SegMask = Eigen::MatrixXi;

double dice(const SegMask& pred, const SegMask& truth, int cls);

// Pixels of `cls` with a 4-neighbour outside the class (or outside the image).
std::vector<std::pair<int, int>> boundary_pixels(const SegMask& mask, int cls);

// Larger of the two directed 95th-percentile boundary distances (linear
// interpolation between order statistics). Throws metrics.undefined when
// either mask lacks the class.
double hd95(const SegMask& pred, const SegMask& truth, int cls);

// Feature map batch: one row per pixel ordered (image, y, x), one column per
// channel.
struct FeatureMap {
  Mat data;
  int batch = 0;
  int height = 0;
  int width = 0;
};

// Transposed convolution with kernel = stride = factor: every input pixel
// writes its own factor x factor output block.
class Upsample {
 public:
  Upsample() = default;
  Upsample(int in, int out, int factor, Rng& rng);

  FeatureMap forward(const FeatureMap& x) const;
  FeatureMap backward(const FeatureMap& x, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  nn::Linear kernel;  // in -> factor*factor*out, no bias
  Param bias;         // 1 x out

 private:
  int factor_ = 1;
  int out_ = 0;
};

// 3x3 convolution, zero padding 1, via im2col.
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(int in, int out, Rng& rng);

  Mat im2col(const FeatureMap& x) const;
  FeatureMap forward(const FeatureMap& x, Mat* cols = nullptr) const;
  // cols is the im2col matrix saved by forward.
  Mat backward(const FeatureMap& x, const Mat& cols, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  nn::Linear linear;  // 9*in -> out
};

// Decoder over encoder block outputs. The deepest tap is projected to
// channels[0]; each later stage upsamples the running map, merges it with a
// shallower tap upsampled to the same size, and applies conv3x3 + ReLU. A
// per-pixel linear layer on [features | input image] yields class scores.
class UnetrDecoder {
 public:
  struct Stage {
    FeatureMap up_in;
    FeatureMap skip_in;
    FeatureMap merged;
    Mat cols;
    Mat pre;
  };
  struct Cache {
    FeatureMap bottleneck_in;
    std::vector<Stage> stages;
    Mat head_in;
  };

  UnetrDecoder() = default;
  UnetrDecoder(const BackboneConfig& backbone, const SegmentConfig& config, std::vector<int> taps, Rng& rng);

  // tokens must carry per-block outputs. Returns N*H*W x classes logits.
  Mat forward(const TokenSequence& tokens, const std::vector<Image>& images, Cache* cache = nullptr) const;
  // Returns gradients w.r.t. every block output (empty where untapped).
  std::vector<Mat> backward(const Cache& cache, const Mat& dlogits);
  void collect(const std::string& prefix, ParamList& out);

  const std::vector<int>& taps() const { return taps_; }
  int factor() const { return factor_; }

  nn::Linear bottleneck;
  std::vector<Upsample> ups;
  std::vector<Upsample> skips;
  std::vector<Conv3x3> convs;
  nn::Linear head;

 private:
  BackboneConfig backbone_;
  std::vector<int> taps_;
  int factor_ = 2;
};

class SegmentationModel {
 public:
  struct Cache {
    VisionTransformer::Cache backbone;
    UnetrDecoder::Cache decoder;
  };

  SegmentationModel(VisionTransformer backbone, const SegmentConfig& config, std::vector<int> taps, Rng& rng);

  Mat forward(const std::vector<Image>& images, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const Mat& dlogits);
  // Backbone parameters first, prefixed "backbone.", then "decoder.".
  ParamList params();
  std::size_t backbone_param_count();

  std::vector<SegMask> predict(const std::vector<Image>& images) const;

  VisionTransformer backbone;
  UnetrDecoder decoder;
};

// Mean pixelwise cross-entropy plus soft-Dice loss (1 - mean class soft
// Dice over the batch), equally weighted.
double segmentation_loss(const Mat& logits, const std::vector<SegMask>& truth, int classes, Mat* dlogits = nullptr);

struct SegMetrics {
  double dice = 0.0;                 // mean over images and foreground classes
  std::optional<double> hd95;        // mean over defined (image, class) pairs
  std::size_t hd95_undefined = 0;
  std::size_t count = 0;
};

struct SegEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<SegMetrics> val;
};

struct SegReport {
  int classes = 2;
  std::vector<int> taps;
  std::vector<SegEpoch> epochs;
  SegMetrics test;
  std::string config_fingerprint;
};

nlohmann::json to_json(const SegMetrics& m);
nlohmann::json to_json(const SegReport& r);

SegMetrics evaluate_segmentation(const std::vector<SegMask>& pred, const std::vector<SegMask>& truth, int classes);

// Trains backbone + decoder on the dataset masks (train split) and reports
// validation metrics per epoch and test metrics at the end.
SegReport train_segmentation(VisionTransformer backbone, const Dataset& data, const RunConfig& config);

}  // namespace dicom

#pragma once

#include "dicom/nn/layers.hpp"
#include "dicom/nn/vit.hpp"

namespace dicom {

struct HeadConfig {
  int K = 8192;
  int bottleneck = 256;
  int hidden = 2048;

  bool operator==(const HeadConfig&) const = default;
};

// Three fully connected layers (in -> hidden -> hidden -> out) with GeLU
// between them.
class ThreeLayerMlp {
 public:
  struct Cache {
    Mat x, pre1, act1, pre2, act2;
  };

  ThreeLayerMlp() = default;
  ThreeLayerMlp(int in, int hidden, int out, Rng& rng);

  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  nn::Linear fc1, fc2, fc3;
};

// Shared projection head: MLP -> l2 normalisation -> weight-normalised
// linear layer (unit-norm rows, no bias) producing K logits. Every token row
// goes through the same parameters, so |logit| <= 1.
class ProjectionHead {
 public:
  struct Cache {
    ThreeLayerMlp::Cache mlp;
    Mat bottleneck;  // pre-normalisation
    Vec norms;
    Mat unit;
  };

  ProjectionHead() = default;
  ProjectionHead(int embed_dim, const HeadConfig& config, Rng& rng);

  Mat forward(const Mat& tokens, Cache* cache = nullptr) const;
  Mat backward(const Cache& cache, const Mat& dlogits);

  // Unit-norm l2-normalised bottleneck, one row per token.
  Mat bottleneck(const Mat& tokens) const;
  // Normalisation and final layer applied to raw (pre-normalisation)
  // bottleneck rows.
  Mat logits_from_bottleneck(const Mat& raw) const;

  // Re-projects every row of the final layer onto the unit sphere (fixed
  // gain 1). Rows already within 1e-12 of unit norm are left untouched.
  void renormalize();

  void collect(const std::string& prefix, ParamList& out);

  int K() const { return static_cast<int>(last.weight.value.rows()); }

  ThreeLayerMlp mlp;
  nn::Linear last;
};

// Lightweight reconstruction decoder: per data-token MLP to a 256-d code,
// then a stride-p transposed convolution (kernel p x p, one output channel)
// that maps each code to its p x p pixel block.
class ReconstructionDecoder {
 public:
  struct Cache {
    ThreeLayerMlp::Cache mlp;
    Mat codes;
    int batch = 0;
  };

  ReconstructionDecoder() = default;
  ReconstructionDecoder(const BackboneConfig& backbone, const HeadConfig& config, Rng& rng);

  // Uses only the data tokens (class token excluded).
  std::vector<Image> reconstruct(const TokenSequence& tokens, Cache* cache = nullptr) const;

  // Returns dL/d(data tokens), N*n rows.
  Mat backward(const Cache& cache, const std::vector<Mat>& dimages);

  void collect(const std::string& prefix, ParamList& out);

  ThreeLayerMlp mlp;
  nn::Linear recover;  // p*p x 256, no bias
  Param recover_bias;  // 1 x 1, shared by every output pixel

 private:
  BackboneConfig backbone_;
};

}  // namespace dicom

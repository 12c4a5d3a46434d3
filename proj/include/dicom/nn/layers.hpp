#pragma once

#include "dicom/rng.hpp"
#include "dicom/tensor.hpp"

#include <string>
#include <vector>

namespace dicom::nn {

// Fully connected layer, y = x W^T + b with W stored out x in. Rows of x are
// independent samples (tokens).
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, bool bias, Rng& rng, double init_std = 0.02);

  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }
  bool has_bias() const { return has_bias_; }

  Mat forward(const Mat& x) const;
  // Accumulates parameter gradients; returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy);
  // Parameter gradients only.
  void accumulate(const Mat& x, const Mat& dy);

  void collect(const std::string& prefix, ParamList& out);

  Param weight;
  Param bias;

 private:
  bool has_bias_ = true;
};

class LayerNorm {
 public:
  struct Cache {
    Mat xhat;
    Vec rstd;
  };

  LayerNorm() = default;
  explicit LayerNorm(int dim, double eps = 1e-6);

  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  Param gamma;
  Param beta;

 private:
  double eps_ = 1e-6;
};

// Exact (erf-based) GeLU.
Mat gelu(const Mat& x);
Mat gelu_backward(const Mat& x, const Mat& dy);

// Row-wise softmax of logits / tau.
Mat softmax_rows(const Mat& logits, double tau = 1.0);

// Multi-head self-attention over `batch` independent sequences of `length`
// rows each, stacked vertically.
class Attention {
 public:
  struct Cache {
    Mat x;
    Mat qkv;
    std::vector<Mat> probs;  // one (length x length) per sequence and head
    Mat context;
  };

  Attention() = default;
  Attention(int dim, int heads, Rng& rng);

  Mat forward(const Mat& x, int length, Cache* cache) const;
  Mat backward(const Cache& cache, int length, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  Linear qkv;
  Linear proj;

 private:
  int heads_ = 1;
};

// MLP with one hidden layer: fc2(gelu(fc1(x))).
class Mlp {
 public:
  struct Cache {
    Mat x;
    Mat pre;
    Mat act;
  };

  Mlp() = default;
  Mlp(int dim, int hidden, Rng& rng);

  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  Linear fc1;
  Linear fc2;
};

// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
class Block {
 public:
  struct Cache {
    LayerNorm::Cache ln1;
    Attention::Cache attn;
    LayerNorm::Cache ln2;
    Mlp::Cache mlp;
  };

  Block() = default;
  Block(int dim, int heads, double mlp_ratio, Rng& rng);

  Mat forward(const Mat& x, int length, Cache* cache) const;
  Mat backward(const Cache& cache, int length, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);

  LayerNorm ln1;
  Attention attn;
  LayerNorm ln2;
  Mlp mlp;
};

}  // namespace dicom::nn

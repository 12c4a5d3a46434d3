#include "dicom/heads.hpp"

#include "dicom/error.hpp"

#include <cmath>

namespace dicom {

ThreeLayerMlp::ThreeLayerMlp(int in, int hidden, int out, Rng& rng)
    : fc1(in, hidden, true, rng), fc2(hidden, hidden, true, rng), fc3(hidden, out, true, rng) {}

Mat ThreeLayerMlp::forward(const Mat& x, Cache* cache) const {
  Mat pre1 = fc1.forward(x);
  Mat act1 = nn::gelu(pre1);
  Mat pre2 = fc2.forward(act1);
  Mat act2 = nn::gelu(pre2);
  Mat y = fc3.forward(act2);
  if (cache) {
    cache->x = x;
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->pre2 = std::move(pre2);
    cache->act2 = std::move(act2);
  }
  return y;
}

Mat ThreeLayerMlp::backward(const Cache& cache, const Mat& dy) {
  Mat d = fc3.backward(cache.act2, dy);
  d = fc2.backward(cache.act1, nn::gelu_backward(cache.pre2, d));
  return fc1.backward(cache.x, nn::gelu_backward(cache.pre1, d));
}

void ThreeLayerMlp::collect(const std::string& prefix, ParamList& out) {
  fc1.collect(prefix + "fc1.", out);
  fc2.collect(prefix + "fc2.", out);
  fc3.collect(prefix + "fc3.", out);
}

ProjectionHead::ProjectionHead(int embed_dim, const HeadConfig& config, Rng& rng)
    : mlp(embed_dim, config.hidden, config.bottleneck, rng), last(config.bottleneck, config.K, false, rng) {
  last.weight.decay = false;
  renormalize();
}

Mat ProjectionHead::forward(const Mat& tokens, Cache* cache) const {
  if (tokens.cols() != mlp.fc1.in_features()) {
    throw Error("heads.shape", "projection head expects width " + std::to_string(mlp.fc1.in_features()) + ", got " +
                                   std::to_string(tokens.cols()));
  }
  Mat b = mlp.forward(tokens, cache ? &cache->mlp : nullptr);
  Vec norms = b.rowwise().norm().cwiseMax(1e-12);
  Mat unit = b.array().colwise() / norms.array();
  Mat logits = last.forward(unit);
  if (cache) {
    cache->bottleneck = std::move(b);
    cache->norms = std::move(norms);
    cache->unit = std::move(unit);
  }
  return logits;
}

Mat ProjectionHead::bottleneck(const Mat& tokens) const {
  Mat b = mlp.forward(tokens, nullptr);
  Vec norms = b.rowwise().norm().cwiseMax(1e-12);
  return b.array().colwise() / norms.array();
}

Mat ProjectionHead::logits_from_bottleneck(const Mat& b) const {
  Vec norms = b.rowwise().norm().cwiseMax(1e-12);
  return last.forward((b.array().colwise() / norms.array()).matrix());
}

Mat ProjectionHead::backward(const Cache& cache, const Mat& dlogits) {
  Mat dunit = last.backward(cache.unit, dlogits);
  Vec dots = (dunit.array() * cache.unit.array()).rowwise().sum();
  Mat db = dunit - (cache.unit.array().colwise() * dots.array()).matrix();
  db.array().colwise() /= cache.norms.array();
  return mlp.backward(cache.mlp, db);
}

void ProjectionHead::renormalize() {
  auto& w = last.weight.value;
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double n = w.row(r).norm();
    if (n > 0.0 && std::abs(n - 1.0) > 1e-12) w.row(r) /= n;
  }
}

void ProjectionHead::collect(const std::string& prefix, ParamList& out) {
  mlp.collect(prefix + "mlp.", out);
  last.collect(prefix + "last.", out);
}

ReconstructionDecoder::ReconstructionDecoder(const BackboneConfig& backbone, const HeadConfig& config, Rng& rng)
    : mlp(backbone.embed_dim, config.hidden, config.bottleneck, rng),
      recover(config.bottleneck, backbone.patch_size * backbone.patch_size, false, rng),
      recover_bias(1, 1),
      backbone_(backbone) {}

std::vector<Image> ReconstructionDecoder::reconstruct(const TokenSequence& tokens, Cache* cache) const {
  if (tokens.length != backbone_.sequence_length() || tokens.tokens.cols() != backbone_.embed_dim) {
    throw Error("heads.shape", "token sequence does not match the decoder's backbone geometry");
  }
  const int n = backbone_.num_patches();
  Mat codes = mlp.forward(tokens.data_tokens(), cache ? &cache->mlp : nullptr);
  Mat pixels = recover.forward(codes).array() + recover_bias.value(0, 0);
  std::vector<Image> out;
  out.reserve(tokens.batch);
  for (int b = 0; b < tokens.batch; ++b) {
    out.push_back(unpatchify(pixels.middleRows(static_cast<Eigen::Index>(b) * n, n), backbone_.image_height,
                             backbone_.image_width, backbone_.patch_size));
  }
  if (cache) {
    cache->codes = std::move(codes);
    cache->batch = tokens.batch;
  }
  return out;
}

Mat ReconstructionDecoder::backward(const Cache& cache, const std::vector<Mat>& dimages) {
  const int n = backbone_.num_patches();
  const int p = backbone_.patch_size;
  Mat dpixels(static_cast<Eigen::Index>(cache.batch) * n, p * p);
  for (int b = 0; b < cache.batch; ++b) dpixels.middleRows(static_cast<Eigen::Index>(b) * n, n) = patchify(dimages[b], p);
  recover_bias.grad(0, 0) += dpixels.sum();
  return mlp.backward(cache.mlp, recover.backward(cache.codes, dpixels));
}

void ReconstructionDecoder::collect(const std::string& prefix, ParamList& out) {
  mlp.collect(prefix + "mlp.", out);
  recover.collect(prefix + "recover.", out);
  out.push_back({prefix + "recover_bias", &recover_bias});
}

}  // namespace dicom

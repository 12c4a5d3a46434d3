#include "dicom/nn/vit.hpp"

#include "dicom/error.hpp"

#include <sstream>

namespace dicom {

void BackboneConfig::validate() const {
  std::vector<std::string> problems;
  if (patch_size <= 0) problems.push_back("patch_size must be positive");
  if (patch_size > 0 && (image_height % patch_size != 0 || image_width % patch_size != 0)) {
    problems.push_back("image size must be divisible by patch_size");
  }
  if (embed_dim <= 0) problems.push_back("embed_dim must be positive");
  if (heads <= 0 || (embed_dim > 0 && embed_dim % heads != 0)) problems.push_back("embed_dim must be divisible by heads");
  if (depth <= 0) problems.push_back("depth must be positive");
  if (mlp_ratio <= 0) problems.push_back("mlp_ratio must be positive");
  if (!problems.empty()) {
    std::ostringstream msg;
    msg << "invalid backbone config:";
    for (const auto& p : problems) msg << " " << p << ";";
    throw Error("config.invalid", msg.str());
  }
}

Mat patchify(const Image& image, int p) {
  if (p <= 0 || image.rows() % p != 0 || image.cols() % p != 0) {
    throw Error("vit.shape", "image " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                                 " not divisible by patch size " + std::to_string(p));
  }
  const Eigen::Index gr = image.rows() / p;
  const Eigen::Index gc = image.cols() / p;
  Mat out(gr * gc, p * p);
  for (Eigen::Index i = 0; i < gr; ++i) {
    for (Eigen::Index j = 0; j < gc; ++j) {
      for (int r = 0; r < p; ++r) {
        out.row(i * gc + j).segment(r * p, p) = image.row(i * p + r).segment(j * p, p);
      }
    }
  }
  return out;
}

Image unpatchify(const Mat& patches, int height, int width, int p) {
  const int gr = height / p;
  const int gc = width / p;
  if (patches.rows() != gr * gc || patches.cols() != p * p) throw Error("vit.shape", "patch matrix does not match geometry");
  Image out(height, width);
  for (int i = 0; i < gr; ++i) {
    for (int j = 0; j < gc; ++j) {
      for (int r = 0; r < p; ++r) out.row(i * p + r).segment(j * p, p) = patches.row(i * gc + j).segment(r * p, p);
    }
  }
  return out;
}

Mat TokenSequence::class_tokens() const {
  Mat out(batch, tokens.cols());
  for (int b = 0; b < batch; ++b) out.row(b) = tokens.row(static_cast<Eigen::Index>(b) * length);
  return out;
}

Mat TokenSequence::data_tokens() const {
  const int n = length - 1;
  Mat out(static_cast<Eigen::Index>(batch) * n, tokens.cols());
  for (int b = 0; b < batch; ++b) {
    out.middleRows(static_cast<Eigen::Index>(b) * n, n) = tokens.middleRows(static_cast<Eigen::Index>(b) * length + 1, n);
  }
  return out;
}

VisionTransformer::VisionTransformer(const BackboneConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const int d = config.embed_dim;
  patch_embed = nn::Linear(config.patch_size * config.patch_size, d, true, rng);
  cls_token = Param(1, d);
  pos_embed = Param(config.sequence_length(), d);
  for (Eigen::Index i = 0; i < cls_token.value.size(); ++i) cls_token.value.data()[i] = trunc_normal(rng, 0.02);
  for (Eigen::Index i = 0; i < pos_embed.value.size(); ++i) pos_embed.value.data()[i] = trunc_normal(rng, 0.02);
  for (int i = 0; i < config.depth; ++i) blocks.emplace_back(d, config.heads, config.mlp_ratio, rng);
  norm = nn::LayerNorm(d);
}

TokenSequence VisionTransformer::encode(const std::vector<Image>& images, bool cache_layers, Cache* cache) const {
  if (images.empty()) throw Error("vit.shape", "encode called with an empty batch");
  for (const auto& img : images) {
    if (img.rows() != config_.image_height || img.cols() != config_.image_width) {
      throw Error("vit.shape", "image " + std::to_string(img.rows()) + "x" + std::to_string(img.cols()) +
                                   " does not match backbone " + std::to_string(config_.image_height) + "x" +
                                   std::to_string(config_.image_width));
    }
  }
  const int len = config_.sequence_length();
  const int batch = static_cast<int>(images.size());
  TokenSequence out;
  out.batch = batch;
  out.length = len;
  out.tokens.resize(static_cast<Eigen::Index>(batch) * len, config_.embed_dim);
  if (cache_layers) out.layers.assign(blocks.size(), Mat(out.tokens.rows(), config_.embed_dim));
  if (cache) cache->images.resize(images.size());
  std::vector<Mat> layers;
  for (int b = 0; b < batch; ++b) {
    const auto row0 = static_cast<Eigen::Index>(b) * len;
    out.tokens.middleRows(row0, len) = encode_one(images[b], cache_layers ? &layers : nullptr, cache ? &cache->images[b] : nullptr);
    if (cache_layers) {
      for (std::size_t i = 0; i < blocks.size(); ++i) out.layers[i].middleRows(row0, len) = layers[i];
    }
  }
  return out;
}

Mat VisionTransformer::encode_one(const Image& image, std::vector<Mat>* layers, ImageCache* cache) const {
  const int n = config_.num_patches();
  Mat patches = patchify(image, config_.patch_size);
  Mat x(n + 1, config_.embed_dim);
  x.row(0) = cls_token.value.row(0) + pos_embed.value.row(0);
  x.bottomRows(n) = patch_embed.forward(patches) + pos_embed.value.bottomRows(n);
  if (cache) cache->blocks.resize(blocks.size());
  if (layers) layers->clear();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = blocks[i].forward(x, n + 1, cache ? &cache->blocks[i] : nullptr);
    if (layers) layers->push_back(x);
  }
  if (cache) cache->patches = std::move(patches);
  return norm.forward(x, cache ? &cache->norm : nullptr);
}

void VisionTransformer::backward(const Cache& cache, const Mat& dtokens, const std::vector<Mat>& dlayers) {
  const int len = config_.sequence_length();
  for (std::size_t b = 0; b < cache.images.size(); ++b) {
    const auto row0 = static_cast<Eigen::Index>(b) * len;
    backward_one(cache.images[b], dtokens.middleRows(row0, len), dlayers, row0);
  }
}

void VisionTransformer::backward_one(const ImageCache& cache, const Mat& dtokens, const std::vector<Mat>& dlayers,
                                     Eigen::Index row0) {
  const int n = config_.num_patches();
  const int len = n + 1;
  Mat dx = norm.backward(cache.norm, dtokens);
  for (std::size_t i = blocks.size(); i-- > 0;) {
    if (i < dlayers.size() && dlayers[i].size() > 0) dx += dlayers[i].middleRows(row0, len);
    dx = blocks[i].backward(cache.blocks[i], len, dx);
  }
  cls_token.grad.row(0) += dx.row(0);
  pos_embed.grad += dx;
  patch_embed.accumulate(cache.patches, dx.bottomRows(n));
}

void VisionTransformer::collect(const std::string& prefix, ParamList& out) {
  patch_embed.collect(prefix + "patch_embed.", out);
  out.push_back({prefix + "cls_token", &cls_token});
  out.push_back({prefix + "pos_embed", &pos_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + "blocks." + std::to_string(i) + ".", out);
  norm.collect(prefix + "norm.", out);
}

}  // namespace dicom

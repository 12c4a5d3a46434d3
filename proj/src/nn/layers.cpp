#include "dicom/nn/layers.hpp"

#include "dicom/error.hpp"

#include <cmath>
#include <numbers>

namespace dicom::nn {

Linear::Linear(int in_features, int out_features, bool bias, Rng& rng, double init_std)
    : weight(out_features, in_features, true), bias(bias ? 1 : 0, bias ? out_features : 0), has_bias_(bias) {
  for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = trunc_normal(rng, init_std);
}

Mat Linear::forward(const Mat& x) const {
  if (x.cols() != weight.value.cols()) {
    throw Error("nn.shape", "linear expects " + std::to_string(weight.value.cols()) + " features, got " +
                                std::to_string(x.cols()));
  }
  Mat y = x * weight.value.transpose();
  if (has_bias_) y.rowwise() += bias.value.row(0);
  return y;
}

void Linear::accumulate(const Mat& x, const Mat& dy) {
  weight.grad.noalias() += dy.transpose() * x;
  if (has_bias_) bias.grad.row(0) += dy.colwise().sum();
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
  accumulate(x, dy);
  return dy * weight.value;
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + "weight", &weight});
  if (has_bias_) out.push_back({prefix + "bias", &bias});
}

LayerNorm::LayerNorm(int dim, double eps) : gamma(1, dim), beta(1, dim), eps_(eps) { gamma.value.setOnes(); }

Mat LayerNorm::forward(const Mat& x, Cache* cache) const {
  const double d = static_cast<double>(x.cols());
  Vec mean = x.rowwise().sum() / d;
  Mat centered = x.colwise() - mean;
  Vec var = centered.array().square().rowwise().sum() / d;
  Vec rstd = (var.array() + eps_).rsqrt();
  Mat xhat = centered.array().colwise() * rstd.array();
  Mat y = (xhat.array().rowwise() * gamma.value.row(0).array()).rowwise() + beta.value.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Mat LayerNorm::backward(const Cache& cache, const Mat& dy) {
  gamma.grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  beta.grad.row(0) += dy.colwise().sum();
  const double d = static_cast<double>(dy.cols());
  Mat dxhat = dy.array().rowwise() * gamma.value.row(0).array();
  Vec mean_dxhat = dxhat.rowwise().sum() / d;
  Vec mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum() / d;
  Mat dx = dxhat.colwise() - mean_dxhat;
  dx.array() -= cache.xhat.array().colwise() * mean_dxhat_xhat.array();
  dx.array().colwise() *= cache.rstd.array();
  return dx;
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + "gamma", &gamma});
  out.push_back({prefix + "beta", &beta});
}

Mat gelu(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
}

Mat gelu_backward(const Mat& x, const Mat& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Mat deriv = x.unaryExpr([inv_sqrt_2pi](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  });
  return deriv.cwiseProduct(dy);
}

Mat softmax_rows(const Mat& logits, double tau) {
  Mat scaled = logits / tau;
  Vec mx = scaled.rowwise().maxCoeff();
  Mat e = (scaled.colwise() - mx).array().exp();
  Vec s = e.rowwise().sum();
  e.array().colwise() /= s.array();
  return e;
}

Attention::Attention(int dim, int heads, Rng& rng)
    : qkv(dim, 3 * dim, true, rng), proj(dim, dim, true, rng), heads_(heads) {
  if (heads <= 0 || dim % heads != 0) throw Error("config.invalid", "embed_dim must be divisible by heads");
}

Mat Attention::forward(const Mat& x, int length, Cache* cache) const {
  const int dim = static_cast<int>(x.cols());
  const int dh = dim / heads_;
  const int batch = static_cast<int>(x.rows()) / length;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat qkv_out = qkv.forward(x);
  Mat context(x.rows(), dim);
  if (cache) cache->probs.resize(static_cast<std::size_t>(batch) * heads_);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads_; ++h) {
      auto q = qkv_out.block(b * length, h * dh, length, dh);
      auto k = qkv_out.block(b * length, dim + h * dh, length, dh);
      auto v = qkv_out.block(b * length, 2 * dim + h * dh, length, dh);
      Mat probs = softmax_rows((q * k.transpose()) * scale);
      context.block(b * length, h * dh, length, dh).noalias() = probs * v;
      if (cache) cache->probs[static_cast<std::size_t>(b) * heads_ + h] = std::move(probs);
    }
  }
  Mat y = proj.forward(context);
  if (cache) {
    cache->x = x;
    cache->qkv = std::move(qkv_out);
    cache->context = std::move(context);
  }
  return y;
}

Mat Attention::backward(const Cache& cache, int length, const Mat& dy) {
  const int dim = static_cast<int>(cache.x.cols());
  const int dh = dim / heads_;
  const int batch = static_cast<int>(cache.x.rows()) / length;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat dcontext = proj.backward(cache.context, dy);
  Mat dqkv(cache.qkv.rows(), cache.qkv.cols());
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads_; ++h) {
      const Mat& probs = cache.probs[static_cast<std::size_t>(b) * heads_ + h];
      auto q = cache.qkv.block(b * length, h * dh, length, dh);
      auto k = cache.qkv.block(b * length, dim + h * dh, length, dh);
      auto v = cache.qkv.block(b * length, 2 * dim + h * dh, length, dh);
      auto dctx = dcontext.block(b * length, h * dh, length, dh);
      Mat dprobs = dctx * v.transpose();
      dqkv.block(b * length, 2 * dim + h * dh, length, dh).noalias() = probs.transpose() * dctx;
      Vec row_dot = (dprobs.array() * probs.array()).rowwise().sum();
      Mat dscores = probs.array() * (dprobs.colwise() - row_dot).array();
      dqkv.block(b * length, h * dh, length, dh).noalias() = (dscores * k) * scale;
      dqkv.block(b * length, dim + h * dh, length, dh).noalias() = (dscores.transpose() * q) * scale;
    }
  }
  return qkv.backward(cache.x, dqkv);
}

void Attention::collect(const std::string& prefix, ParamList& out) {
  qkv.collect(prefix + "qkv.", out);
  proj.collect(prefix + "proj.", out);
}

Mlp::Mlp(int dim, int hidden, Rng& rng) : fc1(dim, hidden, true, rng), fc2(hidden, dim, true, rng) {}

Mat Mlp::forward(const Mat& x, Cache* cache) const {
  Mat pre = fc1.forward(x);
  Mat act = gelu(pre);
  Mat y = fc2.forward(act);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Mat Mlp::backward(const Cache& cache, const Mat& dy) {
  Mat dact = fc2.backward(cache.act, dy);
  return fc1.backward(cache.x, gelu_backward(cache.pre, dact));
}

void Mlp::collect(const std::string& prefix, ParamList& out) {
  fc1.collect(prefix + "fc1.", out);
  fc2.collect(prefix + "fc2.", out);
}

Block::Block(int dim, int heads, double mlp_ratio, Rng& rng)
    : ln1(dim), attn(dim, heads, rng), ln2(dim), mlp(dim, static_cast<int>(std::lround(dim * mlp_ratio)), rng) {}

Mat Block::forward(const Mat& x, int length, Cache* cache) const {
  Mat h = x + attn.forward(ln1.forward(x, cache ? &cache->ln1 : nullptr), length, cache ? &cache->attn : nullptr);
  return h + mlp.forward(ln2.forward(h, cache ? &cache->ln2 : nullptr), cache ? &cache->mlp : nullptr);
}

Mat Block::backward(const Cache& cache, int length, const Mat& dy) {
  Mat dh = dy + ln2.backward(cache.ln2, mlp.backward(cache.mlp, dy));
  return dh + ln1.backward(cache.ln1, attn.backward(cache.attn, length, dh));
}

void Block::collect(const std::string& prefix, ParamList& out) {
  ln1.collect(prefix + "ln1.", out);
  attn.collect(prefix + "attn.", out);
  ln2.collect(prefix + "ln2.", out);
  mlp.collect(prefix + "mlp.", out);
}

}  // namespace dicom::nn

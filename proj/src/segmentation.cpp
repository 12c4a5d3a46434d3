#include "dicom/segmentation.hpp"

#include "dicom/error.hpp"
#include "dicom/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dicom {

using nlohmann::json;

double dice(const SegMask& pred, const SegMask& truth, int cls) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw Error("metrics.shape", "dice needs equal shapes");
  const auto a = (pred.array() == cls).count();
  const auto b = (truth.array() == cls).count();
  if (a + b == 0) return 1.0;
  const auto both = ((pred.array() == cls) && (truth.array() == cls)).count();
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<std::pair<int, int>> boundary_pixels(const SegMask& mask, int cls) {
  std::vector<std::pair<int, int>> out;
  const int h = static_cast<int>(mask.rows()), w = static_cast<int>(mask.cols());
  auto outside = [&](int y, int x) { return y < 0 || x < 0 || y >= h || x >= w || mask(y, x) != cls; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask(y, x) != cls) continue;
      if (outside(y - 1, x) || outside(y + 1, x) || outside(y, x - 1) || outside(y, x + 1)) out.emplace_back(y, x);
    }
  }
  return out;
}

namespace {

// 1-D squared distance transform of a sampled function (lower envelope of
// parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    while (k >= 0) {
      const int p = v[static_cast<std::size_t>(k)];
      const double s = ((f[static_cast<std::size_t>(q)] + q * q) - (f[static_cast<std::size_t>(p)] + p * p)) / (2.0 * (q - p));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : 0.0;
    if (k > 0) {
      const int p = v[static_cast<std::size_t>(k - 1)];
      z[static_cast<std::size_t>(k)] = ((f[static_cast<std::size_t>(q)] + q * q) - (f[static_cast<std::size_t>(p)] + p * p)) / (2.0 * (q - p));
    }
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  d.assign(static_cast<std::size_t>(n), kInf);
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[static_cast<std::size_t>(q)] = (q - p) * (q - p) + f[static_cast<std::size_t>(p)];
  }
}

// Squared Euclidean distance from every pixel to the nearest seed.
Mat squared_edt(int h, int w, const std::vector<std::pair<int, int>>& seeds) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Mat g = Mat::Constant(h, w, kInf);
  for (auto [y, x] : seeds) g(y, x) = 0.0;
  std::vector<double> f, d;
  for (int x = 0; x < w; ++x) {
    f.assign(static_cast<std::size_t>(h), 0.0);
    for (int y = 0; y < h; ++y) f[static_cast<std::size_t>(y)] = g(y, x);
    edt_1d(f, d);
    for (int y = 0; y < h; ++y) g(y, x) = d[static_cast<std::size_t>(y)];
  }
  for (int y = 0; y < h; ++y) {
    f.assign(static_cast<std::size_t>(w), 0.0);
    for (int x = 0; x < w; ++x) f[static_cast<std::size_t>(x)] = g(y, x);
    edt_1d(f, d);
    for (int x = 0; x < w; ++x) g(y, x) = d[static_cast<std::size_t>(x)];
  }
  return g;
}

double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double directed95(const std::vector<std::pair<int, int>>& from, const Mat& to_sq) {
  std::vector<double> d;
  d.reserve(from.size());
  for (auto [y, x] : from) d.push_back(std::sqrt(to_sq(y, x)));
  return percentile95(std::move(d));
}

}  // namespace

double hd95(const SegMask& pred, const SegMask& truth, int cls) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw Error("metrics.shape", "hd95 needs equal shapes");
  const auto bp = boundary_pixels(pred, cls);
  const auto bt = boundary_pixels(truth, cls);
  if (bp.empty() || bt.empty()) throw Error("metrics.undefined", "hd95 is undefined when a mask lacks class " + std::to_string(cls));
  const int h = static_cast<int>(pred.rows()), w = static_cast<int>(pred.cols());
  return std::max(directed95(bp, squared_edt(h, w, bt)), directed95(bt, squared_edt(h, w, bp)));
}

Upsample::Upsample(int in, int out, int factor, Rng& rng)
    : kernel(in, factor * factor * out, false, rng, std::sqrt(2.0 / in)), bias(1, out), factor_(factor), out_(out) {}

FeatureMap Upsample::forward(const FeatureMap& x) const {
  const Mat y = kernel.forward(x.data);
  FeatureMap o{Mat(y.rows() * factor_ * factor_, out_), x.batch, x.height * factor_, x.width * factor_};
  Eigen::Index r = 0;
  for (int b = 0; b < x.batch; ++b) {
    for (int i = 0; i < x.height; ++i) {
      for (int j = 0; j < x.width; ++j, ++r) {
        for (int a = 0; a < factor_; ++a) {
          for (int c = 0; c < factor_; ++c) {
            const Eigen::Index row = (static_cast<Eigen::Index>(b) * o.height + i * factor_ + a) * o.width + j * factor_ + c;
            o.data.row(row) = y.row(r).segment((a * factor_ + c) * out_, out_) + bias.value.row(0);
          }
        }
      }
    }
  }
  return o;
}

FeatureMap Upsample::backward(const FeatureMap& x, const Mat& dy) {
  Mat dk(x.data.rows(), factor_ * factor_ * out_);
  const int oh = x.height * factor_, ow = x.width * factor_;
  Eigen::Index r = 0;
  for (int b = 0; b < x.batch; ++b) {
    for (int i = 0; i < x.height; ++i) {
      for (int j = 0; j < x.width; ++j, ++r) {
        for (int a = 0; a < factor_; ++a) {
          for (int c = 0; c < factor_; ++c) {
            const Eigen::Index row = (static_cast<Eigen::Index>(b) * oh + i * factor_ + a) * ow + j * factor_ + c;
            dk.row(r).segment((a * factor_ + c) * out_, out_) = dy.row(row);
          }
        }
      }
    }
  }
  bias.grad.row(0) += dy.colwise().sum();
  return {kernel.backward(x.data, dk), x.batch, x.height, x.width};
}

void Upsample::collect(const std::string& prefix, ParamList& out) {
  kernel.collect(prefix + "kernel.", out);
  out.push_back({prefix + "bias", &bias});
}

Conv3x3::Conv3x3(int in, int out, Rng& rng) : linear(9 * in, out, true, rng, std::sqrt(2.0 / (9.0 * in))) {}

Mat Conv3x3::im2col(const FeatureMap& x) const {
  const auto c = x.data.cols();
  Mat cols = Mat::Zero(x.data.rows(), 9 * c);
  Eigen::Index r = 0;
  for (int b = 0; b < x.batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * x.height * x.width;
    for (int i = 0; i < x.height; ++i) {
      for (int j = 0; j < x.width; ++j, ++r) {
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int y = i + di, xx = j + dj;
            if (y < 0 || xx < 0 || y >= x.height || xx >= x.width) continue;
            cols.row(r).segment(((di + 1) * 3 + dj + 1) * c, c) = x.data.row(base + y * x.width + xx);
          }
        }
      }
    }
  }
  return cols;
}

FeatureMap Conv3x3::forward(const FeatureMap& x, Mat* cols) const {
  Mat local = im2col(x);
  FeatureMap o{linear.forward(local), x.batch, x.height, x.width};
  if (cols) *cols = std::move(local);
  return o;
}

Mat Conv3x3::backward(const FeatureMap& x, const Mat& cols, const Mat& dy) {
  const Mat dcols = linear.backward(cols, dy);
  const auto c = x.data.cols();
  Mat dx = Mat::Zero(x.data.rows(), c);
  Eigen::Index r = 0;
  for (int b = 0; b < x.batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * x.height * x.width;
    for (int i = 0; i < x.height; ++i) {
      for (int j = 0; j < x.width; ++j, ++r) {
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int y = i + di, xx = j + dj;
            if (y < 0 || xx < 0 || y >= x.height || xx >= x.width) continue;
            dx.row(base + y * x.width + xx) += dcols.row(r).segment(((di + 1) * 3 + dj + 1) * c, c);
          }
        }
      }
    }
  }
  return dx;
}

void Conv3x3::collect(const std::string& prefix, ParamList& out) { linear.collect(prefix, out); }

namespace {

Mat data_rows(const Mat& layer, int batch, int length) {
  Mat out(static_cast<Eigen::Index>(batch) * (length - 1), layer.cols());
  for (int b = 0; b < batch; ++b) {
    out.middleRows(static_cast<Eigen::Index>(b) * (length - 1), length - 1) =
        layer.middleRows(static_cast<Eigen::Index>(b) * length + 1, length - 1);
  }
  return out;
}

Mat scatter_data_rows(const Mat& d, int batch, int length) {
  Mat out = Mat::Zero(static_cast<Eigen::Index>(batch) * length, d.cols());
  for (int b = 0; b < batch; ++b) {
    out.middleRows(static_cast<Eigen::Index>(b) * length + 1, length - 1) =
        d.middleRows(static_cast<Eigen::Index>(b) * (length - 1), length - 1);
  }
  return out;
}

int ipow(int base, int e) {
  int r = 1;
  for (int i = 0; i < e; ++i) r *= base;
  return r;
}

}  // namespace

UnetrDecoder::UnetrDecoder(const BackboneConfig& backbone, const SegmentConfig& config, std::vector<int> taps, Rng& rng)
    : backbone_(backbone), taps_(std::move(taps)) {
  const int stages = static_cast<int>(taps_.size()) - 1;
  if (stages < 1 || static_cast<int>(config.channels.size()) != stages) {
    throw Error("config.invalid", "segmentation decoder needs one channel width per stage (taps - 1)");
  }
  for (std::size_t i = 0; i < taps_.size(); ++i) {
    if (taps_[i] < 1 || taps_[i] > backbone.depth || (i > 0 && taps_[i] <= taps_[i - 1])) {
      throw Error("config.invalid", "segmentation taps must be strictly increasing block indices within the backbone depth");
    }
  }
  factor_ = upsample_factor(backbone.patch_size, stages);
  if (factor_ == 0) throw Error("config.invalid", "patch size is not an integer power of the decoder stage count");
  const int d = backbone.embed_dim;
  const auto& ch = config.channels;
  bottleneck = nn::Linear(d, ch[0], true, rng, std::sqrt(1.0 / d));
  for (int s = 0; s < stages; ++s) {
    const int in = s == 0 ? ch[0] : ch[static_cast<std::size_t>(s) - 1];
    ups.emplace_back(in, ch[static_cast<std::size_t>(s)], factor_, rng);
    skips.emplace_back(d, ch[static_cast<std::size_t>(s)], ipow(factor_, s + 1), rng);
    convs.emplace_back(2 * ch[static_cast<std::size_t>(s)], ch[static_cast<std::size_t>(s)], rng);
  }
  head = nn::Linear(ch.back() + 1, config.classes, true, rng, std::sqrt(1.0 / (ch.back() + 1)));
}

Mat UnetrDecoder::forward(const TokenSequence& tokens, const std::vector<Image>& images, Cache* cache) const {
  if (tokens.layers.size() != static_cast<std::size_t>(backbone_.depth)) {
    throw Error("seg.shape", "segmentation decoder needs every block output");
  }
  if (static_cast<int>(images.size()) != tokens.batch) throw Error("seg.shape", "image count differs from token batch");
  const int stages = static_cast<int>(taps_.size()) - 1;
  const int gr = backbone_.grid_rows(), gc = backbone_.grid_cols();
  const int n = tokens.batch;
  FeatureMap in{data_rows(tokens.layers[static_cast<std::size_t>(taps_.back()) - 1], n, tokens.length), n, gr, gc};
  FeatureMap x{bottleneck.forward(in.data), n, gr, gc};
  if (cache) {
    cache->bottleneck_in = std::move(in);
    cache->stages.assign(static_cast<std::size_t>(stages), {});
  }
  for (int s = 0; s < stages; ++s) {
    const int tap = taps_[static_cast<std::size_t>(stages - 1 - s)];
    FeatureMap skip_in{data_rows(tokens.layers[static_cast<std::size_t>(tap) - 1], n, tokens.length), n, gr, gc};
    const FeatureMap up = ups[static_cast<std::size_t>(s)].forward(x);
    const FeatureMap skip = skips[static_cast<std::size_t>(s)].forward(skip_in);
    FeatureMap merged{Mat(up.data.rows(), up.data.cols() + skip.data.cols()), n, up.height, up.width};
    merged.data << up.data, skip.data;
    Mat cols;
    FeatureMap pre = convs[static_cast<std::size_t>(s)].forward(merged, &cols);
    FeatureMap next{pre.data.cwiseMax(0.0), n, pre.height, pre.width};
    if (cache) {
      auto& st = cache->stages[static_cast<std::size_t>(s)];
      st.up_in = std::move(x);
      st.skip_in = std::move(skip_in);
      st.merged = std::move(merged);
      st.cols = std::move(cols);
      st.pre = std::move(pre.data);
    }
    x = std::move(next);
  }
  const int h = backbone_.image_height, w = backbone_.image_width;
  if (x.height != h || x.width != w) throw Error("seg.shape", "decoder output does not match the image size");
  Mat head_in(x.data.rows(), x.data.cols() + 1);
  head_in.leftCols(x.data.cols()) = x.data;
  for (int b = 0; b < n; ++b) {
    const Image& img = images[static_cast<std::size_t>(b)];
    if (img.rows() != h || img.cols() != w) throw Error("seg.shape", "image size does not match the backbone");
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) head_in((static_cast<Eigen::Index>(b) * h + y) * w + xx, x.data.cols()) = img(y, xx);
    }
  }
  Mat logits = head.forward(head_in);
  if (cache) cache->head_in = std::move(head_in);
  return logits;
}

std::vector<Mat> UnetrDecoder::backward(const Cache& cache, const Mat& dlogits) {
  const int stages = static_cast<int>(taps_.size()) - 1;
  const int n = cache.bottleneck_in.batch;
  const int length = backbone_.sequence_length();
  std::vector<Mat> dlayers(static_cast<std::size_t>(backbone_.depth));
  const Mat dhead = head.backward(cache.head_in, dlogits);
  Mat dx = dhead.leftCols(dhead.cols() - 1);
  for (int s = stages - 1; s >= 0; --s) {
    const auto& st = cache.stages[static_cast<std::size_t>(s)];
    const Mat dpre = (st.pre.array() > 0.0).select(dx, 0.0);
    const Mat dmerged = convs[static_cast<std::size_t>(s)].backward(st.merged, st.cols, dpre);
    const auto c = dmerged.cols() / 2;
    const FeatureMap dskip = skips[static_cast<std::size_t>(s)].backward(st.skip_in, dmerged.rightCols(c));
    const int tap = taps_[static_cast<std::size_t>(stages - 1 - s)];
    dlayers[static_cast<std::size_t>(tap) - 1] = scatter_data_rows(dskip.data, n, length);
    dx = ups[static_cast<std::size_t>(s)].backward(st.up_in, dmerged.leftCols(c)).data;
  }
  const Mat din = bottleneck.backward(cache.bottleneck_in.data, dx);
  dlayers[static_cast<std::size_t>(taps_.back()) - 1] = scatter_data_rows(din, n, length);
  return dlayers;
}

void UnetrDecoder::collect(const std::string& prefix, ParamList& out) {
  bottleneck.collect(prefix + "bottleneck.", out);
  for (std::size_t s = 0; s < ups.size(); ++s) {
    const std::string p = prefix + "stage" + std::to_string(s) + ".";
    ups[s].collect(p + "up.", out);
    skips[s].collect(p + "skip.", out);
    convs[s].collect(p + "conv.", out);
  }
  head.collect(prefix + "head.", out);
}

SegmentationModel::SegmentationModel(VisionTransformer backbone_, const SegmentConfig& config, std::vector<int> taps, Rng& rng)
    : backbone(std::move(backbone_)), decoder(backbone.config(), config, std::move(taps), rng) {}

Mat SegmentationModel::forward(const std::vector<Image>& images, Cache* cache) const {
  const TokenSequence tok = backbone.encode(images, true, cache ? &cache->backbone : nullptr);
  return decoder.forward(tok, images, cache ? &cache->decoder : nullptr);
}

void SegmentationModel::backward(const Cache& cache, const Mat& dlogits) {
  const std::vector<Mat> dlayers = decoder.backward(cache.decoder, dlogits);
  const int n = cache.decoder.bottleneck_in.batch;
  const BackboneConfig& bc = backbone.config();
  backbone.backward(cache.backbone, Mat::Zero(static_cast<Eigen::Index>(n) * bc.sequence_length(), bc.embed_dim), dlayers);
}

ParamList SegmentationModel::params() {
  ParamList out;
  backbone.collect("backbone.", out);
  decoder.collect("decoder.", out);
  return out;
}

std::size_t SegmentationModel::backbone_param_count() {
  ParamList out;
  backbone.collect("backbone.", out);
  return out.size();
}

std::vector<SegMask> SegmentationModel::predict(const std::vector<Image>& images) const {
  const Mat logits = forward(images);
  const int h = backbone.config().image_height, w = backbone.config().image_width;
  std::vector<SegMask> out;
  Eigen::Index r = 0;
  for (std::size_t b = 0; b < images.size(); ++b) {
    SegMask m(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x, ++r) {
        Eigen::Index arg = 0;
        logits.row(r).maxCoeff(&arg);
        m(y, x) = static_cast<int>(arg);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

double segmentation_loss(const Mat& logits, const std::vector<SegMask>& truth, int classes, Mat* dlogits) {
  constexpr double kSmooth = 1e-6;
  if (logits.cols() != classes) throw Error("seg.shape", "logit columns differ from the class count");
  Eigen::Index total = 0;
  for (const auto& m : truth) total += m.size();
  if (total != logits.rows()) throw Error("seg.shape", "logit rows differ from the pixel count");
  const Mat probs = nn::softmax_rows(logits);
  Mat onehot = Mat::Zero(logits.rows(), classes);
  Eigen::Index r = 0;
  for (const auto& m : truth) {
    for (Eigen::Index y = 0; y < m.rows(); ++y) {
      for (Eigen::Index x = 0; x < m.cols(); ++x, ++r) {
        const int c = m(y, x);
        if (c < 0 || c >= classes) throw Error("seg.label", "mask label " + std::to_string(c) + " outside the class range");
        onehot(r, c) = 1.0;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(logits.rows());
  const double ce = -(probs.array().max(1e-300).log() * onehot.array()).sum() * inv;

  const RowVec inter = (probs.array() * onehot.array()).colwise().sum();
  const RowVec denom = probs.colwise().sum() + onehot.colwise().sum();
  const RowVec score = ((2.0 * inter.array() + kSmooth) / (denom.array() + kSmooth)).matrix();
  const double dice_loss = 1.0 - score.mean();

  if (dlogits) {
    // dL_dice/dp(i,c) = -(1/C) * (2 y(i,c) (S_c+e) - (2 I_c + e)) / (S_c+e)^2
    Mat dp(logits.rows(), classes);
    for (int c = 0; c < classes; ++c) {
      const double s = denom(c) + kSmooth;
      const double num = 2.0 * inter(c) + kSmooth;
      dp.col(c) = (-(1.0 / classes) * (2.0 * onehot.col(c).array() * s - num) / (s * s)).matrix();
    }
    const Vec inner = (dp.array() * probs.array()).rowwise().sum();
    Mat ddice = (probs.array() * (dp.colwise() - inner).array()).matrix();
    *dlogits = (probs - onehot) * inv + ddice;
  }
  return ce + dice_loss;
}

SegMetrics evaluate_segmentation(const std::vector<SegMask>& pred, const std::vector<SegMask>& truth, int classes) {
  if (pred.size() != truth.size()) throw Error("seg.shape", "prediction and truth counts differ");
  SegMetrics m;
  m.count = pred.size();
  if (pred.empty()) return m;
  double dice_sum = 0.0, hd_sum = 0.0;
  std::size_t hd_count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int c = 1; c < classes; ++c) {
      dice_sum += dice(pred[i], truth[i], c);
      try {
        hd_sum += hd95(pred[i], truth[i], c);
        ++hd_count;
      } catch (const Error& e) {
        if (e.code() != "metrics.undefined") throw;
        ++m.hd95_undefined;
      }
    }
  }
  m.dice = dice_sum / static_cast<double>(pred.size() * static_cast<std::size_t>(classes - 1));
  if (hd_count > 0) m.hd95 = hd_sum / static_cast<double>(hd_count);
  return m;
}

json to_json(const SegMetrics& m) {
  return {{"Dice", m.dice}, {"HD95", m.hd95 ? json(*m.hd95) : json(nullptr)}, {"HD95_undefined", m.hd95_undefined},
          {"count", m.count}};
}

json to_json(const SegReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val", e.val ? to_json(*e.val) : json(nullptr)}});
  }
  return {{"mode", "segment"}, {"classes", r.classes}, {"taps", r.taps}, {"epochs", epochs},
          {"test", to_json(r.test)}, {"config_fingerprint", r.config_fingerprint}};
}

namespace {

std::vector<SegMask> masks_of(const Dataset& data, const std::vector<std::size_t>& rows) {
  std::vector<SegMask> out;
  for (auto i : rows) {
    const auto& m = data.mask(i);
    if (!m) throw Error("seg.missing_mask", "no segmentation mask for image '" + data.manifest().entries[i].id + "'");
    out.push_back(*m);
  }
  return out;
}

SegMetrics evaluate_rows(const SegmentationModel& model, const Dataset& data, const std::vector<std::size_t>& rows,
                         int classes, std::size_t chunk) {
  std::vector<SegMask> pred;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::vector<std::size_t> part(rows.begin() + start, rows.begin() + std::min(rows.size(), start + chunk));
    for (auto& m : model.predict(data.batch(part).images)) pred.push_back(std::move(m));
  }
  return evaluate_segmentation(pred, masks_of(data, rows), classes);
}

}  // namespace

SegReport train_segmentation(VisionTransformer backbone, const Dataset& data, const RunConfig& config) {
  const SegmentConfig& cfg = config.segment;
  Rng rng = derive_rng(config.seed, 0x5E6);
  SegmentationModel model(std::move(backbone), cfg, config.resolved_skip_layers(), rng);
  ParamList params = model.params();
  const std::size_t n_backbone = model.backbone_param_count();
  std::vector<double> lr_scales(params.size(), 1.0);
  for (std::size_t i = n_backbone; i < params.size(); ++i) lr_scales[i] = cfg.lr_decoder / cfg.lr_backbone;
  AdamW opt(params);

  const auto train_rows = data.indices(Split::kTrain);
  const auto val_rows = data.indices(Split::kVal);
  const auto test_rows = data.indices(Split::kTest);
  if (train_rows.empty()) throw Error("seg.empty", "segmentation needs training images");
  const auto train_masks = masks_of(data, train_rows);

  SegReport report;
  report.classes = cfg.classes;
  report.taps = model.decoder.taps();
  report.config_fingerprint = config_fingerprint(config);
  const std::size_t n = train_rows.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t total = static_cast<std::int64_t>((n + bs - 1) / bs) * cfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle = derive_rng(config.seed, 0x5E65, static_cast<std::uint32_t>(epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle() % i]);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<std::size_t> rows;
      std::vector<SegMask> truth;
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) {
        rows.push_back(train_rows[order[k]]);
        truth.push_back(train_masks[order[k]]);
      }
      const ImageBatch batch = data.batch(rows);
      zero_grads(params);
      SegmentationModel::Cache cache;
      const Mat logits = model.forward(batch.images, &cache);
      Mat dlogits;
      loss_sum += segmentation_loss(logits, truth, cfg.classes, &dlogits) * static_cast<double>(rows.size());
      model.backward(cache, dlogits);
      for (const auto& p : params) {
        if (!all_finite(p.param->grad)) throw Error("seg.non_finite", "gradient of '" + p.name + "' became non-finite");
      }
      opt.step(params, cosine_schedule(cfg.lr_backbone, 0.0, step++, total, 0), cfg.weight_decay, lr_scales);
    }
    SegEpoch rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(n);
    if (!val_rows.empty()) rec.val = evaluate_rows(model, data, val_rows, cfg.classes, bs);
    report.epochs.push_back(std::move(rec));
  }
  if (!test_rows.empty()) report.test = evaluate_rows(model, data, test_rows, cfg.classes, bs);
  return report;
}

}  // namespace dicom

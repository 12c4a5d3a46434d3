#include "dicom/data/augment.hpp"

#include "dicom/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dicom {
namespace {

// Bilinear sample with clamp-to-edge; lerp form keeps constant fields exact.
double sample(const Image& img, double y, double x) {
  const int max_r = static_cast<int>(img.rows()) - 1;
  const int max_c = static_cast<int>(img.cols()) - 1;
  y = std::clamp(y, 0.0, static_cast<double>(max_r));
  x = std::clamp(x, 0.0, static_cast<double>(max_c));
  const int y0 = static_cast<int>(y);
  const int x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, max_r);
  const int x1 = std::min(x0 + 1, max_c);
  const double fy = y - y0;
  const double fx = x - x0;
  const double top = img(y0, x0) + fx * (img(y0, x1) - img(y0, x0));
  const double bot = img(y1, x0) + fx * (img(y1, x1) - img(y1, x0));
  return top + fy * (bot - top);
}

}  // namespace

AugParams sample_aug_params(const AugPolicy& policy, int height, int width, Rng& rng) {
  AugParams p;
  p.crop_height = height;
  p.crop_width = width;
  if (policy.crop) {
    const double scale = uniform(rng, policy.crop_scale_min, policy.crop_scale_max);
    const double log_ratio = uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);
    p.crop_width = std::min<double>(width, std::sqrt(scale * ratio) * width);
    p.crop_height = std::min<double>(height, std::sqrt(scale / ratio) * height);
    p.crop_top = uniform(rng, 0.0, height - p.crop_height);
    p.crop_left = uniform(rng, 0.0, width - p.crop_width);
  }
  if (policy.rotation) {
    p.angle_rad = uniform(rng, -policy.rotation_deg, policy.rotation_deg) * std::numbers::pi / 180.0;
  }
  if (policy.jitter) {
    p.brightness = uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness);
    p.contrast = uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast);
  }
  return p;
}

Image apply_augmentation(const Image& image, const AugParams& p) {
  const int h = static_cast<int>(image.rows());
  const int w = static_cast<int>(image.cols());
  Image out = image;

  const bool cropped = p.crop_top != 0.0 || p.crop_left != 0.0 || p.crop_height != h || p.crop_width != w;
  if (cropped) {
    const double sy = p.crop_height / h;
    const double sx = p.crop_width / w;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) out(r, c) = sample(image, p.crop_top + (r + 0.5) * sy - 0.5, p.crop_left + (c + 0.5) * sx - 0.5);
    }
  }

  if (p.angle_rad != 0.0) {
    const Image src = out;
    const double cy = 0.5 * (h - 1);
    const double cx = 0.5 * (w - 1);
    const double cs = std::cos(p.angle_rad);
    const double sn = std::sin(p.angle_rad);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const double dy = r - cy;
        const double dx = c - cx;
        out(r, c) = sample(src, cy + sn * dx + cs * dy, cx + cs * dx - sn * dy);
      }
    }
  }

  if (p.brightness != 1.0 || p.contrast != 1.0) {
    const double mean = out.mean();
    out = ((out.array() - mean) * p.contrast + mean) * p.brightness;
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

ViewPair two_views(const ImageBatch& batch, const AugPolicy& policy, Rng& rng) {
  if (batch.images.empty()) throw Error("data.invalid_batch", "cannot build views of an empty batch");
  ViewPair views{batch, batch};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image& img = batch.images[i];
    const auto p1 = sample_aug_params(policy, static_cast<int>(img.rows()), static_cast<int>(img.cols()), rng);
    const auto p2 = sample_aug_params(policy, static_cast<int>(img.rows()), static_cast<int>(img.cols()), rng);
    views.view1.images[i] = apply_augmentation(img, p1);
    views.view2.images[i] = apply_augmentation(img, p2);
  }
  return views;
}

}  // namespace dicom

#pragma once

#include "dicom/data/image.hpp"
#include "dicom/rng.hpp"

namespace dicom {

struct AugPolicy {
  bool crop = true;
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  bool rotation = true;
  double rotation_deg = 10.0;
  bool jitter = true;
  double brightness = 0.2;
  double contrast = 0.2;

  static AugPolicy identity() {
    AugPolicy p;
    p.crop = p.rotation = p.jitter = false;
    return p;
  }
};

// Concrete parameters of one augmentation draw; applying them is deterministic.
struct AugParams {
  // Crop window in source pixel coordinates.
  double crop_top = 0.0;
  double crop_left = 0.0;
  double crop_height = 0.0;
  double crop_width = 0.0;
  double angle_rad = 0.0;
  double brightness = 1.0;
  double contrast = 1.0;
};

AugParams sample_aug_params(const AugPolicy& policy, int height, int width, Rng& rng);
Image apply_augmentation(const Image& image, const AugParams& params);

struct ViewPair {
  ImageBatch view1;
  ImageBatch view2;
};

// Two independently augmented views of every image. Parameters are drawn per
// image, view1 first, from rng.
ViewPair two_views(const ImageBatch& batch, const AugPolicy& policy, Rng& rng);

}  // namespace dicom

#include "dicom/data/synthetic.hpp"

#include "dicom/data/image.hpp"
#include "dicom/error.hpp"
#include "dicom/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace dicom {
namespace {

struct Ellipse {
  double cx, cy, rx, ry;  // normalized coordinates
  bool contains(double u, double v, double scale = 1.0) const {
    const double du = (u - cx) / (rx * scale);
    const double dv = (v - cy) / (ry * scale);
    return du * du + dv * dv <= 1.0;
  }
};

struct Rendered {
  Image image;
  Eigen::MatrixXi mask;
};

Rendered render(int label, int classes, int height, int width, Rng& rng) {
  Rendered out{Image(height, width), Eigen::MatrixXi::Zero(height, width)};

  const Ellipse lungs[2] = {
      {0.31 + uniform(rng, -0.03, 0.03), 0.50 + uniform(rng, -0.03, 0.03), 0.13 * uniform(rng, 0.9, 1.1),
       0.30 * uniform(rng, 0.9, 1.1)},
      {0.69 + uniform(rng, -0.03, 0.03), 0.50 + uniform(rng, -0.03, 0.03), 0.13 * uniform(rng, 0.9, 1.1),
       0.30 * uniform(rng, 0.9, 1.1)},
  };
  const double body = uniform(rng, 0.50, 0.60);
  const double lung_level = uniform(rng, 0.18, 0.26);

  // Finding: a soft bright blob placed inside one lung.
  double blob_u = 0.0, blob_v = 0.0;
  const double blob_sigma = 0.07;
  const double blob_amp = uniform(rng, 0.50, 0.65);
  if (label >= 1) {
    const Ellipse& host = lungs[rng() % 2];
    do {
      blob_u = uniform(rng, host.cx - host.rx, host.cx + host.rx);
      blob_v = uniform(rng, host.cy - host.ry, host.cy + host.ry);
    } while (!host.contains(blob_u, blob_v, 0.7));
  }

  // Class-specific stripe texture for labels >= 2.
  const double texture_angle = label >= 2 ? std::numbers::pi * (label - 2) / std::max(1, classes - 2) : 0.0;
  const double texture_freq = label >= 2 ? 5.0 + 2.0 * (label - 2) : 0.0;
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  for (int r = 0; r < height; ++r) {
    const double v = (r + 0.5) / height;
    for (int c = 0; c < width; ++c) {
      const double u = (c + 0.5) / width;
      double value = body + 0.08 * (1.0 - 2.0 * std::abs(u - 0.5));
      const bool in_lung = lungs[0].contains(u, v) || lungs[1].contains(u, v);
      if (in_lung) {
        out.mask(r, c) = 1;
        value = lung_level + 0.05 * v;
        if (label >= 2) {
          value += 0.08 * std::sin(2.0 * std::numbers::pi * texture_freq *
                                       (u * std::cos(texture_angle) + v * std::sin(texture_angle)) +
                                   phase);
        }
      }
      if (label >= 1) {
        const double d2 = (u - blob_u) * (u - blob_u) + (v - blob_v) * (v - blob_v);
        value += blob_amp * std::exp(-d2 / (2.0 * blob_sigma * blob_sigma));
      }
      out.image(r, c) = value;
    }
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      out.image(r, c) = std::clamp(out.image(r, c) + normal(rng, 0.0, 0.04), 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace

DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.classes < 2) throw Error("data.synthetic", "classes must be >= 2");
  if (spec.per_class < 7) throw Error("data.synthetic", "per_class must be >= 7 so every split is non-empty");
  if (spec.patch_size <= 0 || spec.height % spec.patch_size != 0 || spec.width % spec.patch_size != 0) {
    throw Error("config.invalid", "synthetic size must be divisible by the patch size");
  }
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  const int total = spec.classes * spec.per_class;
  const int n_train = 70 * total / 100;
  const int n_val = 15 * total / 100;

  DatasetManifest manifest;
  manifest.source = out_dir / "manifest.csv";
  for (int c = 0; c < spec.classes; ++c) {
    manifest.class_names[c] = c == 0 ? "normal" : (c == 1 ? "finding" : "finding_texture_" + std::to_string(c - 1));
  }

  Rng rng = derive_rng(spec.seed, 0x5E17);
  int index = 0;
  for (int i = 0; i < spec.per_class; ++i) {
    for (int c = 0; c < spec.classes; ++c, ++index) {
      char id[32];
      std::snprintf(id, sizeof(id), "img_%05d", index);
      Rendered r = render(c, spec.classes, spec.height, spec.width, rng);
      const fs::path img_rel = fs::path("images") / (std::string(id) + ".png");
      write_image(out_dir / img_rel, r.image);
      write_label_map(out_dir / "masks" / (std::string(id) + ".png"), r.mask);

      ManifestEntry e;
      e.id = id;
      e.path = out_dir / img_rel;
      e.label = c;
      e.split = index < n_train ? Split::kTrain : (index < n_train + n_val ? Split::kVal : Split::kTest);
      manifest.entries.push_back(std::move(e));
    }
  }
  write_manifest(out_dir / "manifest.csv", manifest);
  return manifest;
}

}  // namespace dicom

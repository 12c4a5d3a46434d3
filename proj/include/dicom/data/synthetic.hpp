#pragma once

#include "dicom/data/manifest.hpp"

#include <cstdint>
#include <filesystem>

namespace dicom {

struct SynthSpec {
  int classes = 2;
  int per_class = 50;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
  int patch_size = 8;
};

// Renders a balanced radiograph-like dataset: two dark "lung" ellipses on a
// noisy body background. Class 0 has no finding, class 1 a bright blob inside
// one lung, classes >= 2 the blob plus a class-specific stripe texture.
// Writes images/, masks/ (lung label maps), manifest.csv and classes.csv with
// a 70/15/15 train/val/test split. Refuses per_class < 7.
DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace dicom

#pragma once

#include "dicom/data/image.hpp"
#include "dicom/data/manifest.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace dicom {

// In-memory dataset: every manifest image decoded, resized to the target
// size and rescaled to [0,1].
class Dataset {
 public:
  Dataset(DatasetManifest manifest, std::vector<Image> images,
          std::vector<std::optional<Eigen::MatrixXi>> masks);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return images_.size(); }
  int height() const;
  int width() const;

  const Image& image(std::size_t index) const { return images_.at(index); }
  const std::optional<Eigen::MatrixXi>& mask(std::size_t index) const { return masks_.at(index); }

  // Indices of entries in the given split, in manifest order.
  std::vector<std::size_t> indices(Split split) const;

  // Deterministic shuffled order of a split for one epoch.
  std::vector<std::size_t> epoch_order(Split split, std::uint64_t seed, std::int64_t epoch) const;

  ImageBatch batch(const std::vector<std::size_t>& indices) const;

  // Consecutive batches of at most batch_size over the epoch order.
  std::vector<ImageBatch> batches(Split split, std::size_t batch_size, std::uint64_t seed,
                                  std::int64_t epoch) const;

 private:
  DatasetManifest manifest_;
  std::vector<Image> images_;
  std::vector<std::optional<Eigen::MatrixXi>> masks_;
};

struct LoadOptions {
  int height = 64;
  int width = 64;
  int patch_size = 8;
  bool load_masks = false;
};

// Errors: data.missing_file (names the path), config.invalid when the target
// size is not divisible by the patch size.
Dataset load_dataset(const std::filesystem::path& manifest_path, const LoadOptions& options);

}  // namespace dicom

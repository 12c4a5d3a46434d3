#include "dicom/data/dataset.hpp"

#include "dicom/error.hpp"
#include "dicom/rng.hpp"

#include <algorithm>
#include <numeric>

namespace dicom {

Dataset::Dataset(DatasetManifest manifest, std::vector<Image> images,
                 std::vector<std::optional<Eigen::MatrixXi>> masks)
    : manifest_(std::move(manifest)), images_(std::move(images)), masks_(std::move(masks)) {
  if (images_.size() != manifest_.entries.size()) {
    throw Error("data.invalid_batch", "image count does not match manifest entries");
  }
  masks_.resize(images_.size());
}

int Dataset::height() const { return images_.empty() ? 0 : static_cast<int>(images_.front().rows()); }
int Dataset::width() const { return images_.empty() ? 0 : static_cast<int>(images_.front().cols()); }

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest_.entries.size(); ++i) {
    if (manifest_.entries[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::epoch_order(Split split, std::uint64_t seed, std::int64_t epoch) const {
  auto idx = indices(split);
  Rng rng = derive_rng(seed, 0x5A17, static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(split));
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

ImageBatch Dataset::batch(const std::vector<std::size_t>& indices) const {
  ImageBatch b;
  for (auto i : indices) {
    b.images.push_back(images_.at(i));
    b.labels.push_back(manifest_.entries.at(i).label);
    b.ids.push_back(manifest_.entries.at(i).id);
  }
  return b;
}

std::vector<ImageBatch> Dataset::batches(Split split, std::size_t batch_size, std::uint64_t seed,
                                         std::int64_t epoch) const {
  if (batch_size == 0) throw Error("config.invalid", "batch_size must be positive");
  const auto order = epoch_order(split, seed, epoch);
  std::vector<ImageBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto end = std::min(order.size(), start + batch_size);
    out.push_back(batch(std::vector<std::size_t>(order.begin() + start, order.begin() + end)));
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, const LoadOptions& options) {
  if (options.patch_size <= 0 || options.height % options.patch_size != 0 || options.width % options.patch_size != 0) {
    throw Error("config.invalid", "target size " + std::to_string(options.height) + "x" + std::to_string(options.width) +
                                      " is not divisible by patch size " + std::to_string(options.patch_size));
  }
  DatasetManifest manifest = read_manifest(manifest_path);
  std::vector<Image> images;
  std::vector<std::optional<Eigen::MatrixXi>> masks;
  images.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Image img = read_image(e.path);
    images.push_back(resize_bilinear(img, options.height, options.width).cwiseMax(0.0).cwiseMin(1.0));
    std::optional<Eigen::MatrixXi> mask;
    if (options.load_masks) {
      if (auto mp = manifest.mask_path(e)) mask = resize_nearest(read_label_map(*mp), options.height, options.width);
    }
    masks.push_back(std::move(mask));
  }
  return Dataset(std::move(manifest), std::move(images), std::move(masks));
}

}  // namespace dicom

#pragma once

#include "dicom/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dicom {

// Grayscale image, H rows by W columns, values nominally in [0, 1].
using Image = Mat;

struct ImageBatch {
  std::vector<Image> images;
  std::vector<int> labels;  // -1 = unlabeled
  std::vector<std::string> ids;

  std::size_t size() const { return images.size(); }
  int height() const { return images.empty() ? 0 : static_cast<int>(images.front().rows()); }
  int width() const { return images.empty() ? 0 : static_cast<int>(images.front().cols()); }
};

// Throws data.invalid_batch when the ImageBatch invariants are violated
// (empty, ragged shapes, pixels outside [0,1], mismatched id/label counts).
void validate_batch(const ImageBatch& batch);

// 8-bit grayscale I/O. PNG and binary PGM (P5) are detected by extension.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);

// Raw 8-bit label map I/O (no rescaling), used for segmentation masks.
Eigen::MatrixXi read_label_map(const std::filesystem::path& path);
void write_label_map(const std::filesystem::path& path, const Eigen::MatrixXi& labels);

// Bilinear resize with half-pixel centers (output pixel i samples (i+0.5)*in/out-0.5).
Image resize_bilinear(const Image& image, int height, int width);

// Nearest-neighbour resize for label maps.
Eigen::MatrixXi resize_nearest(const Eigen::MatrixXi& labels, int height, int width);

}  // namespace dicom

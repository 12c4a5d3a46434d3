#include "dicom/data/image.hpp"

#include "dicom/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace dicom {
namespace {

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

struct Gray8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Gray8 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error("data.missing_file", "cannot open image: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("data.decode", "libpng initialisation failed");
  }
  Gray8 out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("data.decode", "cannot decode PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);

  out.height = static_cast<int>(png_get_image_height(png, info));
  out.width = static_cast<int>(png_get_image_width(png, info));
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(out.width)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("data.decode", "unsupported PNG layout: " + path.string());
  }
  out.pixels.resize(static_cast<std::size_t>(out.height) * out.width);
  rows.resize(out.height);
  for (int r = 0; r < out.height; ++r) rows[r] = out.pixels.data() + static_cast<std::size_t>(r) * out.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const Gray8& img) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("data.write", "cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("data.write", "libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("data.write", "cannot encode PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < img.height; ++r) {
    rows[r] = const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(r) * img.width);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void skip_pgm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

Gray8 read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("data.missing_file", "cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw Error("data.decode", "only binary PGM (P5) is supported: " + path.string());
  Gray8 out;
  int maxval = 0;
  skip_pgm_space(in);
  in >> out.width;
  skip_pgm_space(in);
  in >> out.height;
  skip_pgm_space(in);
  in >> maxval;
  in.get();
  if (!in || maxval <= 0 || maxval > 255 || out.width <= 0 || out.height <= 0) {
    throw Error("data.decode", "malformed PGM header: " + path.string());
  }
  out.pixels.resize(static_cast<std::size_t>(out.height) * out.width);
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (!in) throw Error("data.decode", "truncated PGM: " + path.string());
  if (maxval != 255) {
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / maxval));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Gray8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("data.write", "cannot write image: " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

Gray8 read_gray8(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("data.missing_file", "missing file: " + path.string());
  const std::string ext = lower_ext(path);
  if (ext == ".pgm") return read_pgm(path);
  return read_png(path);
}

void write_gray8(const std::filesystem::path& path, const Gray8& img) {
  if (lower_ext(path) == ".pgm") {
    write_pgm(path, img);
  } else {
    write_png(path, img);
  }
}

}  // namespace

void validate_batch(const ImageBatch& batch) {
  if (batch.images.empty()) throw Error("data.invalid_batch", "batch is empty");
  if (batch.ids.size() != batch.images.size() || batch.labels.size() != batch.images.size()) {
    throw Error("data.invalid_batch", "ids/labels do not match the number of images");
  }
  const auto h = batch.images.front().rows();
  const auto w = batch.images.front().cols();
  for (const auto& img : batch.images) {
    if (img.rows() != h || img.cols() != w) throw Error("data.invalid_batch", "ragged image shapes in batch");
    if (img.size() > 0 && (img.minCoeff() < 0.0 || img.maxCoeff() > 1.0 || !img.allFinite())) {
      throw Error("data.invalid_batch", "pixel values outside [0,1]");
    }
  }
}

Image read_image(const std::filesystem::path& path) {
  const Gray8 g = read_gray8(path);
  Image img(g.height, g.width);
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) img(r, c) = g.pixels[static_cast<std::size_t>(r) * g.width + c] / 255.0;
  }
  return img;
}

void write_image(const std::filesystem::path& path, const Image& image) {
  Gray8 g;
  g.height = static_cast<int>(image.rows());
  g.width = static_cast<int>(image.cols());
  g.pixels.resize(static_cast<std::size_t>(g.height) * g.width);
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      const double v = std::clamp(image(r, c), 0.0, 1.0);
      g.pixels[static_cast<std::size_t>(r) * g.width + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  write_gray8(path, g);
}

Eigen::MatrixXi read_label_map(const std::filesystem::path& path) {
  const Gray8 g = read_gray8(path);
  Eigen::MatrixXi out(g.height, g.width);
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) out(r, c) = g.pixels[static_cast<std::size_t>(r) * g.width + c];
  }
  return out;
}

void write_label_map(const std::filesystem::path& path, const Eigen::MatrixXi& labels) {
  Gray8 g;
  g.height = static_cast<int>(labels.rows());
  g.width = static_cast<int>(labels.cols());
  g.pixels.resize(static_cast<std::size_t>(g.height) * g.width);
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      g.pixels[static_cast<std::size_t>(r) * g.width + c] = static_cast<std::uint8_t>(std::clamp(labels(r, c), 0, 255));
    }
  }
  write_gray8(path, g);
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (image.rows() == height && image.cols() == width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.rows()) / height;
  const double sx = static_cast<double>(image.cols()) / width;
  const int max_r = static_cast<int>(image.rows()) - 1;
  const int max_c = static_cast<int>(image.cols()) - 1;
  for (int r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(max_r));
    const int y0 = static_cast<int>(y);
    const int y1 = std::min(y0 + 1, max_r);
    const double fy = y - y0;
    for (int c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(max_c));
      const int x0 = static_cast<int>(x);
      const int x1 = std::min(x0 + 1, max_c);
      const double fx = x - x0;
      const double top = image(y0, x0) + fx * (image(y0, x1) - image(y0, x0));
      const double bot = image(y1, x0) + fx * (image(y1, x1) - image(y1, x0));
      out(r, c) = top + fy * (bot - top);
    }
  }
  return out;
}

Eigen::MatrixXi resize_nearest(const Eigen::MatrixXi& labels, int height, int width) {
  if (labels.rows() == height && labels.cols() == width) return labels;
  Eigen::MatrixXi out(height, width);
  for (int r = 0; r < height; ++r) {
    const int sr = std::min(static_cast<int>((r + 0.5) * labels.rows() / height), static_cast<int>(labels.rows()) - 1);
    for (int c = 0; c < width; ++c) {
      const int sc = std::min(static_cast<int>((c + 0.5) * labels.cols() / width), static_cast<int>(labels.cols()) - 1);
      out(r, c) = labels(sr, sc);
    }
  }
  return out;
}

}  // namespace dicom

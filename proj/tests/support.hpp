#pragma once

#include "dicom/config.hpp"
#include "dicom/error.hpp"
#include "dicom/rng.hpp"
#include "dicom/tensor.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

namespace dicom::test {

// Gradient-check geometry: 8x8 images, 4x4 patches, d=16, two blocks, K=8.
inline RunConfig tiny_config() {
  RunConfig c;
  c.backbone.patch_size = 4;
  c.backbone.embed_dim = 16;
  c.backbone.depth = 2;
  c.backbone.heads = 2;
  c.backbone.image_height = 8;
  c.backbone.image_width = 8;
  c.head.K = 8;
  c.head.hidden = 16;
  c.head.bottleneck = 8;
  c.segment.skip_layers = {1, 2};
  c.segment.channels = {4};
  c.data.batch_size = 4;
  return c;
}

inline Mat random_image(Rng& rng, int h, int w) {
  Mat m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, 0.0, 1.0);
  return m;
}

inline Mat random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng, 0.0, scale);
  return m;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = info ? std::string(info->test_suite_name()) + "_" + info->name() : "dicom";
    std::replace(name.begin(), name.end(), '/', '_');
    path_ = std::filesystem::temp_directory_path() /
            ("dicom_test_" + name + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Expects fn to throw dicom::Error with the given code; returns the message.
inline std::string expect_error(const std::function<void()>& fn, const std::string& code) {
  try {
    fn();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "expected error " << code;
  return {};
}

struct GradCheckResult {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
};

// Compares analytic gradients (already accumulated in the params) with
// extrapolated central differences of `loss` at up to `per_param` random coordinates of
// every tensor. Relative error |a - n| / max(|a|, |n|, floor); the floor
// keeps round-off on vanishing gradients from dominating.
inline GradCheckResult check_gradients(const ParamList& params, const std::function<double()>& loss, Rng& rng,
                                       int per_param = 20, double h = 1e-5, double floor = 1e-6) {
  GradCheckResult r;
  for (const auto& np : params) {
    Param& p = *np.param;
    const Eigen::Index size = p.value.size();
    std::vector<Eigen::Index> coords;
    if (size <= per_param) {
      for (Eigen::Index i = 0; i < size; ++i) coords.push_back(i);
    } else {
      while (static_cast<int>(coords.size()) < per_param) {
        const auto c = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(size));
        if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
      }
    }
    for (auto c : coords) {
      const double original = p.value.data()[c];
      auto central = [&](double step) {
        p.value.data()[c] = original + step;
        const double up = loss();
        p.value.data()[c] = original - step;
        const double down = loss();
        p.value.data()[c] = original;
        return (up - down) / (2.0 * step);
      };
      // Richardson extrapolation of two central differences: O(h^4) error.
      const double numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
      const double analytic = p.grad.data()[c];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++r.checked;
      if (rel > r.worst) {
        r.worst = rel;
        r.where = np.name + "[" + std::to_string(c) + "] analytic=" + std::to_string(analytic) +
                  " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace dicom::test

#pragma once

#include "dicom/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dicom {

// Adaptive-moment optimizer with decoupled weight decay. Moments are stored
// by position and checked against parameter names on every step, so the
// owning state stays copyable.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamList& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // lr_scales, when non-empty, multiplies the learning rate per parameter.
  void step(const ParamList& params, double lr, double weight_decay, std::span<const double> lr_scales = {});

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Mat>& first_moments() { return m_; }
  std::vector<Mat>& second_moments() { return v_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }

 private:
  std::vector<std::string> names_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t steps_ = 0;
};

// Linear warm-up to `base` over warmup_steps, then cosine decay to `final`.
double cosine_schedule(double base, double final, std::int64_t step, std::int64_t total_steps,
                       std::int64_t warmup_steps);

// EMA momentum rising from start to end along a half cosine.
double ema_momentum(std::int64_t step, std::int64_t total_steps, double start, double end);

}  // namespace dicom

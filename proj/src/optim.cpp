#include "dicom/optim.hpp"

#include "dicom/error.hpp"

#include <cmath>
#include <numbers>

namespace dicom {

AdamW::AdamW(const ParamList& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    names_.push_back(p.name);
    m_.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
    v_.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
  }
}

void AdamW::step(const ParamList& params, double lr, double weight_decay, std::span<const double> lr_scales) {
  if (params.size() != names_.size()) throw Error("optim.mismatch", "parameter list changed since the optimizer was built");
  if (!lr_scales.empty() && lr_scales.size() != params.size()) throw Error("optim.mismatch", "one lr scale per parameter");
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != names_[i]) throw Error("optim.mismatch", "parameter order changed at " + params[i].name);
    Param& p = *params[i].param;
    const double step_lr = lr * (lr_scales.empty() ? 1.0 : lr_scales[i]);
    if (p.decay && weight_decay > 0.0) p.value *= 1.0 - step_lr * weight_decay;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= step_lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

double cosine_schedule(double base, double final, std::int64_t step, std::int64_t total_steps,
                       std::int64_t warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const std::int64_t span = total_steps - warmup_steps;
  if (span <= 0) return base;
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return final + 0.5 * (base - final) * (1.0 + std::cos(std::numbers::pi * t));
}

double ema_momentum(std::int64_t step, std::int64_t total_steps, double start, double end) {
  if (total_steps <= 0) return end;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return end - (end - start) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

}  // namespace dicom

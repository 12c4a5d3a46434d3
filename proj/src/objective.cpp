#include "dicom/objective.hpp"

#include "dicom/error.hpp"
#include "dicom/nn/layers.hpp"

#include <algorithm>
#include <cmath>

namespace dicom {
namespace {

void check_distributions(const Mat& p, const char* what) {
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double s = p.row(r).sum();
    if (!(std::abs(s - 1.0) <= 1e-4) || p.row(r).minCoeff() < 0.0) {
      throw Error("objective.invalid_distribution",
                  std::string(what) + " row " + std::to_string(r) + " is not a distribution (sum " + std::to_string(s) + ")");
    }
  }
}

double row_cross_entropy(const Mat& pt, const Mat& ps, Eigen::Index r) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < pt.cols(); ++j) acc -= pt(r, j) * std::log(std::max(ps(r, j), kLogFloor));
  return acc;
}

}  // namespace

double recon_loss(const Mat& x, const Mat& xbar, const Mat& mask, ReconMode mode, Mat* dxbar) {
  if (x.rows() != xbar.rows() || x.cols() != xbar.cols() || x.rows() != mask.rows() || x.cols() != mask.cols()) {
    throw Error("objective.shape", "recon_loss: x, xbar and mask must share a shape");
  }
  double loss = (mask.array() * (x - xbar).array().abs()).sum();
  double scale = 1.0;
  if (mode == ReconMode::kMean) scale = 1.0 / std::max(mask.sum(), 1.0);
  if (dxbar) {
    *dxbar = (mask.array() * (xbar - x).array().sign()).matrix() * scale;
  }
  return loss * scale;
}

CenterStats CenterStats::identity(int K, double momentum) {
  CenterStats s;
  s.mean = RowVec::Zero(K);
  s.std = RowVec::Ones(K);
  s.momentum = momentum;
  return s;
}

Mat center(const Mat& logits, CenterStats& stats, bool training) {
  if (logits.cols() != stats.K()) {
    throw Error("objective.shape", "center: logits have " + std::to_string(logits.cols()) + " columns, stats " +
                                       std::to_string(stats.K()));
  }
  const RowVec denom = stats.std.cwiseMax(kStdFloor);
  Mat out = (logits.rowwise() - stats.mean).array().rowwise() / denom.array();
  if (training && logits.rows() > 0) {
    const RowVec batch_mean = logits.colwise().mean();
    const RowVec batch_std = ((logits.rowwise() - batch_mean).array().square().colwise().mean()).sqrt().matrix();
    const double m = stats.momentum;
    stats.mean = m * stats.mean + (1.0 - m) * batch_mean;
    stats.std = m * stats.std + (1.0 - m) * batch_std;
  }
  return out;
}

Mat sharpen(const Mat& logits, double tau) {
  if (!(tau > 0.0)) throw Error("objective.temperature", "temperature must be positive, got " + std::to_string(tau));
  return nn::softmax_rows(logits, tau);
}

double entropy(const RowVec& probs) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    if (probs(j) > 0.0) h -= probs(j) * std::log(probs(j));
  }
  return h;
}

void Temperatures::validate() const {
  if (!(teacher > 0.0 && teacher < student)) {
    throw Error("objective.temperature", "temperatures must satisfy 0 < teacher < student (teacher " +
                                             std::to_string(teacher) + ", student " + std::to_string(student) + ")");
  }
}

double teacher_temperature(double epoch, double start, double end, double warmup_epochs) {
  if (warmup_epochs <= 0.0 || epoch >= warmup_epochs) return end;
  return start + (end - start) * std::max(0.0, epoch) / warmup_epochs;
}

double local_loss(const Mat& p_teacher, const Mat& p_student, const std::vector<TokenMask>& token_masks,
                  bool normalized) {
  if (p_teacher.rows() != p_student.rows() || p_teacher.cols() != p_student.cols()) {
    throw Error("objective.shape", "local_loss: teacher and student shapes differ");
  }
  std::size_t total_tokens = 0;
  for (const auto& m : token_masks) total_tokens += m.size();
  if (static_cast<Eigen::Index>(total_tokens) != p_teacher.rows()) {
    throw Error("objective.shape", "local_loss: token masks do not cover the probability rows");
  }
  check_distributions(p_teacher, "teacher");
  check_distributions(p_student, "student");
  double loss = 0.0;
  std::size_t masked = 0;
  Eigen::Index row = 0;
  for (const auto& m : token_masks) {
    for (auto t : m) {
      if (t) {
        loss += row_cross_entropy(p_teacher, p_student, row);
        ++masked;
      }
      ++row;
    }
  }
  if (normalized) loss /= static_cast<double>(std::max<std::size_t>(masked, 1));
  return loss;
}

double global_loss(const Mat& pt1, const Mat& ps2, const Mat& pt2, const Mat& ps1, bool normalized) {
  for (const Mat* m : {&ps2, &pt2, &ps1}) {
    if (m->rows() != pt1.rows() || m->cols() != pt1.cols()) throw Error("objective.shape", "global_loss: shape mismatch");
  }
  check_distributions(pt1, "teacher view1");
  check_distributions(ps2, "student view2");
  check_distributions(pt2, "teacher view2");
  check_distributions(ps1, "student view1");
  double loss = 0.0;
  for (Eigen::Index k = 0; k < pt1.rows(); ++k) {
    loss += row_cross_entropy(pt1, ps2, k) + row_cross_entropy(pt2, ps1, k);
  }
  if (normalized && pt1.rows() > 0) loss /= static_cast<double>(pt1.rows());
  return loss;
}

double soft_cross_entropy(const Mat& pt, const Mat& logits, double tau, const Vec& weights, Mat* dlogits) {
  if (pt.rows() != logits.rows() || pt.cols() != logits.cols() || weights.size() != pt.rows()) {
    throw Error("objective.shape", "soft_cross_entropy: shape mismatch");
  }
  const Mat ps = sharpen(logits, tau);
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < pt.rows(); ++r) {
    const double w = weights(r);
    if (w == 0.0) continue;
    loss += w * row_cross_entropy(pt, ps, r);
    if (dlogits) {
      // ps_j * d/dps_j of -pt_j log(max(ps_j, floor)) is -pt_j, or 0 where
      // the floor is active; chained through the softmax Jacobian.
      RowVec psg(pt.cols());
      for (Eigen::Index j = 0; j < pt.cols(); ++j) psg(j) = ps(r, j) > kLogFloor ? -pt(r, j) : 0.0;
      const double dot = psg.sum();
      dlogits->row(r) = (w / tau) * (psg - ps.row(r) * dot);
    }
  }
  return loss;
}

bool LossBundle::finite() const {
  return std::isfinite(recons) && std::isfinite(local) && std::isfinite(global) && std::isfinite(total);
}

LossBundle total_loss(double recons, double local, double global, const LossWeights& w) {
  LossBundle b;
  b.recons = recons;
  b.local = local;
  b.global = global;
  b.weights = w;
  b.total = w.alpha1 * recons + w.alpha2 * local + w.alpha3 * global;
  return b;
}

}  // namespace dicom

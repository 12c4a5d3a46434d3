#pragma once

#include "dicom/corruption.hpp"
#include "dicom/tensor.hpp"

#include <vector>

namespace dicom {

inline constexpr double kLogFloor = 1e-8;
inline constexpr double kStdFloor = 1e-5;

enum class ReconMode { kSum, kMean };

// Masked l1 reconstruction: sum of M * |x - xbar| (kSum) or that sum divided
// by max(sum M, 1) (kMean). When dxbar is given it receives dL/dxbar.
double recon_loss(const Mat& x, const Mat& xbar, const Mat& mask, ReconMode mode, Mat* dxbar = nullptr);

// Running per-dimension statistics used to standardise teacher logits.
struct CenterStats {
  RowVec mean;
  RowVec std;
  double momentum = 0.9;

  static CenterStats identity(int K, double momentum = 0.9);
  int K() const { return static_cast<int>(mean.size()); }
};

// (z - mean) / max(std, kStdFloor) using the stats as they are on entry;
// in training mode the stats are then moved towards this batch's column
// mean and (population) standard deviation.
Mat center(const Mat& logits, CenterStats& stats, bool training);

// Row-wise temperature softmax. Throws objective.temperature for tau <= 0.
Mat sharpen(const Mat& logits, double tau);

double entropy(const RowVec& probs);

struct Temperatures {
  double student = 0.1;
  double teacher = 0.04;

  void validate() const;  // requires 0 < teacher < student
};

// Linear warm-up of the teacher temperature over the first warmup_epochs.
double teacher_temperature(double epoch, double start, double end, double warmup_epochs);

// Local token loss over rows = N*n tokens (image-major): sum over masked
// tokens of the cross-entropy H(p_t, p_s). Divided by the masked-token count
// when normalized is set.
double local_loss(const Mat& p_teacher, const Mat& p_student, const std::vector<TokenMask>& token_masks,
                  bool normalized = false);

// Symmetric cross-view class-token loss; inputs are N x K. Divided by N when
// normalized is set.
double global_loss(const Mat& p_teacher_view1, const Mat& p_student_view2, const Mat& p_teacher_view2,
                   const Mat& p_student_view1, bool normalized = false);

// sum_r w_r * H(p_teacher[r], softmax(student_logits[r] / tau)) with log
// floored at kLogFloor. Fills dlogits (same shape as student_logits) with the
// exact gradient of that expression.
double soft_cross_entropy(const Mat& p_teacher, const Mat& student_logits, double tau, const Vec& row_weights,
                          Mat* dlogits);

struct LossWeights {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double alpha3 = 1.0;
};

struct LossBundle {
  double recons = 0.0;
  double local = 0.0;
  double global = 0.0;
  double total = 0.0;
  LossWeights weights;

  bool finite() const;
};

LossBundle total_loss(double recons, double local, double global, const LossWeights& weights);

}  // namespace dicom

#pragma once

#include "dicom/tensor.hpp"

#include <span>
#include <vector>

namespace dicom {

double accuracy(std::span<const int> predictions, std::span<const int> labels);

// Average precision over a descending-score sweep. Tied scores form one
// threshold; precision is evaluated at each distinct threshold and weighted
// by the recall gained there. Labels are 0/1; throws metrics.undefined when
// only one class is present.
double aupr(std::span<const double> scores, std::span<const int> labels);

// Mann-Whitney estimate of P(score_pos > score_neg), ties counted 0.5.
double auc(std::span<const double> scores, std::span<const int> labels);

// One-vs-rest macro averages over the columns of a score matrix (N x C).
// Classes absent from labels are skipped; throws metrics.undefined when no
// class is defined.
double macro_aupr(const Mat& scores, std::span<const int> labels);
double macro_auc(const Mat& scores, std::span<const int> labels);

}  // namespace dicom

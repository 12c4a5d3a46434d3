#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace dicom {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

// A learnable tensor together with its accumulated gradient.
struct Param {
  Mat value;
  Mat grad;
  // Decoupled weight decay applies only to matrices flagged here.
  bool decay = false;

  Param() = default;
  Param(Eigen::Index rows, Eigen::Index cols, bool decay_ = false)
      : value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)), decay(decay_) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct NamedParam {
  std::string name;
  Param* param;
};

using ParamList = std::vector<NamedParam>;

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.param->zero_grad();
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace dicom

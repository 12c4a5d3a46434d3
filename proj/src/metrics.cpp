#include "dicom/metrics.hpp"

#include "dicom/error.hpp"

#include <algorithm>
#include <numeric>

namespace dicom {
namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw Error("metrics.shape", std::string(what) + ": scores and labels must be non-empty and equally long");
  }
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error("metrics.shape", std::string(what) + ": labels must be 0/1");
    pos += l == 1;
  }
  if (pos == 0 || pos == labels.size()) {
    throw Error("metrics.undefined", std::string(what) + " is undefined for a single-class label vector");
  }
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw Error("metrics.shape", "accuracy: predictions and labels must be non-empty and equally long");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double aupr(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels, "AUPR");
  const auto order = descending_order(scores);
  const double total_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / total_pos;
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels, "AUC");
  // Rank-sum with average ranks for ties.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

namespace {

template <typename Fn>
double macro_average(const Mat& scores, std::span<const int> labels, Fn metric, const char* what) {
  if (scores.rows() != static_cast<Eigen::Index>(labels.size())) throw Error("metrics.shape", std::string(what) + ": row count");
  double sum = 0.0;
  int defined = 0;
  std::vector<double> col(labels.size());
  std::vector<int> bin(labels.size());
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores(static_cast<Eigen::Index>(i), c);
      bin[i] = labels[i] == c ? 1 : 0;
      pos += bin[i];
    }
    if (pos == 0 || pos == labels.size()) continue;
    sum += metric(col, bin);
    ++defined;
  }
  if (defined == 0) throw Error("metrics.undefined", std::string(what) + " is undefined: no class has both outcomes");
  return sum / defined;
}

}  // namespace

double macro_aupr(const Mat& scores, std::span<const int> labels) {
  return macro_average(scores, labels, [](const auto& s, const auto& l) { return aupr(s, l); }, "macro-AUPR");
}

double macro_auc(const Mat& scores, std::span<const int> labels) {
  return macro_average(scores, labels, [](const auto& s, const auto& l) { return auc(s, l); }, "macro-AUC");
}

}  // namespace dicom

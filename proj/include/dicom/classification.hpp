#pragma once

#include "dicom/config.hpp"
#include "dicom/data/dataset.hpp"
#include "dicom/nn/vit.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dicom {

struct ClassMetrics {
  double accuracy = 0.0;
  // Binary AUPR/AUC on the class-1 probability, macro one-vs-rest otherwise.
  // Absent when undefined (single-class labels).
  std::optional<double> aupr;
  std::optional<double> auc;
  Eigen::MatrixXi confusion;  // rows = truth, cols = prediction
  std::size_t count = 0;
};

ClassMetrics evaluate_probabilities(const Mat& probs, std::span<const int> labels);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<ClassMetrics> val;
};

struct EvalReport {
  std::string mode;
  int classes = 0;
  std::vector<EpochRecord> epochs;
  ClassMetrics test;
  // Speed of convergence over per-epoch validation AUPR.
  std::optional<double> soc;
  std::string config_fingerprint;
  std::string backbone_hash_before;
  std::string backbone_hash_after;

  std::vector<double> val_aupr_curve() const;
};

nlohmann::json to_json(const ClassMetrics& m);
nlohmann::json to_json(const EvalReport& r);

struct LabeledFeatures {
  Mat features;
  std::vector<int> labels;
};

// Linear softmax classifier trained on fixed features.
EvalReport fit_linear_probe(const LabeledFeatures& train, const LabeledFeatures& val, const LabeledFeatures& test,
                            int classes, const ProbeConfig& config, std::uint64_t seed);

// Class-token embeddings (final block, post-norm) of the given dataset rows.
Mat class_token_features(const VisionTransformer& backbone, const Dataset& data, const std::vector<std::size_t>& rows,
                         std::size_t chunk = 32);

// Frozen backbone + linear head on the class token. The report carries a
// hash of the backbone before and after, which must agree.
EvalReport linear_probe(VisionTransformer& backbone, const Dataset& data, const RunConfig& config);

// Backbone and head both trained (backbone lr finetune.lr_backbone, head
// finetune.lr_head, cosine decay). Validation AUPR is recorded every epoch.
EvalReport fine_tune(VisionTransformer backbone, const Dataset& data, const RunConfig& config);

std::string backbone_hash(VisionTransformer& backbone);

// Number of classes implied by the manifest; throws
// classification.class_mismatch when labels fall outside it or fewer than
// two classes exist.
int resolve_classes(const Dataset& data);

}  // namespace dicom

#pragma once

#include "dicom/corruption.hpp"
#include "dicom/data/augment.hpp"
#include "dicom/heads.hpp"
#include "dicom/nn/vit.hpp"
#include "dicom/objective.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dicom {

struct DataConfig {
  std::string manifest;
  int batch_size = 32;
};

struct TemperatureConfig {
  double student = 0.1;
  double teacher_start = 0.04;
  double teacher_end = 0.07;
  double warmup_epochs = 30;
};

struct LossConfig {
  LossWeights weights;
  bool raw = false;
};

struct OptimConfig {
  double lr = 5e-4;
  double min_lr = 1e-6;
  double weight_decay = 0.04;
  double warmup_epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct EmaConfig {
  double start = 0.996;
  double end = 1.0;
};

struct TrainConfig {
  int epochs = 100;
  // Stop after this many optimizer steps (0 = run all epochs).
  int max_steps = 0;
  // Checkpoint period in steps (0 = final checkpoint only).
  int checkpoint_every = 0;
};

struct ProbeConfig {
  int epochs = 50;
  double lr = 1e-2;
  double weight_decay = 0.0;
  int batch_size = 32;
};

struct FinetuneConfig {
  int epochs = 20;
  double lr_backbone = 1e-4;
  double lr_head = 1e-3;
  double weight_decay = 0.05;
  int batch_size = 16;
};

struct SegmentConfig {
  int epochs = 20;
  // 1-based block indices tapped by the decoder; empty = depth fractions
  // 1/4, 1/2, 3/4 and 1.
  std::vector<int> skip_layers;
  std::vector<int> channels = {64, 32, 16};
  int classes = 2;
  double lr_backbone = 1e-4;
  double lr_decoder = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 8;
};

struct ClusterConfig {
  int restarts = 10;
  int max_iter = 300;
  double tol = 1e-6;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string device = "cpu";
  DataConfig data;
  AugPolicy augment;
  BackboneConfig backbone;
  MaskConfig mask;
  HeadConfig head;
  LossConfig loss;
  TemperatureConfig temp;
  double center_momentum = 0.9;
  OptimConfig optim;
  EmaConfig ema;
  TrainConfig train;
  ProbeConfig probe;
  FinetuneConfig finetune;
  SegmentConfig segment;
  ClusterConfig cluster;

  // Every violated constraint, dotted-key qualified.
  std::vector<std::string> violations() const;
  void validate() const;  // throws config.invalid joining violations()

  // Skip taps resolved from the depth fractions when not given explicitly.
  std::vector<int> resolved_skip_layers() const;
};

// Per-stage upsampling u with u^stages == patch_size, or 0 when none exists.
int upsample_factor(int patch_size, int stages);

nlohmann::json to_json(const RunConfig& config);

// Overlays `j` on the defaults. Collects unknown keys, type mismatches and
// constraint violations and reports them together as config.invalid.
RunConfig config_from_json(const nlohmann::json& j);

// Empty or missing-content file yields the defaults.
RunConfig parse_config(const std::filesystem::path& path);

std::string config_fingerprint(const RunConfig& config);

// git-describe string baked in at build time.
std::string version_string();

// Writes config.resolved.json and version.txt into dir.
void write_run_metadata(const std::filesystem::path& dir, const RunConfig& config);

}  // namespace dicom

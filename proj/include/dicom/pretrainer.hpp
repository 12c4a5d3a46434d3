#pragma once

#include "dicom/config.hpp"
#include "dicom/corruption.hpp"
#include "dicom/data/augment.hpp"
#include "dicom/heads.hpp"
#include "dicom/nn/vit.hpp"
#include "dicom/objective.hpp"
#include "dicom/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>

namespace dicom {

enum class Role { kStudent, kTeacher };

// Backbone plus projection head; the student additionally owns the
// reconstruction decoder.
struct EncoderState {
  Role role = Role::kStudent;
  VisionTransformer backbone;
  ProjectionHead projection;
  std::optional<ReconstructionDecoder> decoder;

  // Backbone and projection parameters (the EMA-tracked set).
  ParamList shared_params();
  // Everything trainable: shared params plus the decoder when present.
  ParamList all_params();
};

EncoderState make_student(const RunConfig& config, Rng& rng);
EncoderState make_teacher(const EncoderState& student);

// phi <- lambda * phi + (1 - lambda) * theta over backbone and projection.
void ema_update(EncoderState& student, EncoderState& teacher, double lambda);
void ema_update(const ParamList& student, const ParamList& teacher, double lambda);

struct TrainState {
  RunConfig config;
  EncoderState student;
  EncoderState teacher;
  CenterStats center;
  AdamW optimizer;
  std::int64_t step = 0;
  std::int64_t steps_per_epoch = 1;
  std::int64_t total_steps = 1;
  Rng rng;

  double epoch() const { return static_cast<double>(step) / static_cast<double>(steps_per_epoch); }
};

// Fresh state: student from the seed, teacher a copy of it, identity centering.
TrainState init_train_state(const RunConfig& config, std::int64_t steps_per_epoch, std::int64_t total_steps);

// Everything random about one step: the two augmented views and their
// independently masked copies. A pure function of (batch, config, seed, step).
struct StepInputs {
  ViewPair views;
  MaskPair masked1;
  MaskPair masked2;
};

StepInputs prepare_step(const ImageBatch& batch, const RunConfig& config, std::uint64_t seed, std::int64_t step);

struct ObjectiveResult {
  LossBundle losses;
  Mat teacher_logits;       // both views, all tokens (for the centering update)
  Mat teacher_class_probs;  // 2N x K centred and sharpened class-token distributions
};

// Teacher on clean views, student on masked views, all three losses. With
// accumulate_grads, dL/d(student params) is added to the student's grads;
// the teacher is only read. `center` is used as-is, never updated.
ObjectiveResult compute_objective(EncoderState& student, const EncoderState& teacher, const CenterStats& center,
                                  const StepInputs& inputs, const RunConfig& config, double teacher_temp,
                                  bool accumulate_grads);

struct StepReport {
  LossBundle losses;
  double teacher_class_entropy = 0.0;  // mean over 2N class tokens
  double lr = 0.0;
  double ema = 0.0;
  double teacher_temp = 0.0;
};

// One optimizer step on the student, then the EMA teacher update, then the
// centering update. Throws pretrain.non_finite naming the offending loss.
StepReport train_step(const ImageBatch& batch, TrainState& state);
StepReport train_step(const StepInputs& inputs, TrainState& state);

struct PretrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path loss_curve;
  std::vector<StepReport> reports;
};

// Full loop over the manifest's train split. Writes loss_curve.csv,
// periodic checkpoints (ckpt_<step>) and ckpt_final under out_dir.
PretrainResult pretrain(const std::filesystem::path& manifest, const RunConfig& config,
                        const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace dicom

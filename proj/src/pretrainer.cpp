#include "dicom/pretrainer.hpp"

#include "dicom/checkpoint.hpp"
#include "dicom/data/dataset.hpp"
#include "dicom/error.hpp"

#include <cmath>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>

namespace dicom {

ParamList EncoderState::shared_params() {
  ParamList out;
  backbone.collect("backbone.", out);
  projection.collect("projection.", out);
  return out;
}

ParamList EncoderState::all_params() {
  ParamList out = shared_params();
  if (decoder) decoder->collect("decoder.", out);
  return out;
}

EncoderState make_student(const RunConfig& config, Rng& rng) {
  EncoderState s;
  s.role = Role::kStudent;
  s.backbone = VisionTransformer(config.backbone, rng);
  s.projection = ProjectionHead(config.backbone.embed_dim, config.head, rng);
  s.decoder = ReconstructionDecoder(config.backbone, config.head, rng);
  return s;
}

EncoderState make_teacher(const EncoderState& student) {
  EncoderState t;
  t.role = Role::kTeacher;
  t.backbone = student.backbone;
  t.projection = student.projection;
  for (auto& p : t.shared_params()) p.param->zero_grad();
  return t;
}

void ema_update(const ParamList& student, const ParamList& teacher, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("pretrain.ema", "EMA momentum must lie in [0,1]");
  if (student.size() != teacher.size()) throw Error("pretrain.shape", "student and teacher parameter sets differ");
  for (std::size_t i = 0; i < student.size(); ++i) {
    const Mat& theta = student[i].param->value;
    Mat& phi = teacher[i].param->value;
    if (theta.rows() != phi.rows() || theta.cols() != phi.cols()) {
      throw Error("pretrain.shape", "shape mismatch for " + student[i].name + " during EMA update");
    }
    phi = lambda * phi + (1.0 - lambda) * theta;
  }
}

void ema_update(EncoderState& student, EncoderState& teacher, double lambda) {
  ema_update(student.shared_params(), teacher.shared_params(), lambda);
}

TrainState init_train_state(const RunConfig& config, std::int64_t steps_per_epoch, std::int64_t total_steps) {
  config.validate();
  TrainState s;
  s.config = config;
  s.rng = derive_rng(config.seed, 0x1417);
  s.student = make_student(config, s.rng);
  s.teacher = make_teacher(s.student);
  s.center = CenterStats::identity(config.head.K, config.center_momentum);
  s.optimizer = AdamW(s.student.all_params(), config.optim.beta1, config.optim.beta2, config.optim.eps);
  s.steps_per_epoch = std::max<std::int64_t>(1, steps_per_epoch);
  s.total_steps = std::max<std::int64_t>(1, total_steps);
  return s;
}

StepInputs prepare_step(const ImageBatch& batch, const RunConfig& config, std::uint64_t seed, std::int64_t step) {
  validate_batch(batch);
  StepInputs in;
  Rng view_rng = derive_rng(seed, 0xA06, static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32));
  in.views = two_views(batch, config.augment, view_rng);

  Rng mask_rng = derive_rng(seed, 0x3A5C, static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32));
  const int gr = config.backbone.grid_rows();
  const int gc = config.backbone.grid_cols();
  std::vector<TokenMask> m1, m2;
  for (std::size_t i = 0; i < batch.size(); ++i) m1.push_back(sample_group_mask(gr, gc, config.mask, mask_rng));
  for (std::size_t i = 0; i < batch.size(); ++i) m2.push_back(sample_group_mask(gr, gc, config.mask, mask_rng));
  in.masked1 = apply_mask(in.views.view1, m1, config.backbone.patch_size);
  in.masked2 = apply_mask(in.views.view2, m2, config.backbone.patch_size);
  return in;
}

namespace {

Mat class_rows(const Mat& m, int batch, int len) {
  Mat out(batch, m.cols());
  for (int b = 0; b < batch; ++b) out.row(b) = m.row(static_cast<Eigen::Index>(b) * len);
  return out;
}

Mat data_rows(const Mat& m, int batch, int len) {
  const int n = len - 1;
  Mat out(static_cast<Eigen::Index>(batch) * n, m.cols());
  for (int b = 0; b < batch; ++b) {
    out.middleRows(static_cast<Eigen::Index>(b) * n, n) = m.middleRows(static_cast<Eigen::Index>(b) * len + 1, n);
  }
  return out;
}

Vec mask_weights(const std::vector<TokenMask>& masks) {
  std::size_t total = 0;
  for (const auto& m : masks) total += m.size();
  Vec w(static_cast<Eigen::Index>(total));
  Eigen::Index r = 0;
  for (const auto& m : masks) {
    for (auto t : m) w(r++) = t ? 1.0 : 0.0;
  }
  return w;
}

}  // namespace

ObjectiveResult compute_objective(EncoderState& student, const EncoderState& teacher, const CenterStats& center_stats,
                                  const StepInputs& inputs, const RunConfig& config, double teacher_temp,
                                  bool accumulate_grads) {
  if (!student.decoder) throw Error("pretrain.state", "student has no reconstruction decoder");
  Temperatures{config.temp.student, teacher_temp}.validate();

  const ImageBatch* views[2] = {&inputs.views.view1, &inputs.views.view2};
  const MaskPair* masked[2] = {&inputs.masked1, &inputs.masked2};
  const int N = static_cast<int>(views[0]->size());
  const int len = config.backbone.sequence_length();
  const int n = len - 1;
  const bool raw = config.loss.raw;
  const LossWeights& w = config.loss.weights;
  const double tau_s = config.temp.student;

  // Teacher: clean views, no caches, no gradients.
  Mat teacher_logits(2 * static_cast<Eigen::Index>(N) * len, config.head.K);
  for (int v = 0; v < 2; ++v) {
    TokenSequence tok = teacher.backbone.encode(views[v]->images);
    teacher_logits.middleRows(static_cast<Eigen::Index>(v) * N * len, static_cast<Eigen::Index>(N) * len) =
        teacher.projection.forward(tok.tokens);
  }
  CenterStats frozen = center_stats;
  const Mat p_teacher = sharpen(center(teacher_logits, frozen, false), teacher_temp);
  Mat pt[2] = {p_teacher.topRows(static_cast<Eigen::Index>(N) * len), p_teacher.bottomRows(static_cast<Eigen::Index>(N) * len)};

  // Student: masked views.
  VisionTransformer::Cache bcache[2];
  ProjectionHead::Cache pcache[2];
  ReconstructionDecoder::Cache dcache[2];
  Mat zs[2];
  std::vector<Image> recon[2];
  for (int v = 0; v < 2; ++v) {
    TokenSequence tok = student.backbone.encode(masked[v]->corrupted.images, false, accumulate_grads ? &bcache[v] : nullptr);
    zs[v] = student.projection.forward(tok.tokens, accumulate_grads ? &pcache[v] : nullptr);
    recon[v] = student.decoder->reconstruct(tok, accumulate_grads ? &dcache[v] : nullptr);
  }

  // Reconstruction on both views, averaged.
  double l_recons = 0.0;
  std::vector<Mat> drecon[2];
  for (int v = 0; v < 2; ++v) {
    double sum_abs = 0.0;
    double count = 0.0;
    for (int i = 0; i < N; ++i) {
      Mat d;
      sum_abs += recon_loss(views[v]->images[i], recon[v][i], masked[v]->pixel_masks[i], ReconMode::kSum,
                            accumulate_grads ? &d : nullptr);
      count += masked[v]->pixel_masks[i].sum();
      drecon[v].push_back(std::move(d));
    }
    const double scale = raw ? 1.0 : 1.0 / std::max(count, 1.0);
    l_recons += 0.5 * sum_abs * scale;
    if (accumulate_grads) {
      for (auto& d : drecon[v]) d *= 0.5 * scale * w.alpha1;
    }
  }

  // Local loss over masked data tokens of both views.
  Vec weights[2] = {mask_weights(masked[0]->token_masks), mask_weights(masked[1]->token_masks)};
  const double masked_tokens = weights[0].sum() + weights[1].sum();
  const double local_scale = raw ? 1.0 : 1.0 / std::max(masked_tokens, 1.0);
  double l_local = 0.0;
  Mat dlocal[2];
  for (int v = 0; v < 2; ++v) {
    l_local += soft_cross_entropy(data_rows(pt[v], N, len), data_rows(zs[v], N, len), tau_s, weights[v],
                                  accumulate_grads ? &dlocal[v] : nullptr);
  }
  l_local *= local_scale;

  // Global loss: teacher view1 vs student view2 and teacher view2 vs student view1.
  const double global_scale = raw ? 1.0 : 1.0 / N;
  const Vec ones = Vec::Ones(N);
  Mat dglobal[2];
  double l_global = soft_cross_entropy(class_rows(pt[0], N, len), class_rows(zs[1], N, len), tau_s, ones,
                                       accumulate_grads ? &dglobal[1] : nullptr) +
                    soft_cross_entropy(class_rows(pt[1], N, len), class_rows(zs[0], N, len), tau_s, ones,
                                       accumulate_grads ? &dglobal[0] : nullptr);
  l_global *= global_scale;

  ObjectiveResult result;
  result.losses = total_loss(l_recons, l_local, l_global, w);
  result.teacher_class_probs = Mat(2 * N, config.head.K);
  for (int v = 0; v < 2; ++v) result.teacher_class_probs.middleRows(v * N, N) = class_rows(pt[v], N, len);

  if (accumulate_grads) {
    for (int v = 0; v < 2; ++v) {
      Mat dz = Mat::Zero(static_cast<Eigen::Index>(N) * len, config.head.K);
      for (int b = 0; b < N; ++b) {
        const auto row0 = static_cast<Eigen::Index>(b) * len;
        dz.row(row0) = dglobal[v].row(b) * (w.alpha3 * global_scale);
        dz.middleRows(row0 + 1, n) = dlocal[v].middleRows(static_cast<Eigen::Index>(b) * n, n) * (w.alpha2 * local_scale);
      }
      Mat dtokens = student.projection.backward(pcache[v], dz);
      const Mat ddata = student.decoder->backward(dcache[v], drecon[v]);
      for (int b = 0; b < N; ++b) {
        dtokens.middleRows(static_cast<Eigen::Index>(b) * len + 1, n) += ddata.middleRows(static_cast<Eigen::Index>(b) * n, n);
      }
      student.backbone.backward(bcache[v], dtokens);
    }
  }
  result.teacher_logits = std::move(teacher_logits);
  return result;
}

StepReport train_step(const ImageBatch& batch, TrainState& state) {
  return train_step(prepare_step(batch, state.config, state.config.seed, state.step), state);
}

StepReport train_step(const StepInputs& inputs, TrainState& state) {
  const RunConfig& cfg = state.config;
  StepReport report;
  report.teacher_temp = teacher_temperature(state.epoch(), cfg.temp.teacher_start, cfg.temp.teacher_end, cfg.temp.warmup_epochs);

  const ParamList params = state.student.all_params();
  zero_grads(params);
  ObjectiveResult obj = compute_objective(state.student, state.teacher, state.center, inputs, cfg, report.teacher_temp, true);
  report.losses = obj.losses;
  if (!obj.losses.finite()) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << ":";
    if (!std::isfinite(obj.losses.recons)) msg << " L_recons=" << obj.losses.recons;
    if (!std::isfinite(obj.losses.local)) msg << " L_l=" << obj.losses.local;
    if (!std::isfinite(obj.losses.global)) msg << " L_g=" << obj.losses.global;
    msg << " L=" << obj.losses.total;
    throw Error("pretrain.non_finite", msg.str());
  }

  const auto warmup_steps = static_cast<std::int64_t>(std::llround(cfg.optim.warmup_epochs * state.steps_per_epoch));
  report.lr = cosine_schedule(cfg.optim.lr, cfg.optim.min_lr, state.step, state.total_steps, warmup_steps);
  state.optimizer.step(params, report.lr, cfg.optim.weight_decay);
  state.student.projection.renormalize();

  report.ema = ema_momentum(state.step, state.total_steps, cfg.ema.start, cfg.ema.end);
  ema_update(state.student, state.teacher, report.ema);

  center(obj.teacher_logits, state.center, true);

  double h = 0.0;
  for (Eigen::Index r = 0; r < obj.teacher_class_probs.rows(); ++r) h += entropy(obj.teacher_class_probs.row(r));
  report.teacher_class_entropy = h / static_cast<double>(std::max<Eigen::Index>(1, obj.teacher_class_probs.rows()));

  ++state.step;
  return report;
}

namespace {

int prefetch_workers() {
  if (const char* env = std::getenv("DICOM_NUM_WORKERS")) {
    try {
      return std::max(0, std::stoi(env));
    } catch (const std::exception&) {
      throw Error("config.invalid", std::string("DICOM_NUM_WORKERS must be an integer, got '") + env + "'");
    }
  }
  return 0;
}

// Produces StepInputs in step order. Each step's inputs depend only on
// (dataset, config, seed, step), so running them ahead on worker threads
// does not change the result.
class StepSource {
 public:
  StepSource(const Dataset& data, const RunConfig& config, std::int64_t batch_size, std::int64_t steps_per_epoch,
             std::int64_t first, std::int64_t last, int workers)
      : data_(data), config_(config), batch_size_(batch_size), spe_(steps_per_epoch), next_(first), last_(last),
        workers_(workers) {}

  StepInputs next() {
    if (workers_ == 0) return make(next_++);
    while (static_cast<int>(queue_.size()) < workers_ && next_ < last_) {
      const std::int64_t s = next_++;
      queue_.push_back(std::async(std::launch::async, [this, s] { return make(s); }));
    }
    StepInputs out = queue_.front().get();
    queue_.pop_front();
    return out;
  }

 private:
  StepInputs make(std::int64_t step) const {
    const std::int64_t epoch = step / spe_;
    const std::int64_t within = step % spe_;
    const auto order = data_.epoch_order(Split::kTrain, config_.seed, epoch);
    const auto begin = order.begin() + within * batch_size_;
    std::vector<std::size_t> idx(begin, begin + batch_size_);
    return prepare_step(data_.batch(idx), config_, config_.seed, step);
  }

  const Dataset& data_;
  const RunConfig& config_;
  std::int64_t batch_size_;
  std::int64_t spe_;
  std::int64_t next_;
  std::int64_t last_;
  int workers_;
  std::deque<std::future<StepInputs>> queue_;
};

void write_curve_header(std::ostream& out) { out << "step,epoch,L_recons,L_l,L_g,L\n"; }

// Keeps only rows with step <= keep_until (used when resuming).
void trim_curve(const std::filesystem::path& path, std::int64_t keep_until) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= keep_until) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  write_curve_header(out);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

PretrainResult pretrain(const std::filesystem::path& manifest, const RunConfig& config,
                        const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume) {
  config.validate();
  LoadOptions opts;
  opts.height = config.backbone.image_height;
  opts.width = config.backbone.image_width;
  opts.patch_size = config.backbone.patch_size;
  const Dataset data = load_dataset(manifest, opts);
  const auto n_train = static_cast<std::int64_t>(data.indices(Split::kTrain).size());
  if (n_train == 0) throw Error("data.empty_split", "manifest has no train entries: " + manifest.string());

  const std::int64_t batch_size = std::min<std::int64_t>(config.data.batch_size, n_train);
  const std::int64_t spe = std::max<std::int64_t>(1, n_train / batch_size);
  std::int64_t total = spe * config.train.epochs;
  if (config.train.max_steps > 0) total = std::min<std::int64_t>(total, config.train.max_steps);

  TrainState state = init_train_state(config, spe, total);
  if (resume) {
    restore_state(read_checkpoint(*resume), state);
    state.config = config;
    state.steps_per_epoch = spe;
    state.total_steps = total;
  }

  std::filesystem::create_directories(out_dir);
  write_run_metadata(out_dir, config);
  PretrainResult result;
  result.loss_curve = out_dir / "loss_curve.csv";
  if (resume && std::filesystem::exists(result.loss_curve)) {
    trim_curve(result.loss_curve, state.step);
  } else {
    std::ofstream fresh(result.loss_curve, std::ios::trunc);
    write_curve_header(fresh);
  }
  std::ofstream curve(result.loss_curve, std::ios::app);
  if (!curve) throw Error("pretrain.io", "cannot write loss curve: " + result.loss_curve.string());
  curve << std::setprecision(17);

  StepSource source(data, config, batch_size, spe, state.step, total, prefetch_workers());
  while (state.step < total) {
    StepReport r = train_step(source.next(), state);
    curve << state.step << ',' << state.epoch() << ',' << r.losses.recons << ',' << r.losses.local << ','
          << r.losses.global << ',' << r.losses.total << '\n';
    if (!curve) throw Error("pretrain.io", "failed writing loss curve: " + result.loss_curve.string());
    result.reports.push_back(r);
    if (config.train.checkpoint_every > 0 && state.step % config.train.checkpoint_every == 0 && state.step < total) {
      std::ostringstream name;
      name << "ckpt_" << std::setw(6) << std::setfill('0') << state.step;
      curve.flush();
      save_checkpoint(state, out_dir / name.str());
    }
  }
  curve.flush();
  result.final_checkpoint = out_dir / "ckpt_final";
  save_checkpoint(state, result.final_checkpoint);
  return result;
}

}  // namespace dicom

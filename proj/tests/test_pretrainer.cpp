#include "dicom/checkpoint.hpp"
#include "dicom/data/synthetic.hpp"
#include "dicom/pretrainer.hpp"
#include "support.hpp"

#include <cmath>
#include <fstream>

namespace dicom {
namespace {

ImageBatch tiny_batch(Rng& rng, int n, int size = 8) {
  ImageBatch b;
  for (int i = 0; i < n; ++i) {
    b.images.push_back(test::random_image(rng, size, size));
    b.labels.push_back(0);
    b.ids.push_back("p" + std::to_string(i));
  }
  return b;
}

std::vector<Mat> values(const ParamList& params) {
  std::vector<Mat> out;
  for (const auto& p : params) out.push_back(p.param->value);
  return out;
}

double distance(const ParamList& a, const ParamList& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i].param->value - b[i].param->value).squaredNorm();
  return std::sqrt(s);
}

TEST(Ema, EndpointsAndMidpoint) {
  Param theta(2, 3), phi(2, 3);
  theta.value.setZero();
  phi.value.setOnes();
  const ParamList s = {{"w", &theta}}, t = {{"w", &phi}};
  ema_update(s, t, 1.0);
  EXPECT_EQ(phi.value, Mat::Ones(2, 3));
  ema_update(s, t, 0.5);
  EXPECT_EQ(phi.value, Mat::Constant(2, 3, 0.5));
  ema_update(s, t, 0.0);
  EXPECT_EQ(phi.value, theta.value);
}

TEST(Ema, RejectsBadMomentumAndShapes) {
  Param a(2, 2), b(2, 3);
  test::expect_error([&] { ema_update(ParamList{{"a", &a}}, ParamList{{"a", &a}}, 1.5); }, "pretrain.ema");
  test::expect_error([&] { ema_update(ParamList{{"a", &a}}, ParamList{{"b", &b}}, 0.5); }, "pretrain.shape");
}

TEST(EncoderState, TeacherMirrorsStudentWithoutDecoder) {
  const RunConfig cfg = test::tiny_config();
  Rng rng(1);
  EncoderState s = make_student(cfg, rng);
  EncoderState t = make_teacher(s);
  EXPECT_TRUE(s.decoder.has_value());
  EXPECT_FALSE(t.decoder.has_value());
  const ParamList sp = s.shared_params(), tp = t.shared_params();
  ASSERT_EQ(sp.size(), tp.size());
  for (std::size_t i = 0; i < sp.size(); ++i) {
    EXPECT_EQ(sp[i].name, tp[i].name);
    EXPECT_EQ(sp[i].param->value, tp[i].param->value);
  }
}

RunConfig zero_objective_config(double wd) {
  RunConfig cfg = test::tiny_config();
  cfg.loss.weights = {0.0, 0.0, 0.0};
  cfg.optim.weight_decay = wd;
  cfg.optim.warmup_epochs = 0;
  return cfg;
}

TEST(TrainStep, ZeroObjectiveWithoutDecayLeavesStudent) {
  TrainState st = init_train_state(zero_objective_config(0.0), 1, 10);
  // Move the teacher off the student so the EMA update is observable.
  for (auto& p : st.teacher.shared_params()) p.param->value.array() += 1.0;
  const auto student_before = values(st.student.all_params());
  const auto teacher_before = values(st.teacher.shared_params());
  Rng rng(2);
  const StepReport r = train_step(tiny_batch(rng, 2), st);
  EXPECT_EQ(r.losses.total, 0.0);
  EXPECT_EQ(values(st.student.all_params()), student_before);
  const auto sp = st.student.shared_params();
  const auto tp = st.teacher.shared_params();
  for (std::size_t i = 0; i < tp.size(); ++i) {
    EXPECT_EQ(tp[i].param->value, (r.ema * teacher_before[i] + (1.0 - r.ema) * sp[i].param->value).eval()) << tp[i].name;
  }
  EXPECT_EQ(st.step, 1);
}

TEST(TrainStep, ZeroObjectiveWithDecayOnlyShrinksDecayedWeights) {
  const RunConfig cfg = zero_objective_config(0.04);
  TrainState st = init_train_state(cfg, 1, 10);
  const auto before = values(st.student.all_params());
  Rng rng(3);
  const StepReport r = train_step(tiny_batch(rng, 2), st);
  const auto params = st.student.all_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double factor = params[i].param->decay ? 1.0 - r.lr * cfg.optim.weight_decay : 1.0;
    EXPECT_LT((params[i].param->value - factor * before[i]).cwiseAbs().maxCoeff(), 1e-15) << params[i].name;
  }
}

TEST(TrainStep, IdenticalStatesAndInputsGiveIdenticalResults) {
  const RunConfig cfg = test::tiny_config();
  Rng rng(4);
  const ImageBatch batch = tiny_batch(rng, 3);
  TrainState a = init_train_state(cfg, 2, 10);
  TrainState b = init_train_state(cfg, 2, 10);
  for (int i = 0; i < 3; ++i) {
    const StepReport ra = train_step(batch, a);
    const StepReport rb = train_step(batch, b);
    EXPECT_EQ(ra.losses.total, rb.losses.total);
  }
  EXPECT_EQ(values(a.student.all_params()), values(b.student.all_params()));
  EXPECT_EQ(values(a.teacher.shared_params()), values(b.teacher.shared_params()));
  EXPECT_EQ(a.center.mean, b.center.mean);
  EXPECT_EQ(a.center.std, b.center.std);
}

TEST(TrainStep, KeepsWeightRowsUnitAndLossesFinite) {
  RunConfig cfg = test::tiny_config();
  cfg.optim.lr = 1e-2;
  TrainState st = init_train_state(cfg, 1, 5);
  Rng rng(5);
  for (int i = 0; i < 3; ++i) {
    const StepReport r = train_step(tiny_batch(rng, 2), st);
    EXPECT_TRUE(r.losses.finite());
    EXPECT_EQ(r.losses.total, r.losses.recons + r.losses.local + r.losses.global);
  }
  const Mat& w = st.student.projection.last.weight.value;
  for (Eigen::Index k = 0; k < w.rows(); ++k) EXPECT_NEAR(w.row(k).norm(), 1.0, 1e-12);
  EXPECT_NE(st.center.mean, RowVec::Zero(cfg.head.K));
}

TEST(TrainStep, TeacherReceivesNoGradient) {
  TrainState st = init_train_state(test::tiny_config(), 1, 5);
  Rng rng(6);
  train_step(tiny_batch(rng, 2), st);
  for (auto& p : st.teacher.shared_params()) EXPECT_EQ(p.param->grad.cwiseAbs().maxCoeff(), 0.0) << p.name;
}

TEST(TrainStep, FrozenMomentumKeepsTeacherOutputsConstant) {
  RunConfig cfg = test::tiny_config();
  cfg.ema = {1.0, 1.0};
  cfg.optim.lr = 1e-2;
  TrainState st = init_train_state(cfg, 1, 10);
  Rng rng(7);
  const ImageBatch probe = tiny_batch(rng, 2);
  auto teacher_out = [&] { return st.teacher.projection.forward(st.teacher.backbone.encode(probe.images).tokens); };
  const Mat before = teacher_out();
  const auto student_before = values(st.student.all_params());
  for (int i = 0; i < 4; ++i) train_step(tiny_batch(rng, 2), st);
  EXPECT_EQ(teacher_out(), before);
  EXPECT_NE(values(st.student.all_params()), student_before);
}

TEST(TrainStep, DriftShrinksGeometricallyWhenStudentIsPaused) {
  const RunConfig cfg = test::tiny_config();
  Rng rng(8);
  EncoderState s = make_student(cfg, rng);
  EncoderState t = make_teacher(s);
  for (auto& p : t.shared_params()) p.param->value += test::random_matrix(rng, p.param->value.rows(), p.param->value.cols());
  const double lambda = 0.9;
  const double initial = distance(s.shared_params(), t.shared_params());
  double prev = initial;
  for (int i = 0; i < 30; ++i) {
    ema_update(s, t, lambda);
    const double d = distance(s.shared_params(), t.shared_params());
    EXPECT_LT(d, prev);
    EXPECT_NEAR(d / prev, lambda, 1e-9);
    prev = d;
  }
  EXPECT_NEAR(prev, initial * std::pow(lambda, 30), 1e-9 * initial);
}

TEST(TrainStep, NonFiniteLossAbortsNamingComponent) {
  TrainState st = init_train_state(test::tiny_config(), 1, 5);
  st.student.decoder->recover_bias.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Rng rng(9);
  const std::string msg = test::expect_error([&] { train_step(tiny_batch(rng, 2), st); }, "pretrain.non_finite");
  EXPECT_NE(msg.find("L_recons"), std::string::npos);
  EXPECT_EQ(msg.find("L_g="), std::string::npos);
}

TEST(PrepareStep, PureFunctionOfSeedAndStep) {
  const RunConfig cfg = test::tiny_config();
  Rng rng(10);
  const ImageBatch b = tiny_batch(rng, 3);
  const StepInputs x = prepare_step(b, cfg, 1, 4);
  const StepInputs y = prepare_step(b, cfg, 1, 4);
  const StepInputs z = prepare_step(b, cfg, 1, 5);
  EXPECT_EQ(x.masked1.token_masks, y.masked1.token_masks);
  EXPECT_EQ(x.views.view2.images, y.views.view2.images);
  EXPECT_NE(x.views.view1.images, z.views.view1.images);
  EXPECT_EQ(x.views.view1.ids, b.ids);
  // Independent masks for the two views.
  EXPECT_NE(x.masked1.token_masks, x.masked2.token_masks);
}

RunConfig tiny_pretrain_config() {
  RunConfig cfg = test::tiny_config();
  cfg.backbone.image_height = cfg.backbone.image_width = 16;
  cfg.data.batch_size = 4;
  cfg.train.epochs = 1;
  cfg.optim.warmup_epochs = 0;
  return cfg;
}

TEST(Pretrain, WritesCurveAndFinalCheckpoint) {
  test::TempDir dir;
  generate_synthetic({2, 7, 16, 16, 3, 4}, dir / "data");
  const RunConfig cfg = tiny_pretrain_config();
  const PretrainResult r = pretrain(dir / "data/manifest.csv", cfg, dir / "run");
  // 10 train images, batch 4 -> 2 steps per epoch.
  EXPECT_EQ(r.reports.size(), 2u);
  std::ifstream curve(r.loss_curve);
  std::string header;
  std::getline(curve, header);
  EXPECT_EQ(header, "step,epoch,L_recons,L_l,L_g,L");
  int rows = 0;
  for (std::string line; std::getline(curve, line);) rows += !line.empty();
  EXPECT_EQ(rows, 2);
  EXPECT_TRUE(std::filesystem::exists(r.final_checkpoint / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run/config.resolved.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run/version.txt"));
  const TrainState loaded = load_checkpoint(r.final_checkpoint);
  EXPECT_EQ(loaded.step, 2);
}

}  // namespace
}  // namespace dicom

#include "dicom/classification.hpp"

#include "dicom/analysis.hpp"
#include "dicom/checkpoint.hpp"
#include "dicom/error.hpp"
#include "dicom/metrics.hpp"
#include "dicom/optim.hpp"

#include <algorithm>
#include <cmath>

namespace dicom {

using nlohmann::json;

namespace {

std::vector<std::size_t> labeled(const Dataset& data, Split split) {
  std::vector<std::size_t> out;
  for (auto i : data.indices(split)) {
    if (data.manifest().entries[i].label >= 0) out.push_back(i);
  }
  return out;
}

std::vector<int> labels_of(const Dataset& data, const std::vector<std::size_t>& rows) {
  std::vector<int> out;
  for (auto i : rows) out.push_back(data.manifest().entries[i].label);
  return out;
}

// Mean softmax cross-entropy; dlogits receives its gradient.
double softmax_xent(const Mat& logits, std::span<const int> labels, Mat* dlogits) {
  const Mat probs = nn::softmax_rows(logits);
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) loss -= std::log(std::max(probs(static_cast<Eigen::Index>(i), labels[i]), 1e-300));
  if (dlogits) {
    *dlogits = probs;
    for (std::size_t i = 0; i < labels.size(); ++i) (*dlogits)(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
    *dlogits *= inv;
  }
  return loss * inv;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = derive_rng(seed, 0xC1A5, static_cast<std::uint32_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

Mat gather_rows(const Mat& m, std::span<const std::size_t> rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace

ClassMetrics evaluate_probabilities(const Mat& probs, std::span<const int> labels) {
  ClassMetrics m;
  const auto classes = probs.cols();
  m.count = labels.size();
  m.confusion = Eigen::MatrixXi::Zero(classes, classes);
  if (labels.empty()) return m;
  std::vector<int> preds(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Eigen::Index arg = 0;
    probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    preds[i] = static_cast<int>(arg);
    m.confusion(labels[i], preds[i]) += 1;
  }
  m.accuracy = accuracy(preds, labels);
  try {
    if (classes == 2) {
      std::vector<double> s(labels.size());
      for (std::size_t i = 0; i < labels.size(); ++i) s[i] = probs(static_cast<Eigen::Index>(i), 1);
      m.aupr = aupr(s, labels);
      m.auc = auc(s, labels);
    } else {
      m.aupr = macro_aupr(probs, labels);
      m.auc = macro_auc(probs, labels);
    }
  } catch (const Error& e) {
    if (e.code() != "metrics.undefined") throw;
  }
  return m;
}

std::vector<double> EvalReport::val_aupr_curve() const {
  std::vector<double> out;
  for (const auto& e : epochs) {
    if (e.val && e.val->aupr) out.push_back(*e.val->aupr);
  }
  return out;
}

json to_json(const ClassMetrics& m) {
  json j;
  j["ACC"] = m.accuracy;
  j["AUPR"] = m.aupr ? json(*m.aupr) : json(nullptr);
  j["AUC"] = m.auc ? json(*m.auc) : json(nullptr);
  j["count"] = m.count;
  json conf = json::array();
  for (Eigen::Index r = 0; r < m.confusion.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.confusion.cols(); ++c) row.push_back(m.confusion(r, c));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  return j;
}

json to_json(const EvalReport& r) {
  json j;
  j["mode"] = r.mode;
  j["classes"] = r.classes;
  j["test"] = to_json(r.test);
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val", e.val ? to_json(*e.val) : json(nullptr)}});
  }
  j["epochs"] = epochs;
  j["SoC"] = r.soc ? json(*r.soc) : json(nullptr);
  j["config_fingerprint"] = r.config_fingerprint;
  if (!r.backbone_hash_before.empty()) {
    j["backbone_hash_before"] = r.backbone_hash_before;
    j["backbone_hash_after"] = r.backbone_hash_after;
  }
  return j;
}

int resolve_classes(const Dataset& data) {
  const auto& m = data.manifest();
  int classes = m.class_names.empty() ? 0 : m.class_names.rbegin()->first + 1;
  int max_label = -1;
  for (const auto& e : m.entries) max_label = std::max(max_label, e.label);
  if (m.class_names.empty()) classes = max_label + 1;
  if (max_label >= classes) {
    throw Error("classification.class_mismatch", "label " + std::to_string(max_label) + " exceeds the " +
                                                     std::to_string(classes) + " classes named by the manifest");
  }
  if (classes < 2) throw Error("classification.class_mismatch", "classification needs at least two classes");
  return classes;
}

EvalReport fit_linear_probe(const LabeledFeatures& train, const LabeledFeatures& val, const LabeledFeatures& test,
                            int classes, const ProbeConfig& cfg, std::uint64_t seed) {
  if (train.labels.empty()) throw Error("classification.empty", "probe needs at least one training example");
  for (const auto* split : {&train, &val, &test}) {
    for (int l : split->labels) {
      if (l < 0 || l >= classes) throw Error("classification.class_mismatch", "label " + std::to_string(l) + " out of range");
    }
  }
  Rng rng = derive_rng(seed, 0x960BE);
  nn::Linear head(static_cast<int>(train.features.cols()), classes, true, rng);
  head.weight.value.setZero();
  ParamList params;
  head.collect("head.", params);
  AdamW opt(params);

  EvalReport report;
  report.mode = "probe";
  report.classes = classes;
  const auto n = train.labels.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  const std::int64_t total = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(bs, n - start));
      const Mat x = gather_rows(train.features, rows);
      std::vector<int> y;
      for (auto r : rows) y.push_back(train.labels[r]);
      zero_grads(params);
      Mat dlogits;
      loss_sum += softmax_xent(head.forward(x), y, &dlogits) * static_cast<double>(rows.size());
      head.accumulate(x, dlogits);
      opt.step(params, cosine_schedule(cfg.lr, 0.0, step++, total, 0), cfg.weight_decay);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(n);
    if (!val.labels.empty()) rec.val = evaluate_probabilities(nn::softmax_rows(head.forward(val.features)), val.labels);
    report.epochs.push_back(std::move(rec));
  }
  if (!test.labels.empty()) report.test = evaluate_probabilities(nn::softmax_rows(head.forward(test.features)), test.labels);
  const auto curve = report.val_aupr_curve();
  if (!curve.empty()) report.soc = soc(curve);
  return report;
}

Mat class_token_features(const VisionTransformer& backbone, const Dataset& data, const std::vector<std::size_t>& rows,
                         std::size_t chunk) {
  Mat out(static_cast<Eigen::Index>(rows.size()), backbone.config().embed_dim);
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::vector<std::size_t> part(rows.begin() + start, rows.begin() + std::min(rows.size(), start + chunk));
    const TokenSequence tok = backbone.encode(data.batch(part).images);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(part.size())) = tok.class_tokens();
  }
  return out;
}

std::string backbone_hash(VisionTransformer& backbone) {
  ParamList params;
  backbone.collect("", params);
  std::string bytes;
  for (const auto& p : params) {
    bytes.append(reinterpret_cast<const char*>(p.param->value.data()),
                 static_cast<std::size_t>(p.param->value.size()) * sizeof(double));
  }
  return sha256_hex(bytes.data(), bytes.size());
}

EvalReport linear_probe(VisionTransformer& backbone, const Dataset& data, const RunConfig& config) {
  const int classes = resolve_classes(data);
  const std::string before = backbone_hash(backbone);
  auto features = [&](Split s) {
    const auto rows = labeled(data, s);
    return LabeledFeatures{class_token_features(backbone, data, rows), labels_of(data, rows)};
  };
  EvalReport report = fit_linear_probe(features(Split::kTrain), features(Split::kVal), features(Split::kTest), classes,
                                       config.probe, config.seed);
  report.backbone_hash_before = before;
  report.backbone_hash_after = backbone_hash(backbone);
  report.config_fingerprint = config_fingerprint(config);
  return report;
}

EvalReport fine_tune(VisionTransformer backbone, const Dataset& data, const RunConfig& config) {
  const int classes = resolve_classes(data);
  const FinetuneConfig& cfg = config.finetune;
  Rng rng = derive_rng(config.seed, 0xF17E);
  nn::Linear head(backbone.config().embed_dim, classes, true, rng);

  ParamList params;
  backbone.collect("backbone.", params);
  const std::size_t n_backbone = params.size();
  head.collect("head.", params);
  std::vector<double> lr_scales(params.size(), 1.0);
  for (std::size_t i = n_backbone; i < params.size(); ++i) lr_scales[i] = cfg.lr_head / cfg.lr_backbone;
  AdamW opt(params);

  const auto train_rows = labeled(data, Split::kTrain);
  const auto val_rows = labeled(data, Split::kVal);
  const auto test_rows = labeled(data, Split::kTest);
  if (train_rows.empty()) throw Error("classification.empty", "fine-tuning needs labeled training images");
  const auto val_labels = labels_of(data, val_rows);

  EvalReport report;
  report.mode = "finetune";
  report.classes = classes;
  report.config_fingerprint = config_fingerprint(config);

  const auto n = train_rows.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  const std::int64_t total = steps_per_epoch * cfg.epochs;
  const int len = backbone.config().sequence_length();
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, config.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<std::size_t> rows;
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) rows.push_back(train_rows[order[k]]);
      const ImageBatch batch = data.batch(rows);
      zero_grads(params);
      VisionTransformer::Cache cache;
      const TokenSequence tok = backbone.encode(batch.images, false, &cache);
      const Mat cls = tok.class_tokens();
      Mat dlogits;
      loss_sum += softmax_xent(head.forward(cls), batch.labels, &dlogits) * static_cast<double>(rows.size());
      const Mat dcls = head.backward(cls, dlogits);
      Mat dtokens = Mat::Zero(tok.tokens.rows(), tok.tokens.cols());
      for (int b = 0; b < tok.batch; ++b) dtokens.row(static_cast<Eigen::Index>(b) * len) = dcls.row(b);
      backbone.backward(cache, dtokens);
      opt.step(params, cosine_schedule(cfg.lr_backbone, 0.0, step++, total, 0), cfg.weight_decay, lr_scales);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(n);
    if (!val_rows.empty()) {
      rec.val = evaluate_probabilities(nn::softmax_rows(head.forward(class_token_features(backbone, data, val_rows))), val_labels);
    }
    report.epochs.push_back(std::move(rec));
  }
  if (!test_rows.empty()) {
    report.test = evaluate_probabilities(nn::softmax_rows(head.forward(class_token_features(backbone, data, test_rows))),
                                         labels_of(data, test_rows));
  }
  const auto curve = report.val_aupr_curve();
  if (!curve.empty()) report.soc = soc(curve);
  return report;
}

}  // namespace dicom

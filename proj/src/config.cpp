#include "dicom/config.hpp"

#include "dicom/error.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace dicom {

using nlohmann::json;

namespace {

json aug_to_json(const AugPolicy& a) {
  return {{"crop", a.crop},
          {"crop_scale_min", a.crop_scale_min},
          {"crop_scale_max", a.crop_scale_max},
          {"rotation", a.rotation},
          {"rotation_deg", a.rotation_deg},
          {"jitter", a.jitter},
          {"brightness", a.brightness},
          {"contrast", a.contrast}};
}

bool is_integer_json(const json& j) { return j.is_number_integer() || j.is_number_unsigned(); }

// Reports keys of `given` absent from `reference` and values whose JSON type
// differs from the reference type.
void check_shape(const json& reference, const json& given, const std::string& path, std::vector<std::string>& errors) {
  if (!given.is_object()) {
    errors.push_back((path.empty() ? std::string("<root>") : path) + ": expected an object");
    return;
  }
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) {
      errors.push_back(key + ": unknown key");
      continue;
    }
    const json& ref = reference.at(it.key());
    const json& val = it.value();
    if (ref.is_object()) {
      check_shape(ref, val, key, errors);
    } else if (ref.is_boolean()) {
      if (!val.is_boolean()) errors.push_back(key + ": expected a boolean");
    } else if (is_integer_json(ref)) {
      if (!is_integer_json(val)) errors.push_back(key + ": expected an integer");
    } else if (ref.is_number()) {
      if (!val.is_number()) errors.push_back(key + ": expected a number");
    } else if (ref.is_string()) {
      if (!val.is_string()) errors.push_back(key + ": expected a string");
    } else if (ref.is_array()) {
      if (!val.is_array()) {
        errors.push_back(key + ": expected an array");
      } else {
        for (const auto& el : val) {
          if (!is_integer_json(el)) {
            errors.push_back(key + ": expected an array of integers");
            break;
          }
        }
      }
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void in_range(std::vector<std::string>& v, const std::string& key, double value, double lo, double hi,
              const std::string& range_text) {
  if (!(value >= lo && value <= hi)) {
    std::ostringstream s;
    s << key << " = " << value << " violates " << range_text;
    v.push_back(s.str());
  }
}

void positive(std::vector<std::string>& v, const std::string& key, double value) {
  if (!(value > 0)) v.push_back(key + " must be positive");
}

}  // namespace

json to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"device", c.device},
      {"data", {{"manifest", c.data.manifest}, {"batch_size", c.data.batch_size}}},
      {"augment", aug_to_json(c.augment)},
      {"backbone",
       {{"patch_size", c.backbone.patch_size},
        {"embed_dim", c.backbone.embed_dim},
        {"depth", c.backbone.depth},
        {"heads", c.backbone.heads},
        {"mlp_ratio", c.backbone.mlp_ratio},
        {"image_size", {c.backbone.image_height, c.backbone.image_width}}}},
      {"mask", {{"ratio", c.mask.ratio}, {"mean_block_side", c.mask.mean_block_side}}},
      {"head", {{"K", c.head.K}, {"bottleneck", c.head.bottleneck}, {"hidden", c.head.hidden}}},
      {"loss",
       {{"alpha1", c.loss.weights.alpha1},
        {"alpha2", c.loss.weights.alpha2},
        {"alpha3", c.loss.weights.alpha3},
        {"raw", c.loss.raw}}},
      {"temp",
       {{"student", c.temp.student},
        {"teacher_start", c.temp.teacher_start},
        {"teacher_end", c.temp.teacher_end},
        {"warmup_epochs", c.temp.warmup_epochs}}},
      {"center", {{"momentum", c.center_momentum}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"min_lr", c.optim.min_lr},
        {"weight_decay", c.optim.weight_decay},
        {"warmup_epochs", c.optim.warmup_epochs},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps}}},
      {"ema", {{"start", c.ema.start}, {"end", c.ema.end}}},
      {"train",
       {{"epochs", c.train.epochs}, {"max_steps", c.train.max_steps}, {"checkpoint_every", c.train.checkpoint_every}}},
      {"probe",
       {{"epochs", c.probe.epochs},
        {"lr", c.probe.lr},
        {"weight_decay", c.probe.weight_decay},
        {"batch_size", c.probe.batch_size}}},
      {"finetune",
       {{"epochs", c.finetune.epochs},
        {"lr_backbone", c.finetune.lr_backbone},
        {"lr_head", c.finetune.lr_head},
        {"weight_decay", c.finetune.weight_decay},
        {"batch_size", c.finetune.batch_size}}},
      {"segment",
       {{"epochs", c.segment.epochs},
        {"skip_layers", c.segment.skip_layers},
        {"channels", c.segment.channels},
        {"classes", c.segment.classes},
        {"lr_backbone", c.segment.lr_backbone},
        {"lr_decoder", c.segment.lr_decoder},
        {"weight_decay", c.segment.weight_decay},
        {"batch_size", c.segment.batch_size}}},
      {"cluster", {{"restarts", c.cluster.restarts}, {"max_iter", c.cluster.max_iter}, {"tol", c.cluster.tol}}},
  };
}

std::vector<std::string> RunConfig::violations() const {
  std::vector<std::string> v;
  if (data.batch_size < 1) v.push_back("data.batch_size must be >= 1");

  in_range(v, "augment.crop_scale_min", augment.crop_scale_min, 1e-6, 1.0, "(0,1]");
  in_range(v, "augment.crop_scale_max", augment.crop_scale_max, augment.crop_scale_min, 1.0, "[crop_scale_min,1]");
  in_range(v, "augment.rotation_deg", augment.rotation_deg, 0.0, 180.0, "[0,180]");
  in_range(v, "augment.brightness", augment.brightness, 0.0, 0.999, "[0,1)");
  in_range(v, "augment.contrast", augment.contrast, 0.0, 0.999, "[0,1)");

  if (backbone.patch_size <= 0) v.push_back("backbone.patch_size must be positive");
  if (backbone.patch_size > 0 &&
      (backbone.image_height % backbone.patch_size != 0 || backbone.image_width % backbone.patch_size != 0)) {
    v.push_back("backbone.image_size must be divisible by backbone.patch_size");
  }
  if (backbone.image_height <= 0 || backbone.image_width <= 0) v.push_back("backbone.image_size must be positive");
  if (backbone.embed_dim <= 0) v.push_back("backbone.embed_dim must be positive");
  if (backbone.heads <= 0 || (backbone.embed_dim > 0 && backbone.embed_dim % backbone.heads != 0)) {
    v.push_back("backbone.embed_dim must be divisible by backbone.heads");
  }
  if (backbone.depth <= 0) v.push_back("backbone.depth must be positive");
  positive(v, "backbone.mlp_ratio", backbone.mlp_ratio);

  in_range(v, "mask.ratio", mask.ratio, 0.0, 1.0, "the [0,1] constraint");
  if (!(mask.mean_block_side >= 1.0)) v.push_back("mask.mean_block_side must be >= 1");

  if (head.K < 1) v.push_back("head.K must be >= 1");
  if (head.bottleneck < 1) v.push_back("head.bottleneck must be >= 1");
  if (head.hidden < 1) v.push_back("head.hidden must be >= 1");

  for (const auto& [key, a] : {std::pair{"loss.alpha1", loss.weights.alpha1}, std::pair{"loss.alpha2", loss.weights.alpha2},
                               std::pair{"loss.alpha3", loss.weights.alpha3}}) {
    if (!(a >= 0.0)) v.push_back(std::string(key) + " must be >= 0");
  }

  positive(v, "temp.student", temp.student);
  if (!(temp.teacher_start > 0.0 && temp.teacher_start < temp.student)) {
    v.push_back("temp.teacher_start must satisfy 0 < teacher_start < student");
  }
  if (!(temp.teacher_end > 0.0 && temp.teacher_end < temp.student)) {
    v.push_back("temp.teacher_end must satisfy 0 < teacher_end < student");
  }
  if (!(temp.warmup_epochs >= 0.0)) v.push_back("temp.warmup_epochs must be >= 0");

  in_range(v, "center.momentum", center_momentum, 0.0, 1.0, "[0,1]");

  positive(v, "optim.lr", optim.lr);
  if (!(optim.min_lr >= 0.0)) v.push_back("optim.min_lr must be >= 0");
  if (!(optim.weight_decay >= 0.0)) v.push_back("optim.weight_decay must be >= 0");
  if (!(optim.warmup_epochs >= 0.0)) v.push_back("optim.warmup_epochs must be >= 0");
  in_range(v, "optim.beta1", optim.beta1, 0.0, 0.999999, "[0,1)");
  in_range(v, "optim.beta2", optim.beta2, 0.0, 0.999999, "[0,1)");
  positive(v, "optim.eps", optim.eps);

  in_range(v, "ema.start", ema.start, 0.0, 1.0, "[0,1]");
  in_range(v, "ema.end", ema.end, ema.start, 1.0, "[ema.start,1]");

  if (train.epochs < 1) v.push_back("train.epochs must be >= 1");
  if (train.max_steps < 0) v.push_back("train.max_steps must be >= 0");
  if (train.checkpoint_every < 0) v.push_back("train.checkpoint_every must be >= 0");

  if (probe.epochs < 1) v.push_back("probe.epochs must be >= 1");
  positive(v, "probe.lr", probe.lr);
  if (probe.batch_size < 1) v.push_back("probe.batch_size must be >= 1");

  if (finetune.epochs < 1) v.push_back("finetune.epochs must be >= 1");
  positive(v, "finetune.lr_backbone", finetune.lr_backbone);
  positive(v, "finetune.lr_head", finetune.lr_head);
  if (finetune.batch_size < 1) v.push_back("finetune.batch_size must be >= 1");

  if (segment.epochs < 1) v.push_back("segment.epochs must be >= 1");
  if (segment.classes < 2) v.push_back("segment.classes must be >= 2");
  if (segment.batch_size < 1) v.push_back("segment.batch_size must be >= 1");
  positive(v, "segment.lr_backbone", segment.lr_backbone);
  positive(v, "segment.lr_decoder", segment.lr_decoder);
  for (int c : segment.channels) {
    if (c < 1) v.push_back("segment.channels entries must be positive");
  }
  if (backbone.depth > 0) {
    const auto taps = resolved_skip_layers();
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] < 1 || taps[i] > backbone.depth) v.push_back("segment.skip_layers must lie within [1, backbone.depth]");
      if (i > 0 && taps[i] <= taps[i - 1]) v.push_back("segment.skip_layers must be strictly increasing");
    }
    if (taps.size() < 2) v.push_back("segment.skip_layers needs at least two taps");
    if (taps.size() >= 2 && segment.channels.size() != taps.size() - 1) {
      v.push_back("segment.channels needs one width per decoder stage (skip_layers - 1)");
    }
    if (taps.size() >= 2 && backbone.patch_size > 0 && upsample_factor(backbone.patch_size, static_cast<int>(taps.size()) - 1) == 0) {
      v.push_back("backbone.patch_size must equal u^(skip_layers - 1) for some integer upsampling factor u");
    }
  }

  if (cluster.restarts < 1) v.push_back("cluster.restarts must be >= 1");
  if (cluster.max_iter < 1) v.push_back("cluster.max_iter must be >= 1");
  if (!(cluster.tol >= 0.0)) v.push_back("cluster.tol must be >= 0");
  return v;
}

int upsample_factor(int patch_size, int stages) {
  for (int u = 1; u <= patch_size; ++u) {
    long long total = 1;
    for (int s = 0; s < stages; ++s) total *= u;
    if (total == patch_size) return u;
    if (total > patch_size) break;
  }
  return 0;
}

std::vector<int> RunConfig::resolved_skip_layers() const {
  if (!segment.skip_layers.empty()) return segment.skip_layers;
  const int d = backbone.depth;
  return {std::max(1, d / 4), std::max(1, d / 2), std::max(1, (3 * d) / 4), d};
}

void RunConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::ostringstream msg;
  msg << "invalid configuration (" << v.size() << " problem" << (v.size() == 1 ? "" : "s") << "): ";
  for (std::size_t i = 0; i < v.size(); ++i) msg << (i ? "; " : "") << v[i];
  throw Error("config.invalid", msg.str());
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  std::vector<std::string> errors;
  const json reference = to_json(c);
  check_shape(reference, j, "", errors);
  if (!errors.empty()) {
    std::ostringstream msg;
    msg << "invalid configuration: ";
    for (std::size_t i = 0; i < errors.size(); ++i) msg << (i ? "; " : "") << errors[i];
    throw Error("config.invalid", msg.str());
  }

  read(j, "seed", c.seed);
  read(j, "out_dir", c.out_dir);
  read(j, "device", c.device);
  if (j.contains("data")) {
    const auto& s = j["data"];
    read(s, "manifest", c.data.manifest);
    read(s, "batch_size", c.data.batch_size);
  }
  if (j.contains("augment")) {
    const auto& s = j["augment"];
    read(s, "crop", c.augment.crop);
    read(s, "crop_scale_min", c.augment.crop_scale_min);
    read(s, "crop_scale_max", c.augment.crop_scale_max);
    read(s, "rotation", c.augment.rotation);
    read(s, "rotation_deg", c.augment.rotation_deg);
    read(s, "jitter", c.augment.jitter);
    read(s, "brightness", c.augment.brightness);
    read(s, "contrast", c.augment.contrast);
  }
  if (j.contains("backbone")) {
    const auto& s = j["backbone"];
    read(s, "patch_size", c.backbone.patch_size);
    read(s, "embed_dim", c.backbone.embed_dim);
    read(s, "depth", c.backbone.depth);
    read(s, "heads", c.backbone.heads);
    read(s, "mlp_ratio", c.backbone.mlp_ratio);
    if (s.contains("image_size")) {
      const auto& sz = s["image_size"];
      if (sz.size() != 2) {
        errors.push_back("backbone.image_size: expected [H, W]");
      } else {
        c.backbone.image_height = sz[0].get<int>();
        c.backbone.image_width = sz[1].get<int>();
      }
    }
  }
  if (j.contains("mask")) {
    read(j["mask"], "ratio", c.mask.ratio);
    read(j["mask"], "mean_block_side", c.mask.mean_block_side);
  }
  if (j.contains("head")) {
    read(j["head"], "K", c.head.K);
    read(j["head"], "bottleneck", c.head.bottleneck);
    read(j["head"], "hidden", c.head.hidden);
  }
  if (j.contains("loss")) {
    read(j["loss"], "alpha1", c.loss.weights.alpha1);
    read(j["loss"], "alpha2", c.loss.weights.alpha2);
    read(j["loss"], "alpha3", c.loss.weights.alpha3);
    read(j["loss"], "raw", c.loss.raw);
  }
  if (j.contains("temp")) {
    read(j["temp"], "student", c.temp.student);
    read(j["temp"], "teacher_start", c.temp.teacher_start);
    read(j["temp"], "teacher_end", c.temp.teacher_end);
    read(j["temp"], "warmup_epochs", c.temp.warmup_epochs);
  }
  if (j.contains("center")) read(j["center"], "momentum", c.center_momentum);
  if (j.contains("optim")) {
    const auto& s = j["optim"];
    read(s, "lr", c.optim.lr);
    read(s, "min_lr", c.optim.min_lr);
    read(s, "weight_decay", c.optim.weight_decay);
    read(s, "warmup_epochs", c.optim.warmup_epochs);
    read(s, "beta1", c.optim.beta1);
    read(s, "beta2", c.optim.beta2);
    read(s, "eps", c.optim.eps);
  }
  if (j.contains("ema")) {
    read(j["ema"], "start", c.ema.start);
    read(j["ema"], "end", c.ema.end);
  }
  if (j.contains("train")) {
    read(j["train"], "epochs", c.train.epochs);
    read(j["train"], "max_steps", c.train.max_steps);
    read(j["train"], "checkpoint_every", c.train.checkpoint_every);
  }
  if (j.contains("probe")) {
    const auto& s = j["probe"];
    read(s, "epochs", c.probe.epochs);
    read(s, "lr", c.probe.lr);
    read(s, "weight_decay", c.probe.weight_decay);
    read(s, "batch_size", c.probe.batch_size);
  }
  if (j.contains("finetune")) {
    const auto& s = j["finetune"];
    read(s, "epochs", c.finetune.epochs);
    read(s, "lr_backbone", c.finetune.lr_backbone);
    read(s, "lr_head", c.finetune.lr_head);
    read(s, "weight_decay", c.finetune.weight_decay);
    read(s, "batch_size", c.finetune.batch_size);
  }
  if (j.contains("segment")) {
    const auto& s = j["segment"];
    read(s, "epochs", c.segment.epochs);
    read(s, "skip_layers", c.segment.skip_layers);
    read(s, "channels", c.segment.channels);
    read(s, "classes", c.segment.classes);
    read(s, "lr_backbone", c.segment.lr_backbone);
    read(s, "lr_decoder", c.segment.lr_decoder);
    read(s, "weight_decay", c.segment.weight_decay);
    read(s, "batch_size", c.segment.batch_size);
  }
  if (j.contains("cluster")) {
    read(j["cluster"], "restarts", c.cluster.restarts);
    read(j["cluster"], "max_iter", c.cluster.max_iter);
    read(j["cluster"], "tol", c.cluster.tol);
  }

  for (auto& v : c.violations()) errors.push_back(std::move(v));
  if (!errors.empty()) {
    std::ostringstream msg;
    msg << "invalid configuration (" << errors.size() << " problem" << (errors.size() == 1 ? "" : "s") << "): ";
    for (std::size_t i = 0; i < errors.size(); ++i) msg << (i ? "; " : "") << errors[i];
    throw Error("config.invalid", msg.str());
  }
  return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config.missing_file", "cannot open config: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return config_from_json(json::object());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error("config.parse", path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_fingerprint(const RunConfig& config) {
  const std::string text = to_json(config).dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream out;
  for (unsigned int i = 0; i < 8 && i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string version_string() {
#ifdef DICOM_GIT_DESCRIBE
  return DICOM_GIT_DESCRIBE;
#else
  return "unknown";
#endif
}

void write_run_metadata(const std::filesystem::path& dir, const RunConfig& config) {
  std::filesystem::create_directories(dir);
  std::ofstream cfg(dir / "config.resolved.json");
  cfg << to_json(config).dump(2) << '\n';
  std::ofstream ver(dir / "version.txt");
  ver << version_string() << '\n';
  if (!cfg || !ver) throw Error("io.write", "cannot write run metadata into " + dir.string());
}

}  // namespace dicom

#include "dicom/checkpoint.hpp"

#include "dicom/error.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace dicom {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written little-endian");

namespace {

using TensorSlots = std::vector<std::pair<std::string, Mat*>>;

// Fixed enumeration order of every tensor a TrainState persists.
TensorSlots state_tensors(TrainState& s) {
  TensorSlots out;
  for (const auto& p : s.student.all_params()) out.emplace_back("student." + p.name, &p.param->value);
  for (const auto& p : s.teacher.shared_params()) out.emplace_back("teacher." + p.name, &p.param->value);
  auto& m = s.optimizer.first_moments();
  auto& v = s.optimizer.second_moments();
  const auto& names = s.optimizer.names();
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back("optim.m." + names[i], &m[i]);
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back("optim.v." + names[i], &v[i]);
  return out;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("checkpoint.hash", "sha256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

RunConfig Checkpoint::config() const { return config_from_json(manifest.at("config")); }

void save_checkpoint(const TrainState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  // state_tensors needs mutable access for restore; saving only reads.
  TrainState& s = const_cast<TrainState&>(state);
  TensorSlots tensors = state_tensors(s);
  Mat center_mean = state.center.mean;
  Mat center_std = state.center.std;
  tensors.emplace_back("center.mean", &center_mean);
  tensors.emplace_back("center.std", &center_std);

  json manifest;
  manifest["format"] = "dicom-checkpoint";
  manifest["format_version"] = 1;
  manifest["version"] = version_string();
  manifest["config"] = to_json(state.config);
  manifest["counters"] = {{"step", state.step},
                          {"steps_per_epoch", state.steps_per_epoch},
                          {"total_steps", state.total_steps},
                          {"optimizer_steps", state.optimizer.steps()}};
  manifest["center_momentum"] = state.center.momentum;
  manifest["rng"] = serialize_rng(state.rng);
  manifest["blob"] = "tensors.bin";

  const auto blob_path = dir / "tensors.bin";
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw Error("checkpoint.io", "cannot write " + blob_path.string());
  json records = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, mat] : tensors) {
    const std::size_t nbytes = static_cast<std::size_t>(mat->size()) * sizeof(double);
    blob.write(reinterpret_cast<const char*>(mat->data()), static_cast<std::streamsize>(nbytes));
    records.push_back({{"name", name},
                       {"shape", {mat->rows(), mat->cols()}},
                       {"dtype", "float64"},
                       {"offset", offset},
                       {"nbytes", nbytes},
                       {"sha256", sha256_hex(mat->data(), nbytes)}});
    offset += nbytes;
  }
  blob.close();
  if (!blob) throw Error("checkpoint.io", "failed writing " + blob_path.string());
  manifest["tensors"] = std::move(records);

  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw Error("checkpoint.io", "cannot write " + (dir / "manifest.json").string());
}

Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  const auto man_path = dir / "manifest.json";
  std::ifstream man(man_path);
  if (!man) throw Error("checkpoint.missing", "missing checkpoint manifest: " + man_path.string());
  Checkpoint ck;
  try {
    ck.manifest = json::parse(man);
  } catch (const json::parse_error& e) {
    throw Error("checkpoint.corrupt", man_path.string() + ": " + e.what());
  }

  const auto blob_path = dir / ck.manifest.value("blob", std::string("tensors.bin"));
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw Error("checkpoint.missing", "missing tensor payload: " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  for (const auto& rec : ck.manifest.at("tensors")) {
    const std::string name = rec.at("name");
    const auto rows = rec.at("shape").at(0).get<Eigen::Index>();
    const auto cols = rec.at("shape").at(1).get<Eigen::Index>();
    const std::string dtype = rec.at("dtype");
    const auto offset = rec.at("offset").get<std::uint64_t>();
    const auto nbytes = rec.at("nbytes").get<std::uint64_t>();
    const std::size_t elem = dtype == "float64" ? 8 : (dtype == "float32" ? 4 : 0);
    if (elem == 0) throw Error("checkpoint.corrupt", "tensor '" + name + "' has unsupported dtype " + dtype);
    if (nbytes != static_cast<std::uint64_t>(rows * cols) * elem) {
      throw Error("checkpoint.corrupt", "tensor '" + name + "' byte count does not match its shape");
    }
    if (offset + nbytes > bytes.size()) {
      throw Error("checkpoint.corrupt", "tensor '" + name + "' is truncated in " + blob_path.string());
    }
    const char* src = bytes.data() + offset;
    if (sha256_hex(src, nbytes) != rec.at("sha256").get<std::string>()) {
      throw Error("checkpoint.corrupt", "tensor '" + name + "' fails its content hash");
    }
    Mat m(rows, cols);
    if (elem == 8) {
      std::memcpy(m.data(), src, nbytes);
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        float f;
        std::memcpy(&f, src + i * 4, 4);
        m.data()[i] = f;
      }
    }
    ck.tensors.emplace(name, std::move(m));
  }
  return ck;
}

void restore_state(const Checkpoint& ck, TrainState& state) {
  std::vector<std::string> problems;
  const RunConfig saved = ck.config();
  if (!(saved.backbone == state.config.backbone)) {
    const auto& a = saved.backbone;
    const auto& b = state.config.backbone;
    std::ostringstream s;
    s << "backbone config differs (checkpoint p=" << a.patch_size << " d=" << a.embed_dim << " depth=" << a.depth
      << " heads=" << a.heads << " image=" << a.image_height << "x" << a.image_width << ", expected p=" << b.patch_size
      << " d=" << b.embed_dim << " depth=" << b.depth << " heads=" << b.heads << " image=" << b.image_height << "x"
      << b.image_width << ")";
    problems.push_back(s.str());
  }

  TensorSlots slots = state_tensors(state);
  Mat center_mean = state.center.mean;
  Mat center_std = state.center.std;
  slots.emplace_back("center.mean", &center_mean);
  slots.emplace_back("center.std", &center_std);

  std::set<std::string> expected;
  for (const auto& [name, mat] : slots) {
    expected.insert(name);
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) {
      problems.push_back("missing tensor " + name);
    } else if (it->second.rows() != mat->rows() || it->second.cols() != mat->cols()) {
      std::ostringstream s;
      s << name << ": checkpoint " << it->second.rows() << "x" << it->second.cols() << " vs expected " << mat->rows()
        << "x" << mat->cols();
      problems.push_back(s.str());
    }
  }
  for (const auto& [name, mat] : ck.tensors) {
    if (!expected.count(name)) problems.push_back("unexpected tensor " + name);
  }
  if (!problems.empty()) {
    std::ostringstream msg;
    msg << "checkpoint is incompatible with the configured state (" << problems.size() << " mismatches): ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg << (i ? "; " : "") << problems[i];
    throw Error("checkpoint.incompatible", msg.str());
  }

  for (auto& [name, mat] : slots) *mat = ck.tensors.at(name);
  state.center.mean = center_mean.row(0);
  state.center.std = center_std.row(0);
  state.center.momentum = ck.manifest.value("center_momentum", state.center.momentum);
  const auto& counters = ck.manifest.at("counters");
  state.step = counters.at("step").get<std::int64_t>();
  state.steps_per_epoch = counters.at("steps_per_epoch").get<std::int64_t>();
  state.total_steps = counters.at("total_steps").get<std::int64_t>();
  state.optimizer.set_steps(counters.at("optimizer_steps").get<std::int64_t>());
  state.rng = deserialize_rng(ck.manifest.at("rng").get<std::string>());
  for (auto& p : state.student.all_params()) p.param->zero_grad();
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
  const Checkpoint ck = read_checkpoint(dir);
  TrainState state = init_train_state(ck.config(), 1, 1);
  restore_state(ck, state);
  return state;
}

VisionTransformer load_backbone(const Checkpoint& ck, const std::string& role) {
  const RunConfig cfg = ck.config();
  Rng rng(0);
  VisionTransformer vit(cfg.backbone, rng);
  ParamList params;
  vit.collect(role + ".backbone.", params);
  std::vector<std::string> problems;
  for (auto& p : params) {
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) {
      problems.push_back("missing tensor " + p.name);
    } else if (it->second.rows() != p.param->value.rows() || it->second.cols() != p.param->value.cols()) {
      problems.push_back("shape mismatch for " + p.name);
    } else {
      p.param->value = it->second;
    }
  }
  if (!problems.empty()) {
    std::ostringstream msg;
    msg << "cannot load " << role << " backbone: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg << (i ? "; " : "") << problems[i];
    throw Error("checkpoint.incompatible", msg.str());
  }
  for (auto& p : params) p.param->zero_grad();
  return vit;
}

}  // namespace dicom

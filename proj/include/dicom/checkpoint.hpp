#pragma once

#include "dicom/config.hpp"
#include "dicom/pretrainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace dicom {

// On-disk layout: <dir>/manifest.json listing every tensor (name, shape,
// dtype, byte offset, byte count, sha256) plus counters, rng state and the
// resolved config; <dir>/tensors.bin holds the little-endian payloads.
struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, Mat> tensors;

  RunConfig config() const;
};

void save_checkpoint(const TrainState& state, const std::filesystem::path& dir);

// Verifies sizes and hashes; errors name the offending tensor.
Checkpoint read_checkpoint(const std::filesystem::path& dir);

// Copies every tensor into the matching state slot. Missing/extra tensors or
// shape mismatches are collected and reported together as
// checkpoint.incompatible.
void restore_state(const Checkpoint& checkpoint, TrainState& state);

TrainState load_checkpoint(const std::filesystem::path& dir);

// Student (or teacher) backbone only, for downstream use. Works for any
// checkpoint carrying `<prefix>backbone.*` tensors and a backbone config.
VisionTransformer load_backbone(const Checkpoint& checkpoint, const std::string& role = "student");

std::string sha256_hex(const void* data, std::size_t size);

}  // namespace dicom

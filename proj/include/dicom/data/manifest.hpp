#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dicom {

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
  std::string id;
  std::filesystem::path path;  // resolved against the manifest directory
  int label = -1;
  Split split = Split::kTrain;
};

// CSV manifest with header `id,path,label,split` plus an optional sibling
// `classes.csv` (`label,name`) naming every class.
struct DatasetManifest {
  std::filesystem::path source;  // manifest file, empty when built in memory
  std::vector<ManifestEntry> entries;
  std::map<int, std::string> class_names;

  std::vector<const ManifestEntry*> split(Split which) const;
  int num_classes() const;

  // Segmentation masks live in `<manifest dir>/masks/<id>.png`.
  std::optional<std::filesystem::path> mask_path(const ManifestEntry& entry) const;

  // Enforces: unique ids (so splits are disjoint), every label present in
  // the class-name table.
  void validate() const;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

}  // namespace dicom

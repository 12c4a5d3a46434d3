#include "dicom/data/manifest.hpp"

#include "dicom/error.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace dicom {
namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && s[start] == ' ') ++start;
  return s.substr(start);
}

int parse_int(const std::string& text, const std::filesystem::path& where, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(text, &pos);
    if (pos != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error("data.manifest", where.string() + ":" + std::to_string(line_no) + ": bad label '" + text + "'");
  }
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw Error("data.manifest", "unknown split '" + text + "' (expected train, val or test)");
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split which) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == which) out.push_back(&e);
  }
  return out;
}

int DatasetManifest::num_classes() const {
  if (!class_names.empty()) return class_names.rbegin()->first + 1;
  int max_label = -1;
  for (const auto& e : entries) max_label = std::max(max_label, e.label);
  return max_label + 1;
}

std::optional<std::filesystem::path> DatasetManifest::mask_path(const ManifestEntry& entry) const {
  if (source.empty()) return std::nullopt;
  auto p = source.parent_path() / "masks" / (entry.id + ".png");
  if (!std::filesystem::exists(p)) return std::nullopt;
  return p;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.id).second) throw Error("data.manifest", "duplicate id '" + e.id + "' in manifest");
    if (e.label >= 0 && !class_names.empty() && !class_names.count(e.label)) {
      throw Error("data.manifest", "label " + std::to_string(e.label) + " of '" + e.id + "' missing from class table");
    }
  }
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("data.missing_file", "missing manifest: " + path.string());
  DatasetManifest m;
  m.source = path;
  const auto base = path.parent_path();

  std::string line;
  if (!std::getline(in, line) || strip(line) != "id,path,label,split") {
    throw Error("data.manifest", path.string() + ": header must be 'id,path,label,split'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip(line);
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 4) {
      throw Error("data.manifest", path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    ManifestEntry e;
    e.id = strip(f[0]);
    std::filesystem::path p = strip(f[1]);
    e.path = p.is_absolute() ? p : base / p;
    e.label = strip(f[2]).empty() ? -1 : parse_int(strip(f[2]), path, line_no);
    e.split = parse_split(strip(f[3]));
    m.entries.push_back(std::move(e));
  }

  const auto classes_path = base / "classes.csv";
  if (std::filesystem::exists(classes_path)) {
    std::ifstream cin(classes_path);
    std::getline(cin, line);  // header
    std::size_t cls_line = 1;
    while (std::getline(cin, line)) {
      ++cls_line;
      line = strip(line);
      if (line.empty()) continue;
      auto f = split_csv_line(line);
      if (f.size() != 2) throw Error("data.manifest", classes_path.string() + ": expected 'label,name' rows");
      m.class_names[parse_int(strip(f[0]), classes_path, cls_line)] = strip(f[1]);
    }
  }
  m.validate();
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw Error("data.write", "cannot write manifest: " + path.string());
  const auto base = path.parent_path();
  out << "id,path,label,split\n";
  for (const auto& e : manifest.entries) {
    const auto rel = std::filesystem::relative(std::filesystem::absolute(e.path), std::filesystem::absolute(base));
    out << e.id << ',' << rel.generic_string() << ',' << e.label << ',' << to_string(e.split) << '\n';
  }
  if (!manifest.class_names.empty()) {
    std::ofstream cls(base / "classes.csv");
    cls << "label,name\n";
    for (const auto& [label, name] : manifest.class_names) cls << label << ',' << name << '\n';
  }
}

}  // namespace dicom

#pragma once

#include "dicom/config.hpp"
#include "dicom/data/dataset.hpp"
#include "dicom/nn/vit.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dicom {

struct EmbeddingSet {
  Mat features;  // N x d class-token embeddings
  std::vector<std::string> ids;
  std::vector<int> labels;

  void validate() const;
};

// Final class token of every dataset row, in manifest order.
EmbeddingSet extract_features(const VisionTransformer& backbone, const Dataset& data);

struct KMeansResult {
  std::vector<int> assignment;
  Mat centers;
  double inertia = 0.0;
  // Fewer than k distinct points: some clusters are empty.
  bool degenerate = false;
};

// Lloyd iterations from greedy farthest-point seeding; the first seed is
// drawn at random per restart and the lowest-inertia run is kept.
KMeansResult kmeans(const Mat& points, int k, const ClusterConfig& config, std::uint64_t seed);
KMeansResult cluster2(const Mat& points, const ClusterConfig& config, std::uint64_t seed);

// Fraction of point pairs on which the two partitions agree.
double rand_index(std::span<const int> labels, std::span<const int> clusters);

// Mean silhouette over points, Euclidean distance; singleton clusters
// contribute 0.
double silhouette(const Mat& points, std::span<const int> clusters);

// Normalised area under the running maximum of a per-epoch curve.
double soc(std::span<const double> curve);

void export_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);

struct ClusterReport {
  double rand = 0.0;
  double silhouette = 0.0;
  double inertia = 0.0;
  bool degenerate = false;
  std::size_t count = 0;
};

// Two-cluster partition of the embeddings scored against their labels.
ClusterReport cluster_eval(const EmbeddingSet& set, const ClusterConfig& config, std::uint64_t seed);

nlohmann::json to_json(const ClusterReport& report);

}  // namespace dicom

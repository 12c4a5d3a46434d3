#include "dicom/analysis.hpp"

#include "dicom/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>

namespace dicom {

void EmbeddingSet::validate() const {
  if (static_cast<std::size_t>(features.rows()) != ids.size() || labels.size() != ids.size()) {
    throw Error("analysis.shape", "embedding rows, ids and labels differ in length");
  }
  if (!features.allFinite()) throw Error("analysis.non_finite", "embeddings contain non-finite entries");
}

EmbeddingSet extract_features(const VisionTransformer& backbone, const Dataset& data) {
  EmbeddingSet set;
  set.features.resize(static_cast<Eigen::Index>(data.size()), backbone.config().embed_dim);
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) rows.push_back(i);
    const TokenSequence tok = backbone.encode(data.batch(rows).images);
    set.features.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(rows.size())) = tok.class_tokens();
  }
  for (const auto& e : data.manifest().entries) {
    set.ids.push_back(e.id);
    set.labels.push_back(e.label);
  }
  return set;
}

namespace {

struct Lloyd {
  std::vector<int> assignment;
  Mat centers;
  double inertia;
};

Lloyd run_lloyd(const Mat& x, int k, const ClusterConfig& cfg, Eigen::Index first) {
  const Eigen::Index n = x.rows();
  Mat centers(k, x.cols());
  centers.row(0) = x.row(first);
  Vec mind = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    Eigen::Index far = 0;
    mind.maxCoeff(&far);
    centers.row(c) = x.row(far);
    mind = mind.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < cfg.max_iter; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    Mat next = Mat::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= counts[static_cast<std::size_t>(c)];
      } else {
        next.row(c) = centers.row(c);
      }
    }
    const double shift = (next - centers).rowwise().norm().maxCoeff();
    centers = next;
    if (shift <= cfg.tol) break;
  }
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    inertia += (centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
    assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return {std::move(assign), std::move(centers), inertia};
}

}  // namespace

KMeansResult kmeans(const Mat& points, int k, const ClusterConfig& config, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (k < 1 || n < k) throw Error("analysis.too_few_points", "k-means needs at least k points");
  if (!points.allFinite()) throw Error("analysis.non_finite", "k-means input contains non-finite entries");
  Rng rng = derive_rng(seed, 0x63EA5);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, config.restarts); ++r) {
    const auto first = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n));
    Lloyd run = run_lloyd(points, k, config, first);
    if (run.inertia < best.inertia) {
      best.assignment = std::move(run.assignment);
      best.centers = std::move(run.centers);
      best.inertia = run.inertia;
    }
  }
  std::vector<bool> used(static_cast<std::size_t>(k), false);
  for (int a : best.assignment) used[static_cast<std::size_t>(a)] = true;
  best.degenerate = std::find(used.begin(), used.end(), false) != used.end();
  return best;
}

KMeansResult cluster2(const Mat& points, const ClusterConfig& config, std::uint64_t seed) {
  return kmeans(points, 2, config, seed);
}

double rand_index(std::span<const int> labels, std::span<const int> clusters) {
  if (labels.size() != clusters.size()) throw Error("analysis.shape", "labels and clusters differ in length");
  const std::size_t n = labels.size();
  if (n < 2) throw Error("analysis.too_few_points", "rand index needs at least two points");
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < n; ++i) {
    joint[{labels[i], clusters[i]}] += 1;
    rows[labels[i]] += 1;
    cols[clusters[i]] += 1;
  }
  auto pairs = [](double m) { return m * (m - 1) / 2; };
  double both = 0, same_label = 0, same_cluster = 0;
  for (const auto& [key, m] : joint) both += pairs(m);
  for (const auto& [key, m] : rows) same_label += pairs(m);
  for (const auto& [key, m] : cols) same_cluster += pairs(m);
  const double total = pairs(static_cast<double>(n));
  // Agreeing pairs: together in both partitions or apart in both.
  return (total + 2 * both - same_label - same_cluster) / total;
}

double silhouette(const Mat& points, std::span<const int> clusters) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (clusters.size() != n) throw Error("analysis.shape", "points and clusters differ in length");
  std::map<int, int> index;
  for (int c : clusters) index.emplace(c, 0);
  if (index.size() < 2) throw Error("analysis.single_cluster", "silhouette needs at least two clusters");
  int next = 0;
  for (auto& [c, k] : index) k = next++;
  std::vector<int> id(n), sizes(index.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    id[i] = index[clusters[i]];
    ++sizes[static_cast<std::size_t>(id[i])];
  }
  double total = 0.0;
  std::vector<double> sums(index.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sums[static_cast<std::size_t>(id[j])] += (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
    }
    const auto own = static_cast<std::size_t>(id[i]);
    if (sizes[own] == 1) continue;
    const double a = sums[own] / (sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c) {
      if (c != own) b = std::min(b, sums[c] / sizes[c]);
    }
    const double denom = std::max(a, b);
    if (denom > 0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

double soc(std::span<const double> curve) {
  if (curve.empty()) throw Error("analysis.empty", "SoC needs at least one value");
  for (double v : curve) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("analysis.range", "SoC values must lie in [0,1]");
  }
  if (curve.size() == 1) return curve[0];
  double run = curve[0], area = 0.0;
  for (std::size_t e = 1; e < curve.size(); ++e) {
    const double next = std::max(run, curve[e]);
    area += 0.5 * (run + next);
    run = next;
  }
  return area / static_cast<double>(curve.size() - 1);
}

void export_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  set.validate();
  std::ofstream out(path);
  if (!out) throw Error("analysis.write", "cannot write " + path.string());
  out << "id,label";
  for (Eigen::Index k = 0; k < set.features.cols(); ++k) out << ",e_" << k;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < set.ids.size(); ++i) {
    out << set.ids[i] << ',' << set.labels[i];
    for (Eigen::Index k = 0; k < set.features.cols(); ++k) out << ',' << set.features(static_cast<Eigen::Index>(i), k);
    out << '\n';
  }
}

ClusterReport cluster_eval(const EmbeddingSet& set, const ClusterConfig& config, std::uint64_t seed) {
  set.validate();
  const KMeansResult km = cluster2(set.features, config, seed);
  ClusterReport report;
  report.rand = rand_index(set.labels, km.assignment);
  report.inertia = km.inertia;
  report.degenerate = km.degenerate;
  report.count = set.ids.size();
  report.silhouette = km.degenerate ? 0.0 : silhouette(set.features, km.assignment);
  return report;
}

nlohmann::json to_json(const ClusterReport& r) {
  return {{"Rand", r.rand}, {"Silhouette", r.degenerate ? nlohmann::json(nullptr) : nlohmann::json(r.silhouette)},
          {"inertia", r.inertia}, {"degenerate", r.degenerate}, {"count", r.count}};
}

}  // namespace dicom

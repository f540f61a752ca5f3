#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cimdd/tensor.hpp"

namespace cimdd {

enum class DictMode { Sample, Centroid };

DictMode parse_dict_mode(const std::string& s);
std::string to_string(DictMode m);

struct KMeansOptions {
  std::size_t k = 128;
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
};

struct KMeansResult {
  Tensor centroids;                     // [K x d]
  std::vector<std::size_t> assignment;  // cluster id per point
  /// Inertia after every assignment step, in order.
  std::vector<double> inertia;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded at
/// the point farthest from its current centroid. Throws CapacityError if n < K.
KMeansResult kmeans(const Tensor& points, const KMeansOptions& opts);

/// Rows summarizing a feature space, one per cluster in cluster-id order.
struct FeatureDictionary {
  Tensor entries;                           // [K x d]
  std::vector<std::size_t> source_indices;  // row of the input each entry came from; empty for centroids
  DictMode mode = DictMode::Sample;
  std::uint64_t seed = 0;
  std::uint64_t split_hash = 0;

  std::size_t size() const { return entries.rows(); }
};

/// k-means over `features`, then either one uniformly drawn member of each
/// cluster (Sample) or the cluster centroid (Centroid).
FeatureDictionary kmeans_dictionary(const Tensor& features, const KMeansOptions& opts,
                                    DictMode mode = DictMode::Sample);

/// Writes `path` (CIMD1) and `path`.json with K, seed, mode, split hash and source indices.
void save_dictionary(const FeatureDictionary& d, const std::filesystem::path& path);
FeatureDictionary load_dictionary(const std::filesystem::path& path);

}  // namespace cimdd

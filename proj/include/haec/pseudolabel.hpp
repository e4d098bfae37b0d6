#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "haec/cloud.hpp"
#include "haec/embed.hpp"

namespace haec {

struct SphericalKMeansResult {
  std::vector<int> assignments;
  RowMatrix centroids;  // K x C, unit rows
  double inertia = 0.0;  // mean cosine to the assigned centroid
  std::vector<double> inertia_trace;  // one entry per assignment pass
  int iterations = 0;
};

// Spherical k-means on row-normalized features with seeded k-means++ seeding.
// Throws ArgumentError when there are fewer rows than k.
SphericalKMeansResult spherical_kmeans(const RowMatrix& features, std::size_t k, std::uint64_t seed,
                                       int max_iter = 100, double tol = 1e-10);

// DBSCAN with inclusive radius and self-counting neighborhoods. Cluster ids are
// ordered by each cluster's lowest member index; -1 marks noise.
std::vector<int> adaptive_dbscan(std::span<const Eigen::Vector3d> positions, double eps, std::size_t min_pts);

struct DensityParams {
  double eps = 0.0;
  std::size_t min_pts = 1;
  bool singleton = false;  // one-point set: eps undefined
};

// eps = eps_scale * median distance to the 4th nearest neighbor,
// min_pts = max(base_minpts, round(log2 n)).
DensityParams class_density_params(std::span<const Eigen::Vector3d> positions, std::size_t base_minpts,
                                   double eps_scale);

struct PseudoLabelSet {
  std::vector<int> z_pc;  // -1 = point without features
  std::vector<int> z_pi;  // -1 = noise or stuff
  RowMatrix class_repr;   // K x C, mean member feature
  std::vector<std::uint8_t> is_thing;
  std::vector<DensityParams> per_class;
  std::size_t n_instances = 0;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return is_thing.size(); }
};

struct LabelParams {
  std::size_t k = 32;
  std::uint64_t seed = 0;
  int max_iter = 100;
  double tol = 1e-10;
  double eps_scale = 2.0;
  std::size_t base_minpts = 4;
  double logit_scale = 100.0;
};

PseudoLabelSet derive_labels(const PointCloud& cloud, const FeatureField& field, const EmbeddingProvider& provider,
                             const LabelParams& params);

// <stem>.ply carries pc/pi properties; <stem>.json the per-class metadata;
// class_repr_<k>.hev1 files sit next to them.
void save_labels(const std::filesystem::path& ply_path, const PointCloud& cloud, const PseudoLabelSet& labels);
PseudoLabelSet load_labels(const std::filesystem::path& ply_path);

}  // namespace haec

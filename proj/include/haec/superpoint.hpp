#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "haec/cloud.hpp"
#include "haec/pseudolabel.hpp"

namespace haec {

using Edge = std::pair<std::uint32_t, std::uint32_t>;

// Undirected graph; edges are unique with first < second, sorted.
struct Graph {
  std::size_t n = 0;
  std::vector<Edge> edges;

  // CSR adjacency; neighbors ascending.
  std::vector<std::uint32_t> offsets, neighbors;
  void build_csr();
  std::span<const std::uint32_t> adjacent(std::uint32_t i) const {
    return {neighbors.data() + offsets[i], neighbors.data() + offsets[i + 1]};
  }
};

Graph make_graph(std::size_t n, std::vector<Edge> edges);

// Symmetrized k-nearest-neighbor graph; distance ties resolved by index.
Graph build_adjacency(std::span<const Eigen::Vector3d> positions, std::size_t k_nn);

struct PartitionOptions {
  // Components up to this size search every binary split exactly; larger ones
  // alternate a two-center min-cut with center updates.
  std::size_t exact_split_limit = 14;
  int max_outer_iterations = 10;
  // Recompute the full energy after every accepted move into energy_trace.
  bool trace_energy = false;
};

struct PartitionResult {
  std::vector<std::uint32_t> component;  // node -> superpoint, numbered by lowest member
  std::size_t n_components = 0;
  double energy = 0.0;
  std::vector<double> energy_trace;
};

// sum_i |x_i - mean(component(i))|^2 + lambda * (#edges across components)
double partition_energy(const Graph& graph, const RowMatrix& features, std::span<const std::uint32_t> component,
                        double lambda);

// Greedy l0 cut pursuit: split components along their steepest binary cut
// while the energy drops, merge adjacent pairs whose union lowers it, and move
// single boundary nodes; each accepted step strictly decreases the energy.
PartitionResult partition_level(const Graph& graph, const RowMatrix& features, double lambda,
                                const PartitionOptions& options = {});

inline constexpr int kGeomDim = 11;
inline constexpr int kEdgeFeatDim = 7;

struct SuperpointLevel {
  std::vector<std::uint32_t> parent_of;  // child (point or finer superpoint) -> superpoint
  std::size_t size = 0;
  double lambda = 0.0;
  std::vector<Edge> edges;
  RowMatrix edge_features;  // |E| x 7: mean |offset| per axis, std of offset length, |centroid delta| per axis
  // centroid(3), extent(3), planarity, linearity, verticality, two opponent-color channels
  RowMatrix sp_geom;
  std::vector<std::uint32_t> point_count;

  RowMatrix t1, t2, t3;  // size x C
  std::vector<int> majority_class;
  std::vector<int> majority_instance;
  std::vector<std::uint8_t> is_thing;
  std::vector<std::uint8_t> masked;  // no labeled point below: excluded from losses
};

struct SuperpointHierarchy {
  std::size_t n_points = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::size_t k_nn = 0;
  std::vector<SuperpointLevel> levels;  // levels[0] is the finest

  std::size_t depth() const { return levels.size(); }
  // Superpoint of every raw point at the given level (0-based).
  std::vector<std::uint32_t> point_assignment(std::size_t level) const;
};

struct HierarchyConfig {
  int levels = 3;
  std::vector<double> lambda{0.01, 0.1, 1.0};
  std::size_t k_nn = 10;
  double spatial_weight = 0.1;  // meters -> feature units for level-1 positions
  std::uint64_t seed = 0;
};

// Per-point partition features: rgb, linearity, planarity, scattering,
// verticality and spatial_weight-scaled position.
RowMatrix point_features(const PointCloud& cloud, std::size_t k_nn, double spatial_weight);

SuperpointHierarchy build_hierarchy(const PointCloud& cloud, const PseudoLabelSet& labels, const FeatureField& field,
                                    const HierarchyConfig& config);

void propagate_targets(SuperpointHierarchy& hierarchy, const FeatureField& field, const PseudoLabelSet& labels);

void save_hierarchy(const std::filesystem::path& dir, const SuperpointHierarchy& hierarchy);
SuperpointHierarchy load_hierarchy(const std::filesystem::path& dir);

}  // namespace haec

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "haec/cloud.hpp"
#include "haec/embed.hpp"
#include "haec/render.hpp"

namespace haec {

struct Correspondence {
  std::uint32_t point_index = 0;
  std::uint32_t view = 0;  // index into the batch's view list
  int u = 0, v = 0;        // pixel
  double point_depth = 0.0;
  double screen_depth = 0.0;
};

// Projects every point into the view; screen_depth is the view's z-buffer value at the pixel.
std::vector<Correspondence> correspond(const PointCloud& cloud, const RenderedView& view, std::uint32_t view_index);

struct ViewDepth {
  std::string view_id;
  const RenderedView* view = nullptr;  // null when the depth map is unavailable
};

// Keeps a correspondence iff point_depth <= screen_depth * (1 + tau_rel), with
// point depth compared at the depth map's float precision.
std::vector<Correspondence> depth_screen(std::span<const Correspondence> corrs, std::span<const ViewDepth> depths,
                                         double tau_rel);

// Adds the correspondences' pixel vectors into the running per-point means.
// Contributions are summed in (point, view, v, u) order so the result does not
// depend on the input order.
void accumulate(FeatureField& field, std::span<const Correspondence> corrs, std::span<const FeatureMap* const> maps);

FeatureField scatter_average(std::size_t n_points, std::size_t dim, std::span<const Correspondence> corrs,
                             std::span<const FeatureMap* const> maps);

double coverage(const FeatureField& field);

struct FilterParams {
  std::vector<std::string> positives{"a normal scene", "an indoor scene", "an outdoor scene"};
  std::vector<std::string> negatives{"an incoherent image", "unorganized, random points", "a blank image"};
  double threshold = 0.65;
  double logit_scale = 100.0;
};

struct LiftStats {
  std::size_t views = 0;
  std::size_t kept_views = 0;
  std::size_t correspondences = 0;
  std::size_t screened = 0;
};

// Filters, projects, screens and accumulates a batch of rendered views.
LiftStats lift_views(const PointCloud& cloud, std::span<const RenderedView> views, const EmbeddingProvider& provider,
                     const FilterParams& filter, double tau_rel, FeatureField& field,
                     std::vector<ViewVerdict>* verdicts = nullptr);

struct CoverageParams {
  double target_coverage = 0.90;
  int max_rounds = 5;
  double cube_radius = 3.0;
  Intrinsics intrinsic = Intrinsics::square(128);
  int splat_px = 2;
  double tau_rel = 0.05;
  double eps_scale = 2.0;
  std::size_t base_minpts = 4;
  FilterParams filter;
  std::uint64_t seed = 0;
};

struct CoverageRound {
  std::size_t unmapped = 0;
  std::size_t clusters = 0;
  std::size_t drawn_points = 0;
  std::size_t poses = 0;
  LiftStats lift;
  double coverage = 0.0;
};

struct CoverageResult {
  FeatureField field;
  int rounds_used = 0;
  std::vector<CoverageRound> rounds;
  double initial_coverage = 0.0;
  double final_coverage = 0.0;
};

// Repeats: cluster the unmapped points, draw two seeded points per cluster,
// photograph each from the 8 cube corners, and lift the surviving views.
CoverageResult coverage_loop(const PointCloud& cloud, FeatureField field, const EmbeddingProvider& provider,
                             const CoverageParams& params);

void write_correspondences_csv(const std::filesystem::path& path, std::span<const Correspondence> corrs,
                               std::span<const std::string> view_ids);

}  // namespace haec

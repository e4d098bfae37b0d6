#include "haec/lift.hpp"

#include <algorithm>
#include <numeric>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"
#include "haec/parallel.hpp"
#include "haec/pseudolabel.hpp"
#include "haec/rng.hpp"

namespace haec {

std::vector<Correspondence> correspond(const PointCloud& cloud, const RenderedView& view, std::uint32_t view_index) {
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto proj = project_point(cloud.positions[i], view.pose);
    if (!proj) continue;
    const int u = proj->px(), v = proj->py();
    out.push_back({static_cast<std::uint32_t>(i), view_index, u, v, proj->depth,
                   static_cast<double>(view.depth[view.pixel(u, v)])});
  }
  return out;
}

std::vector<Correspondence> depth_screen(std::span<const Correspondence> corrs, std::span<const ViewDepth> depths,
                                         double tau_rel) {
  if (!(tau_rel >= 0.0)) throw ArgumentError("depth tolerance must be non-negative");
  std::vector<Correspondence> out;
  out.reserve(corrs.size());
  for (const auto& c : corrs) {
    if (c.view >= depths.size()) throw ArgumentError("correspondence references unknown view " + std::to_string(c.view));
    const auto& d = depths[c.view];
    if (!d.view) throw ArgumentError("missing depth map for view " + d.view_id);
    if (c.u < 0 || c.v < 0 || c.u >= d.view->width || c.v >= d.view->height)
      throw ArgumentError("correspondence pixel outside view " + d.view_id);
    Correspondence kept = c;
    kept.screen_depth = d.view->depth[d.view->pixel(c.u, c.v)];
    const double point_depth = static_cast<float>(c.point_depth);
    if (point_depth <= kept.screen_depth * (1.0 + tau_rel)) out.push_back(kept);
  }
  return out;
}

void accumulate(FeatureField& field, std::span<const Correspondence> corrs, std::span<const FeatureMap* const> maps) {
  for (const auto* m : maps)
    if (m && m->dim() != field.dim) throw ArgumentError("feature map dimension differs from the field");

  std::vector<std::uint32_t> order(corrs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const auto& x = corrs[a];
    const auto& y = corrs[b];
    return std::tie(x.point_index, x.view, x.v, x.u) < std::tie(y.point_index, y.view, y.v, y.u);
  });

  Eigen::RowVectorXd sum(static_cast<Eigen::Index>(field.dim));
  for (std::size_t i = 0; i < order.size();) {
    const std::uint32_t p = corrs[order[i]].point_index;
    if (p >= field.size()) throw ArgumentError("correspondence references unknown point");
    sum.setZero();
    std::size_t j = i;
    for (; j < order.size() && corrs[order[j]].point_index == p; ++j) {
      const auto& c = corrs[order[j]];
      if (c.view >= maps.size() || !maps[c.view]) throw ArgumentError("correspondence references an unloaded feature map");
      sum += maps[c.view]->at(c.u, c.v);
    }
    const auto added = static_cast<std::uint32_t>(j - i);
    const auto row = static_cast<Eigen::Index>(p);
    const double old = field.hit_count[p];
    field.features.row(row) = (field.features.row(row) * old + sum) / (old + added);
    field.hit_count[p] += added;
    i = j;
  }
}

FeatureField scatter_average(std::size_t n_points, std::size_t dim, std::span<const Correspondence> corrs,
                             std::span<const FeatureMap* const> maps) {
  FeatureField field = FeatureField::empty(n_points, dim);
  accumulate(field, corrs, maps);
  return field;
}

double coverage(const FeatureField& field) {
  if (field.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (auto h : field.hit_count) hit += h > 0;
  return static_cast<double>(hit) / static_cast<double>(field.size());
}

LiftStats lift_views(const PointCloud& cloud, std::span<const RenderedView> views, const EmbeddingProvider& provider,
                     const FilterParams& filter, double tau_rel, FeatureField& field,
                     std::vector<ViewVerdict>* verdicts) {
  const auto positives = embed_labels(provider, filter.positives);
  const auto negatives = embed_labels(provider, filter.negatives);

  LiftStats stats;
  stats.views = views.size();
  std::vector<ViewVerdict> verdict(views.size());
  std::vector<FeatureMap> maps(views.size());
  std::vector<std::vector<Correspondence>> per_view(views.size());
  std::vector<std::size_t> raw_counts(views.size(), 0);
  parallel_for(views.size(), [&](std::size_t i) {
    const auto& view = views[i];
    verdict[i] = classify_view(provider.image_embed(view), positives, negatives, filter.threshold, filter.logit_scale);
    verdict[i].view_id = view.view_id;
    if (!verdict[i].keep) return;
    maps[i] = provider.pixel_features(view);
    const auto corrs = correspond(cloud, view, static_cast<std::uint32_t>(i));
    raw_counts[i] = corrs.size();
    const ViewDepth depth{view.view_id, &view};
    // Screen against this view only; the index is remapped to 0 for the call.
    std::vector<Correspondence> local = corrs;
    for (auto& c : local) c.view = 0;
    per_view[i] = depth_screen(local, std::span<const ViewDepth>(&depth, 1), tau_rel);
    for (auto& c : per_view[i]) c.view = static_cast<std::uint32_t>(i);
  });

  std::vector<Correspondence> all;
  std::vector<const FeatureMap*> map_ptrs(views.size(), nullptr);
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (!verdict[i].keep) continue;
    ++stats.kept_views;
    stats.correspondences += raw_counts[i];
    stats.screened += per_view[i].size();
    all.insert(all.end(), per_view[i].begin(), per_view[i].end());
    map_ptrs[i] = &maps[i];
  }
  accumulate(field, all, map_ptrs);
  if (verdicts) verdicts->insert(verdicts->end(), verdict.begin(), verdict.end());
  return stats;
}

CoverageResult coverage_loop(const PointCloud& cloud, FeatureField field, const EmbeddingProvider& provider,
                             const CoverageParams& params) {
  if (!(params.target_coverage > 0.0 && params.target_coverage <= 1.0))
    throw ArgumentError("target coverage must lie in (0, 1]");
  if (params.max_rounds < 0) throw ArgumentError("max_rounds must be non-negative");

  CoverageResult res;
  res.initial_coverage = coverage(field);
  double cov = res.initial_coverage;
  Rng rng(mix_seed(params.seed, fnv1a("coverage_loop")));

  for (int round = 0; round < params.max_rounds && cov < params.target_coverage; ++round) {
    CoverageRound stats;
    std::vector<std::uint32_t> unmapped;
    for (std::size_t p = 0; p < field.size(); ++p)
      if (!field.defined(p)) unmapped.push_back(static_cast<std::uint32_t>(p));
    stats.unmapped = unmapped.size();

    std::vector<Eigen::Vector3d> pos;
    pos.reserve(unmapped.size());
    for (auto p : unmapped) pos.push_back(cloud.positions[p]);
    std::vector<int> cluster(pos.size(), 0);
    const auto density = class_density_params(pos, params.base_minpts, params.eps_scale);
    if (!density.singleton) cluster = adaptive_dbscan(pos, density.eps, density.min_pts);
    int n_clusters = 0;
    for (int c : cluster) n_clusters = std::max(n_clusters, c + 1);
    if (n_clusters == 0) {
      // Everything is noise: treat the unmapped set as one cluster.
      std::fill(cluster.begin(), cluster.end(), 0);
      n_clusters = 1;
    }
    stats.clusters = static_cast<std::size_t>(n_clusters);

    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_clusters));
    for (std::size_t i = 0; i < cluster.size(); ++i)
      if (cluster[i] >= 0) members[static_cast<std::size_t>(cluster[i])].push_back(i);

    std::vector<RenderedView> views;
    for (std::size_t c = 0; c < members.size(); ++c) {
      auto& m = members[c];
      const std::size_t draws = std::min<std::size_t>(2, m.size());
      for (std::size_t d = 0; d < draws; ++d) {
        // Partial Fisher-Yates keeps the two draws distinct.
        const std::size_t pick = d + rng.index(m.size() - d);
        std::swap(m[d], m[pick]);
        const Eigen::Vector3d target = pos[m[d]];
        ++stats.drawn_points;
        for (const auto& pose : cube_rig(target, params.cube_radius, params.intrinsic)) {
          const std::string id = "c" + std::to_string(round) + "_" + std::to_string(stats.poses++);
          RenderedView v;
          v.view_id = id;
          v.pose = pose;
          views.push_back(std::move(v));
        }
      }
    }
    parallel_for(views.size(), [&](std::size_t i) {
      views[i] = splat_render(cloud, views[i].pose, params.splat_px, views[i].view_id);
    });
    stats.lift = lift_views(cloud, views, provider, params.filter, params.tau_rel, field);
    cov = coverage(field);
    stats.coverage = cov;
    res.rounds.push_back(stats);
    ++res.rounds_used;
  }
  res.final_coverage = cov;
  res.field = std::move(field);
  return res;
}

void write_correspondences_csv(const std::filesystem::path& path, std::span<const Correspondence> corrs,
                               std::span<const std::string> view_ids) {
  std::string out = "point_index,view_id,u,v,point_depth,screen_depth\n";
  char buf[160];
  for (const auto& c : corrs) {
    const std::string& id = c.view < view_ids.size() ? view_ids[c.view] : std::to_string(c.view);
    std::snprintf(buf, sizeof buf, ",%d,%d,%.9g,%.9g\n", c.u, c.v, c.point_depth, c.screen_depth);
    out += std::to_string(c.point_index) + "," + id + buf;
  }
  io::write_file(path, out);
}

}  // namespace haec

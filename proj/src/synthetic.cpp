#include "haec/synthetic.hpp"

#include <cmath>

#include "haec/error.hpp"
#include "haec/rng.hpp"

namespace haec {

std::vector<PaletteEntry> demo_palette() {
  return {
      {{220, 30, 30}, "red object", {"an object", "a normal scene"}},
      {{40, 170, 60}, "green ground", {"amorphous, uncountable stuff", "a normal scene"}},
      {{0, 0, 0}, "empty background", {"a blank image"}},
  };
}

std::vector<std::string> demo_label_set() { return {"red object", "green ground"}; }

PointCloud demo_scene(std::uint64_t seed, const DemoSceneParams& p) {
  if (p.ground_size <= 0 || p.ground_spacing <= 0 || p.blob_radius <= 0 || p.blob_spacing <= 0 || p.blobs < 0)
    throw ArgumentError("demo scene parameters must be positive");
  const auto pal = demo_palette();
  auto rgb = [](const std::array<std::uint8_t, 3>& c) -> Eigen::Vector3d { return Eigen::Vector3d(c[0], c[1], c[2]) / 255.0; };
  Rng rng(mix_seed(seed, fnv1a("demo-scene")));
  PointCloud cloud;
  std::vector<int> sem, inst;

  const int n = int(std::lround(p.ground_size / p.ground_spacing)) + 1;
  const double half = 0.5 * p.ground_size;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const double jx = 0.1 * p.ground_spacing * (rng.uniform() - 0.5);
      const double jy = 0.1 * p.ground_spacing * (rng.uniform() - 0.5);
      cloud.positions.emplace_back(-half + i * p.ground_spacing + jx, -half + j * p.ground_spacing + jy, 0.0);
      cloud.colors.push_back(rgb(pal[1].color));
      sem.push_back(1);
      inst.push_back(-1);
    }

  // Blob centers on a circle of radius ground_size / 4.
  const int m = std::max(1, int(std::lround(4.0 * M_PI * p.blob_radius * p.blob_radius /
                                            (p.blob_spacing * p.blob_spacing))));
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int b = 0; b < p.blobs; ++b) {
    const double a = 2.0 * M_PI * b / std::max(1, p.blobs) + 0.3;
    const Eigen::Vector3d c(0.25 * p.ground_size * std::cos(a), 0.25 * p.ground_size * std::sin(a), p.blob_height);
    for (int k = 0; k < m; ++k) {
      const double z = 1.0 - 2.0 * (k + 0.5) / m;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * k;
      cloud.positions.push_back(c + p.blob_radius * Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), z));
      cloud.colors.push_back(rgb(pal[0].color));
      sem.push_back(0);
      inst.push_back(b);
    }
  }
  cloud.gt_semantic = std::move(sem);
  cloud.gt_instance = std::move(inst);
  cloud.validate();
  return cloud;
}

SuperpointHierarchy toy_hierarchy(std::size_t S, std::size_t C, int levels, std::uint64_t seed) {
  if (S < 2 || C < 1 || levels < 1) throw ArgumentError("toy hierarchy needs S >= 2, C >= 1, levels >= 1");
  Rng rng(seed);
  auto unit = [&](std::size_t dim) {
    Eigen::RowVectorXd v(dim);
    for (auto& x : v) x = rng.normal();
    return Eigen::RowVectorXd(v.normalized());
  };
  SuperpointHierarchy h;
  h.dim = C;
  h.seed = seed;
  h.k_nn = 4;
  h.n_points = 2 * S;
  std::size_t prev = h.n_points;
  std::size_t size = S;
  for (int l = 0; l < levels && size >= 1; ++l) {
    SuperpointLevel lv;
    lv.size = size;
    lv.parent_of.resize(prev);
    for (std::size_t i = 0; i < prev; ++i) lv.parent_of[i] = std::uint32_t(l == 0 ? i / 2 : std::min(i / 3, size - 1));
    lv.sp_geom = RowMatrix(size, kGeomDim);
    for (std::size_t s = 0; s < size; ++s) {
      lv.sp_geom.row(s).head<3>() = Eigen::RowVector3d(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 2));
      for (int k = 3; k < kGeomDim; ++k) lv.sp_geom(s, k) = rng.uniform(0, 1);
    }
    // Ring plus a few chords.
    std::vector<Edge> edges;
    for (std::size_t s = 0; s + 1 < size; ++s) edges.emplace_back(s, s + 1);
    if (size > 2) edges.emplace_back(0, size - 1);
    for (std::size_t k = 0; k < size / 3; ++k) {
      const auto a = rng.index(size), b = rng.index(size);
      if (a != b) edges.emplace_back(std::min(a, b), std::max(a, b));
    }
    lv.edges = make_graph(size, edges).edges;
    lv.edge_features = RowMatrix(lv.edges.size(), kEdgeFeatDim);
    for (Eigen::Index e = 0; e < lv.edge_features.size(); ++e) lv.edge_features(e) = rng.uniform(0.05, 1.0);
    lv.point_count.assign(size, 2);
    lv.t1 = RowMatrix(size, C), lv.t2 = RowMatrix(size, C), lv.t3 = RowMatrix(size, C);
    std::vector<Eigen::RowVectorXd> class_vec{unit(C), unit(C), unit(C)};
    for (std::size_t s = 0; s < size; ++s) {
      const int c = int(rng.index(3));
      lv.t1.row(s) = unit(C);
      lv.t2.row(s) = unit(C);
      lv.t3.row(s) = class_vec[c];
      lv.majority_class.push_back(c);
      lv.majority_instance.push_back(c == 2 ? -1 : int(s / 3));
      lv.is_thing.push_back(c != 2);
      lv.masked.push_back(s % 7 == 6);
    }
    h.levels.push_back(std::move(lv));
    prev = size;
    if (size <= 1) break;
    size = (size + 2) / 3;
  }
  return h;
}

}  // namespace haec

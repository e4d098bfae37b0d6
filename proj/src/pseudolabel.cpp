#include "haec/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"
#include "haec/kdtree.hpp"
#include "haec/parallel.hpp"
#include "haec/rng.hpp"
#include "json.hpp"

namespace haec {

SphericalKMeansResult spherical_kmeans(const RowMatrix& features, std::size_t k, std::uint64_t seed, int max_iter,
                                       double tol) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (k == 0) throw ArgumentError("spherical k-means needs k >= 1");
  if (n < k) throw ArgumentError("spherical k-means: fewer points than clusters");

  RowMatrix x = features;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double norm = x.row(i).norm();
    if (norm > 0.0) x.row(i) /= norm;
  }

  // k-means++ seeding with 1 - cos as the distance.
  Rng rng(seed);
  RowMatrix u(static_cast<Eigen::Index>(k), x.cols());
  std::vector<std::uint8_t> chosen(n, 0);
  std::vector<double> best_cos(n, -std::numeric_limits<double>::infinity());
  std::size_t first = rng.index(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t pick = first;
    if (c > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += std::max(0.0, 1.0 - best_cos[i]);
      if (total > 0.0) {
        double r = rng.uniform() * total;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = std::max(0.0, 1.0 - best_cos[i]);
          if (d <= 0.0) continue;
          pick = i;
          if (r < d) break;
          r -= d;
        }
      } else {
        // Every point already coincides with a centroid; duplicate the lowest unused one.
        pick = 0;
        while (pick < n && chosen[pick]) ++pick;
        if (pick == n) pick = 0;
      }
    }
    chosen[pick] = 1;
    u.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i)
      best_cos[i] = std::max(best_cos[i], x.row(static_cast<Eigen::Index>(i)).dot(u.row(static_cast<Eigen::Index>(c))));
  }

  SphericalKMeansResult res;
  res.assignments.assign(n, -1);
  std::vector<double> fit(n, 0.0);

  auto assign = [&] {
    const RowMatrix sims = x * u.transpose();
    std::size_t changes = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < sims.cols(); ++c)
        if (sims(static_cast<Eigen::Index>(i), c) > sims(static_cast<Eigen::Index>(i), best)) best = c;
      changes += res.assignments[i] != static_cast<int>(best);
      res.assignments[i] = static_cast<int>(best);
      fit[i] = sims(static_cast<Eigen::Index>(i), best);
      total += fit[i];
    }
    res.inertia = total / static_cast<double>(n);
    res.inertia_trace.push_back(res.inertia);
    return changes;
  };

  assign();
  for (int it = 1; it <= max_iter; ++it) {
    res.iterations = it;
    std::vector<std::size_t> counts(k, 0);
    for (int a : res.assignments) ++counts[static_cast<std::size_t>(a)];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t worst = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(res.assignments[i])] < 2) continue;
        if (worst == n || fit[i] < fit[worst]) worst = i;
      }
      if (worst == n || fit[worst] >= 1.0 - 1e-12) continue;
      --counts[static_cast<std::size_t>(res.assignments[worst])];
      ++counts[c];
      res.assignments[worst] = static_cast<int>(c);
      u.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(worst));
      fit[worst] = 1.0;
    }

    RowMatrix sums = RowMatrix::Zero(u.rows(), u.cols());
    for (std::size_t i = 0; i < n; ++i)
      sums.row(res.assignments[i]) += x.row(static_cast<Eigen::Index>(i));
    double moved = 0.0;
    for (Eigen::Index c = 0; c < u.rows(); ++c) {
      const double norm = sums.row(c).norm();
      if (norm <= 0.0) continue;
      const Eigen::RowVectorXd next = sums.row(c) / norm;
      moved = std::max(moved, (next - u.row(c)).norm());
      u.row(c) = next;
    }
    const std::size_t changes = assign();
    if (changes == 0 || moved < tol) break;
  }
  res.centroids = std::move(u);
  return res;
}

std::vector<int> adaptive_dbscan(std::span<const Eigen::Vector3d> positions, double eps, std::size_t min_pts) {
  if (!(eps > 0.0)) throw ArgumentError("DBSCAN eps must be positive");
  if (min_pts < 1) throw ArgumentError("DBSCAN min_pts must be at least 1");
  const std::size_t n = positions.size();
  KdTree tree(positions);

  std::vector<std::vector<std::uint32_t>> nbrs(n);
  parallel_for(n, [&](std::size_t i) { tree.radius(positions[i], eps, nbrs[i]); });
  std::vector<std::uint8_t> core(n);
  for (std::size_t i = 0; i < n; ++i) core[i] = nbrs[i].size() >= min_pts;

  std::vector<int> label(n, -1);
  int clusters = 0;
  std::deque<std::uint32_t> queue;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || label[i] >= 0) continue;
    const int c = clusters++;
    label[i] = c;
    queue.push_back(static_cast<std::uint32_t>(i));
    while (!queue.empty()) {
      const auto p = queue.front();
      queue.pop_front();
      for (auto q : nbrs[p]) {
        if (label[q] >= 0) continue;
        label[q] = c;
        if (core[q]) queue.push_back(q);
      }
    }
  }

  // Renumber by lowest member index.
  std::vector<int> remap(static_cast<std::size_t>(clusters), -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (label[i] >= 0 && remap[static_cast<std::size_t>(label[i])] < 0) remap[static_cast<std::size_t>(label[i])] = next++;
  for (auto& l : label)
    if (l >= 0) l = remap[static_cast<std::size_t>(l)];
  return label;
}

DensityParams class_density_params(std::span<const Eigen::Vector3d> positions, std::size_t base_minpts,
                                   double eps_scale) {
  const std::size_t n = positions.size();
  DensityParams out;
  if (n < 2) {
    out.singleton = true;
    out.min_pts = std::max<std::size_t>(base_minpts, 1);
    return out;
  }
  const std::size_t kth = std::min<std::size_t>(4, n - 1);
  KdTree tree(positions);
  std::vector<double> dist(n);
  parallel_for(n, [&](std::size_t i) { dist[i] = std::sqrt(tree.knn(positions[i], kth + 1).back().dist2); });
  std::sort(dist.begin(), dist.end());
  const double median = n % 2 ? dist[n / 2] : 0.5 * (dist[n / 2 - 1] + dist[n / 2]);
  out.eps = eps_scale * median;
  out.min_pts = std::max<std::size_t>(
      base_minpts, static_cast<std::size_t>(std::llround(std::log2(static_cast<double>(n)))));
  return out;
}

PseudoLabelSet derive_labels(const PointCloud& cloud, const FeatureField& field, const EmbeddingProvider& provider,
                             const LabelParams& params) {
  if (field.size() != cloud.size()) throw ArgumentError("feature field and cloud differ in length");
  std::vector<std::size_t> labeled;
  for (std::size_t p = 0; p < field.size(); ++p)
    if (field.defined(p)) labeled.push_back(p);
  if (labeled.empty()) throw ArgumentError("no point carries a lifted feature");

  RowMatrix feats(static_cast<Eigen::Index>(labeled.size()), static_cast<Eigen::Index>(field.dim));
  for (std::size_t i = 0; i < labeled.size(); ++i)
    feats.row(static_cast<Eigen::Index>(i)) = field.features.row(static_cast<Eigen::Index>(labeled[i]));
  const auto km = spherical_kmeans(feats, params.k, params.seed, params.max_iter, params.tol);

  PseudoLabelSet out;
  out.seed = params.seed;
  const std::size_t k = params.k;
  out.z_pc.assign(cloud.size(), -1);
  out.z_pi.assign(cloud.size(), -1);
  out.class_repr = RowMatrix::Zero(static_cast<Eigen::Index>(k), feats.cols());
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const int c = km.assignments[i];
    out.z_pc[labeled[i]] = c;
    members[static_cast<std::size_t>(c)].push_back(labeled[i]);
    out.class_repr.row(c) += feats.row(static_cast<Eigen::Index>(i));
  }
  for (std::size_t c = 0; c < k; ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    if (members[c].empty()) out.class_repr.row(row) = km.centroids.row(row);
    else out.class_repr.row(row) /= static_cast<double>(members[c].size());
  }

  const Eigen::VectorXd thing_vec = provider.text_embed(kThingPrompt);
  const Eigen::VectorXd stuff_vec = provider.text_embed(kStuffPrompt);
  out.is_thing.resize(k);
  out.per_class.resize(k);
  std::vector<std::vector<int>> local(k);
  for (std::size_t c = 0; c < k; ++c)
    out.is_thing[c] = !members[c].empty() &&
                      thing_probability(out.class_repr.row(static_cast<Eigen::Index>(c)).transpose(), thing_vec,
                                        stuff_vec, params.logit_scale) > 0.5;

  parallel_for(k, [&](std::size_t c) {
    if (!out.is_thing[c]) return;
    std::vector<Eigen::Vector3d> pos;
    pos.reserve(members[c].size());
    for (auto p : members[c]) pos.push_back(cloud.positions[p]);
    out.per_class[c] = class_density_params(pos, params.base_minpts, params.eps_scale);
    if (out.per_class[c].singleton) local[c].assign(pos.size(), 0);
    else local[c] = adaptive_dbscan(pos, out.per_class[c].eps, out.per_class[c].min_pts);
  });

  int offset = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (!out.is_thing[c]) continue;
    int count = 0;
    for (std::size_t i = 0; i < members[c].size(); ++i) {
      const int l = local[c][i];
      if (l < 0) continue;
      out.z_pi[members[c][i]] = offset + l;
      count = std::max(count, l + 1);
    }
    offset += count;
  }
  out.n_instances = static_cast<std::size_t>(offset);
  return out;
}

void save_labels(const std::filesystem::path& ply_path, const PointCloud& cloud, const PseudoLabelSet& labels) {
  PointCloud c = cloud;
  c.set_extra("pc", PlyType::i32, std::vector<double>(labels.z_pc.begin(), labels.z_pc.end()));
  c.set_extra("pi", PlyType::i32, std::vector<double>(labels.z_pi.begin(), labels.z_pi.end()));
  save_cloud(ply_path, c, PlyFormat::binary_little_endian);

  const auto dir = ply_path.parent_path();
  const auto stem = ply_path.stem().string();
  nlohmann::ordered_json j;
  j["K"] = labels.num_classes();
  j["seed"] = labels.seed;
  j["n_instances"] = labels.n_instances;
  j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < labels.num_classes(); ++k) {
    const std::string file = stem + "_class_repr_" + std::to_string(k) + ".hev1";
    write_vector(dir / file, labels.class_repr.row(static_cast<Eigen::Index>(k)).transpose());
    nlohmann::ordered_json cj;
    cj["id"] = k;
    cj["is_thing"] = static_cast<bool>(labels.is_thing[k]);
    cj["eps"] = labels.per_class[k].eps;
    cj["min_pts"] = labels.per_class[k].min_pts;
    cj["singleton"] = labels.per_class[k].singleton;
    cj["class_repr"] = file;
    j["classes"].push_back(cj);
  }
  io::write_file(dir / (stem + ".json"), j.dump(2) + "\n");
}

PseudoLabelSet load_labels(const std::filesystem::path& ply_path) {
  const auto dir = ply_path.parent_path();
  const auto json_path = dir / (ply_path.stem().string() + ".json");
  if (!std::filesystem::exists(ply_path) || !std::filesystem::exists(json_path))
    throw PrerequisiteError("pseudo-labels not found at " + ply_path.string() + " (run the label stage)");
  const PointCloud c = load_cloud(ply_path);
  const auto* pc = c.find_extra("pc");
  const auto* pi = c.find_extra("pi");
  if (!pc || !pi) throw ParseError(ply_path.string() + ": missing pc/pi properties", 0);

  const auto bytes = io::read_file(json_path);
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
  PseudoLabelSet out;
  out.seed = j.at("seed").get<std::uint64_t>();
  out.n_instances = j.at("n_instances").get<std::size_t>();
  for (double v : pc->values) out.z_pc.push_back(static_cast<int>(v));
  for (double v : pi->values) out.z_pi.push_back(static_cast<int>(v));
  const auto& classes = j.at("classes");
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const auto& cj = classes[k];
    const Eigen::VectorXd repr = read_vector(dir / cj.at("class_repr").get<std::string>());
    if (k == 0) out.class_repr.resize(static_cast<Eigen::Index>(classes.size()), repr.size());
    out.class_repr.row(static_cast<Eigen::Index>(k)) = repr.transpose();
    out.is_thing.push_back(cj.at("is_thing").get<bool>());
    out.per_class.push_back({cj.at("eps").get<double>(), cj.at("min_pts").get<std::size_t>(),
                             cj.at("singleton").get<bool>()});
  }
  return out;
}

}  // namespace haec

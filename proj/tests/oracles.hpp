// Brute-force reference implementations shared by the unit and acceptance tests.
// Each one is written from the definition, not from the library code path.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "haec/cloud.hpp"
#include "haec/embed.hpp"
#include "haec/lift.hpp"
#include "haec/render.hpp"
#include "haec/rng.hpp"
#include "haec/superpoint.hpp"

namespace oracle {

using haec::RowMatrix;

inline Eigen::Vector3d random_unit(haec::Rng& rng) {
  Eigen::Vector3d v;
  do v = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  while (v.norm() < 1e-6);
  return v.normalized();
}

// Random rigid pose with random intrinsics.
inline haec::CameraPose random_pose(haec::Rng& rng) {
  haec::CameraPose pose;
  pose.intrinsic.width = 64 + int(rng.index(512));
  pose.intrinsic.height = 64 + int(rng.index(512));
  pose.intrinsic.fx = rng.uniform(50.0, 800.0);
  pose.intrinsic.fy = rng.uniform(50.0, 800.0);
  pose.intrinsic.cx = rng.uniform(0.0, pose.intrinsic.width);
  pose.intrinsic.cy = rng.uniform(0.0, pose.intrinsic.height);
  const Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  pose.extrinsic.setIdentity();
  pose.extrinsic.topLeftCorner<3, 3>() = q.normalized().toRotationMatrix();
  pose.extrinsic.topRightCorner<3, 1>() = Eigen::Vector3d(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
  return pose;
}

struct Pixel {
  double u, v, depth;
};

// P = K [I|0] E applied to the homogeneous point.
inline std::optional<Pixel> project(const Eigen::Vector3d& p, const haec::CameraPose& pose) {
  Eigen::Matrix<double, 3, 4> K = Eigen::Matrix<double, 3, 4>::Zero();
  K(0, 0) = pose.intrinsic.fx;
  K(1, 1) = pose.intrinsic.fy;
  K(0, 2) = pose.intrinsic.cx;
  K(1, 2) = pose.intrinsic.cy;
  K(2, 2) = 1.0;
  const Eigen::Vector4d cam = pose.extrinsic * p.homogeneous();
  const Eigen::Vector3d h = K * cam;
  if (!(cam.z() > haec::kMinDepth)) return std::nullopt;
  const Pixel px{h.x() / h.z(), h.y() / h.z(), cam.z()};
  if (px.u < 0 || px.v < 0 || px.u >= pose.intrinsic.width || px.v >= pose.intrinsic.height) return std::nullopt;
  return px;
}

// Per point: sum of pixel features over its correspondences, then divide by the count.
inline haec::FeatureField scatter_average(std::size_t n, std::size_t dim, std::span<const haec::Correspondence> corrs,
                                          std::span<const haec::FeatureMap* const> maps) {
  haec::FeatureField f = haec::FeatureField::empty(n, dim);
  RowMatrix sum = RowMatrix::Zero(Eigen::Index(n), Eigen::Index(dim));
  std::vector<double> count(n, 0.0);
  for (const auto& c : corrs) {
    sum.row(c.point_index) += maps[c.view]->at(c.u, c.v);
    count[c.point_index] += 1.0;
  }
  for (std::size_t p = 0; p < n; ++p) {
    f.hit_count[p] = std::uint32_t(count[p]);
    if (count[p] > 0) f.features.row(Eigen::Index(p)) = sum.row(Eigen::Index(p)) / count[p];
  }
  return f;
}

// Textbook DBSCAN on an all-pairs distance scan. Core points within eps of
// each other share a cluster; a border point joins the cluster whose lowest
// core index is smallest among its core neighbours; ids follow lowest member.
inline std::vector<int> dbscan(std::span<const Eigen::Vector3d> x, double eps, std::size_t min_pts) {
  const std::size_t n = x.size();
  std::vector<std::vector<std::size_t>> nb(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if ((x[i] - x[j]).norm() <= eps) nb[i].push_back(j);
  std::vector<char> core(n);
  for (std::size_t i = 0; i < n; ++i) core[i] = nb[i].size() >= min_pts;

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t a) {
    return parent[a] == a ? a : parent[a] = find(parent[a]);
  };
  for (std::size_t i = 0; i < n; ++i)
    if (core[i])
      for (auto j : nb[i])
        if (core[j]) {
          auto a = find(i), b = find(j);
          if (a != b) parent[std::max(a, b)] = std::min(a, b);  // root = lowest core index
        }

  std::vector<long> root(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) {
      root[i] = long(find(i));
      continue;
    }
    for (auto j : nb[i])
      if (core[j] && (root[i] < 0 || long(find(j)) < root[i])) root[i] = long(find(j));
  }
  std::map<long, int> id;
  std::vector<int> out(n, -1);
  for (std::size_t i = 0; i < n; ++i)
    if (root[i] >= 0) {
      auto it = id.find(root[i]);
      if (it == id.end()) it = id.emplace(root[i], int(id.size())).first;
      out[i] = it->second;
    }
  return out;
}

// k nearest by full scan, ordered by (distance, index).
inline std::vector<std::uint32_t> knn(std::span<const Eigen::Vector3d> x, const Eigen::Vector3d& q, std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> d;
  for (std::size_t i = 0; i < x.size(); ++i) d.emplace_back((x[i] - q).squaredNorm(), std::uint32_t(i));
  std::sort(d.begin(), d.end());
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < std::min(k, d.size()); ++i) out.push_back(d[i].second);
  return out;
}

// Squared deviations from the component means plus lambda per cut edge.
inline double partition_energy(std::size_t n, std::span<const haec::Edge> edges, const RowMatrix& f,
                               std::span<const std::uint32_t> comp, double lambda) {
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[comp[i]].push_back(i);
  double e = 0.0;
  for (const auto& [c, members] : groups) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(f.cols());
    for (auto i : members) mean += f.row(Eigen::Index(i));
    mean /= double(members.size());
    for (auto i : members) e += (f.row(Eigen::Index(i)) - mean).squaredNorm();
  }
  for (const auto& [a, b] : edges) e += comp[a] != comp[b] ? lambda : 0.0;
  return e;
}

// Minimum energy over every set partition (restricted growth strings).
inline double exhaustive_partition(std::size_t n, std::span<const haec::Edge> edges, const RowMatrix& f, double lambda) {
  std::vector<std::uint32_t> a(n, 0);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::uint32_t)> rec = [&](std::size_t i, std::uint32_t used) {
    if (i == n) {
      best = std::min(best, partition_energy(n, edges, f, a, lambda));
      return;
    }
    for (std::uint32_t c = 0; c <= used && c < n; ++c) {
      a[i] = c;
      rec(i + 1, std::max(used, c + 1));
    }
  };
  if (n == 0) return 0.0;
  a[0] = 0;
  rec(1, 1);
  return best;
}

// E * sum_e f_e P_e with f from the selections and P from the probabilities, in two separate passes.
inline double load_balance(const Eigen::MatrixXd& probs, std::span<const std::array<int, 2>> sel) {
  const Eigen::Index E = probs.cols();
  std::vector<double> f(std::size_t(E), 0.0), P(std::size_t(E), 0.0);
  for (const auto& s : sel) {
    f[std::size_t(s[0])] += 1.0;
    f[std::size_t(s[1])] += 1.0;
  }
  for (auto& v : f) v /= 2.0 * double(sel.size());
  for (Eigen::Index r = 0; r < probs.rows(); ++r)
    for (Eigen::Index e = 0; e < E; ++e) P[std::size_t(e)] += probs(r, e);
  for (auto& v : P) v /= double(probs.rows());
  double s = 0.0;
  for (Eigen::Index e = 0; e < E; ++e) s += f[std::size_t(e)] * P[std::size_t(e)];
  return double(E) * s;
}

// Mean binary cross-entropy with positives and negatives weighted equally when both occur.
inline double balanced_bce(std::span<const double> p, std::span<const double> y) {
  double pos = 0, neg = 0, np = 0, nn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] > 0.5) pos -= std::log(p[i]), np += 1;
    else neg -= std::log(1.0 - p[i]), nn += 1;
  }
  if (np == 0 || nn == 0) return (pos + neg) / double(p.size());
  return 0.5 * pos / np + 0.5 * neg / nn;
}

// Components of the graph restricted to thing nodes and edges above threshold; ids by lowest node.
inline std::vector<int> threshold_components(std::size_t n, std::span<const haec::Edge> edges,
                                             std::span<const double> aff, double thr,
                                             std::span<const std::uint8_t> thing) {
  std::vector<int> out(n, -1);
  int next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (!thing[s] || out[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    out[s] = next;
    while (!stack.empty()) {
      auto u = stack.back();
      stack.pop_back();
      for (std::size_t e = 0; e < edges.size(); ++e) {
        if (!(aff[e] > thr)) continue;
        std::size_t v;
        if (edges[e].first == u) v = edges[e].second;
        else if (edges[e].second == u) v = edges[e].first;
        else continue;
        if (thing[v] && out[v] < 0) out[v] = next, stack.push_back(v);
      }
    }
    ++next;
  }
  return out;
}

}  // namespace oracle

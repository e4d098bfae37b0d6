#include "haec/kdtree.hpp"

#include <algorithm>
#include <queue>

namespace haec {

namespace {

constexpr std::uint32_t kLeafSize = 12;

double box_dist2(const Eigen::Vector3d& q, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi) {
  double d2 = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = q[a] < lo[a] ? lo[a] - q[a] : (q[a] > hi[a] ? q[a] - hi[a] : 0.0);
    d2 += d * d;
  }
  return d2;
}

bool closer(const Neighbor& a, const Neighbor& b) {
  return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

}  // namespace

KdTree::KdTree(std::span<const Eigen::Vector3d> points) : points_(points) {
  order_.resize(points.size());
  for (std::uint32_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (!points.empty()) {
    nodes_.reserve(2 * points.size() / kLeafSize + 2);
    build(0, static_cast<std::uint32_t>(points.size()));
  }
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({});
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  nodes_[id].lo = lo;
  nodes_[id].hi = hi;
  if (end - begin <= kLeafSize) return id;

  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     const double pa = points_[a][axis], pb = points_[b][axis];
                     return pa < pb || (pa == pb && a < b);
                   });
  nodes_[id].axis = axis;
  nodes_[id].split = points_[order_[mid]][axis];
  const std::int32_t left = build(begin, mid);
  const std::int32_t right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

std::vector<Neighbor> KdTree::knn(const Eigen::Vector3d& q, std::size_t k) const {
  std::vector<Neighbor> heap;  // max-heap under closer()
  if (k == 0 || nodes_.empty()) return heap;
  heap.reserve(k + 1);
  auto worst = [&] { return heap.size() < k ? std::numeric_limits<double>::infinity() : heap.front().dist2; };

  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    // Ties at the bound may still displace a larger index, hence the strict test.
    if (box_dist2(q, node.lo, node.hi) > worst()) continue;
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::uint32_t idx = order_[i];
        const Neighbor cand{idx, (points_[idx] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), closer);
        } else if (closer(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), closer);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), closer);
        }
      }
      continue;
    }
    // Visit the near child first.
    const bool go_left = q[node.axis] < node.split;
    stack.push_back(go_left ? node.right : node.left);
    stack.push_back(go_left ? node.left : node.right);
  }
  std::sort_heap(heap.begin(), heap.end(), closer);
  return heap;
}

void KdTree::radius(const Eigen::Vector3d& q, double radius, std::vector<std::uint32_t>& out) const {
  out.clear();
  if (nodes_.empty()) return;
  const double r2 = radius * radius;
  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (box_dist2(q, node.lo, node.hi) > r2) continue;
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::uint32_t idx = order_[i];
        if ((points_[idx] - q).squaredNorm() <= r2) out.push_back(idx);
      }
      continue;
    }
    stack.push_back(node.left);
    stack.push_back(node.right);
  }
  std::sort(out.begin(), out.end());
}

}  // namespace haec

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace haec {

struct Neighbor {
  std::uint32_t index;
  double dist2;
};

// Static 3D kd-tree. Query results are ordered by (squared distance, index)
// so ties resolve identically on every platform.
class KdTree {
 public:
  explicit KdTree(std::span<const Eigen::Vector3d> points);

  std::size_t size() const { return points_.size(); }

  // The k nearest points to q, q itself included when it is a tree point.
  std::vector<Neighbor> knn(const Eigen::Vector3d& q, std::size_t k) const;

  // Indices of all points with distance <= radius, ascending by index.
  void radius(const Eigen::Vector3d& q, double radius, std::vector<std::uint32_t>& out) const;

 private:
  struct Node {
    std::uint32_t begin, end;  // range in order_
    std::int32_t left = -1, right = -1;
    int axis = -1;
    double split = 0.0;
    Eigen::Vector3d lo, hi;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::span<const Eigen::Vector3d> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace haec

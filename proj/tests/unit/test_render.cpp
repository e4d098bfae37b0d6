#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "haec/error.hpp"
#include "haec/render.hpp"
#include "oracles.hpp"

using namespace haec;

namespace {

double orthonormality_residual(const CameraPose& p) {
  const Eigen::Matrix3d r = p.rotation();
  return (r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
}

PointCloud box_cloud(double lo, double hi) {
  PointCloud c;
  c.positions = {Eigen::Vector3d::Constant(lo), Eigen::Vector3d::Constant(hi)};
  c.colors.assign(2, Eigen::Vector3d::Constant(0.5));
  return c;
}

}  // namespace

TEST_CASE("projection examples") {
  CameraPose pose;
  pose.intrinsic = {1.0, 1.0, 0.0, 0.0, 1, 1};
  auto p = project_point({0, 0, 1}, pose, false);
  REQUIRE(p);
  CHECK(p->u == 0.0);
  CHECK(p->v == 0.0);
  CHECK(p->depth == 1.0);

  pose.intrinsic = {100.0, 100.0, 256.0, 256.0, 512, 512};
  p = project_point({0.5, 0, 1}, pose);
  REQUIRE(p);
  CHECK(p->u == 306.0);
  CHECK_FALSE(project_point({0, 0, -1}, pose));
  CHECK_FALSE(project_point({0, 0, 0}, pose));
}

TEST_CASE("projection matches the homogeneous matrix oracle") {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    const auto pose = oracle::random_pose(rng);
    std::vector<Eigen::Vector3d> pts;
    for (int i = 0; i < 20; ++i) pts.emplace_back(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10));
    const auto got = project_points(pts, pose);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto want = oracle::project(pts[i], pose);
      REQUIRE(bool(got[i]) == bool(want));
      if (!want) continue;
      CHECK(std::abs(got[i]->u - want->u) < 1e-9);
      CHECK(std::abs(got[i]->v - want->v) < 1e-9);
    }
  }
}

TEST_CASE("grid rig counts and orientation") {
  const auto in = Intrinsics::square(64);
  auto rig = grid_rig(box_cloud(0, 100), 80, 10, in);
  CHECK(rig.grid_points.size() == 8);
  CHECK(rig.poses.size() == 64);
  CHECK_FALSE(rig.warning);
  for (const auto& p : rig.poses) CHECK(orthonormality_residual(p) < 1e-9);

  rig = grid_rig(box_cloud(0, 100), 80, 60, in);
  REQUIRE(rig.grid_points.size() == 1);
  CHECK(rig.poses.size() == 8);
  CHECK((rig.grid_points[0] - Eigen::Vector3d::Constant(50)).norm() < 1e-12);

  // flat box: z collapses to its center and the rig says so
  PointCloud flat = box_cloud(0, 100);
  flat.positions[1].z() = 1.0;
  rig = grid_rig(flat, 80, 10, in);
  CHECK(rig.warning);
  CHECK(rig.grid_points.size() == 4);
  for (const auto& g : rig.grid_points) CHECK(g.z() == 0.5);

  CHECK_THROWS_AS(grid_rig(flat, 0.0, 1.0, in), ArgumentError);
}

TEST_CASE("cube rig looks at its target") {
  const auto in = Intrinsics::square(128);
  const auto poses = cube_rig(Eigen::Vector3d::Zero(), std::sqrt(3.0), in);
  REQUIRE(poses.size() == 8);
  for (int k = 0; k < 8; ++k) {
    const Eigen::Vector3d want((k & 1) ? 1 : -1, (k & 2) ? 1 : -1, (k & 4) ? 1 : -1);
    CHECK((poses[std::size_t(k)].center() - want).norm() < 1e-12);
    CHECK(poses[std::size_t(k)].rotation().determinant() == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Eigen::Vector3d target(3, -2, 5);
  for (const auto& p : cube_rig(target, 4.0, in)) {
    const auto px = project_point(target, p);
    REQUIRE(px);
    CHECK(std::hypot(px->u - in.cx, px->v - in.cy) < 0.5);
  }
}

TEST_CASE("splat z-buffer") {
  CameraPose pose;
  pose.intrinsic = Intrinsics::square(32);
  PointCloud empty;
  empty.positions = {Eigen::Vector3d(0, 0, -5)};
  empty.colors = {Eigen::Vector3d(1, 1, 1)};
  const auto blank = splat_render(empty, pose, 2, "e");
  for (auto d : blank.depth) CHECK(std::isinf(d));
  for (auto b : blank.rgb) CHECK(b == 0);

  PointCloud two;
  two.positions = {Eigen::Vector3d(0, 0, 2), Eigen::Vector3d(0, 0, 1)};
  two.colors = {Eigen::Vector3d(0, 0, 1), Eigen::Vector3d(1, 0, 0)};
  const auto v = splat_render(two, pose, 0, "t");
  const auto px = project_point({0, 0, 1}, pose);
  CHECK(v.depth[v.pixel(px->px(), px->py())] == 1.0f);
  CHECK(v.color(px->px(), px->py()) == Eigen::Vector3d(1, 0, 0));
}

TEST_CASE("rendered depth equals the per-pixel minimum over covering splats") {
  Rng rng(23);
  PointCloud c;
  for (int i = 0; i < 1000; ++i) {
    c.positions.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 6));
    c.colors.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());
  }
  CameraPose pose;
  pose.intrinsic = Intrinsics::square(48, 70.0);
  const int splat = 1;
  const auto v = splat_render(c, pose, splat, "r");
  for (int y = 0; y < v.height; ++y)
    for (int x = 0; x < v.width; ++x) {
      float best = std::numeric_limits<float>::infinity();
      std::size_t owner = 0;
      for (std::size_t i = 0; i < c.size(); ++i) {
        const auto p = oracle::project(c.positions[i], pose);
        if (!p) continue;
        const int px = int(std::floor(p->u)), py = int(std::floor(p->v));
        if (std::abs(px - x) > splat || std::abs(py - y) > splat) continue;
        if (float(p->depth) < best) best = float(p->depth), owner = i;
      }
      CHECK(v.depth[v.pixel(x, y)] == best);
      if (std::isfinite(best)) {
        for (int ch = 0; ch < 3; ++ch)
          CHECK(v.rgb[3 * v.pixel(x, y) + std::size_t(ch)] == std::uint8_t(std::lround(c.colors[owner][ch] * 255.0)));
      }
    }
}

TEST_CASE("view files and pose records round trip") {
  Rng rng(4);
  PointCloud c;
  for (int i = 0; i < 300; ++i) {
    c.positions.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 4));
    c.colors.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());
  }
  auto pose = oracle::random_pose(rng);
  pose = look_at({0, 0, -2}, {0, 0, 3}, Intrinsics::square(40));
  const auto v = splat_render(c, pose, 1, "view_a");
  const auto dir = std::filesystem::temp_directory_path() / "haec_view_rt";
  std::filesystem::create_directories(dir);
  write_ppm(dir / "a.ppm", v);
  write_depth(dir / "a.hdm", v);
  const auto [id, back_pose] = parse_pose_record(pose_record("view_a", pose));
  CHECK(id == "view_a");
  CHECK((back_pose.extrinsic - pose.extrinsic).cwiseAbs().maxCoeff() == 0.0);
  const auto back = read_view(dir / "a.ppm", dir / "a.hdm", id, back_pose);
  std::filesystem::remove_all(dir);
  CHECK(back.rgb == v.rgb);
  CHECK(back.depth == v.depth);
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "haec/cloud.hpp"

namespace haec {

struct Intrinsics {
  double fx = 256.0, fy = 256.0;  // focal lengths, pixels
  double cx = 256.0, cy = 256.0;  // principal point, pixels
  int width = 512, height = 512;

  // Square image with the given horizontal field of view.
  static Intrinsics square(int size, double hfov_deg = 90.0);
};

// Pinhole camera. The extrinsic maps world to camera coordinates; the camera
// looks along +z with x to the right and y down the image.
struct CameraPose {
  Intrinsics intrinsic;
  Eigen::Matrix4d extrinsic = Eigen::Matrix4d::Identity();

  void validate() const;
  Eigen::Matrix3d rotation() const { return extrinsic.topLeftCorner<3, 3>(); }
  Eigen::Vector3d center() const;
};

// Pixel (u, v) in continuous image coordinates; pixel (i, j) covers [i, i+1) x [j, j+1).
struct Projection {
  double u = 0.0, v = 0.0, depth = 0.0;
  int px() const { return static_cast<int>(std::floor(u)); }
  int py() const { return static_cast<int>(std::floor(v)); }
};

constexpr double kMinDepth = 1e-6;

std::optional<Projection> project_point(const Eigen::Vector3d& p, const CameraPose& pose,
                                        bool check_bounds = true);
std::vector<std::optional<Projection>> project_points(std::span<const Eigen::Vector3d> points,
                                                      const CameraPose& pose);

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Intrinsics& intrinsic);
// Level camera at `center` facing azimuth `azimuth_rad` (counter-clockwise from +x).
CameraPose horizontal_camera(const Eigen::Vector3d& center, double azimuth_rad, const Intrinsics& intrinsic);

struct GridRig {
  std::vector<Eigen::Vector3d> grid_points;
  std::vector<CameraPose> poses;  // 8 per grid point, azimuths 0, 45, ..., 315 degrees
  // Set when the inset box was empty along some axis and that axis collapsed to its center.
  bool warning = false;
};

GridRig grid_rig(const PointCloud& cloud, double spacing, double margin, const Intrinsics& intrinsic);
std::vector<CameraPose> cube_rig(const Eigen::Vector3d& target, double radius, const Intrinsics& intrinsic);

struct RenderedView {
  std::string view_id;
  CameraPose pose;
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
  std::vector<float> depth;       // row-major meters, +inf where nothing was drawn

  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  Eigen::Vector3d color(int x, int y) const;
  bool painted(int x, int y) const { return std::isfinite(depth[pixel(x, y)]); }
};

// Z-buffered square splats of side 2*splat_px+1; on equal depth the lower point index wins.
RenderedView splat_render(const PointCloud& cloud, const CameraPose& pose, int splat_px, std::string view_id);

void write_ppm(const std::filesystem::path& path, const RenderedView& view);
void write_depth(const std::filesystem::path& path, const RenderedView& view);
// Reads the image and depth sidecar back; the pose comes from the manifest.
RenderedView read_view(const std::filesystem::path& ppm, const std::filesystem::path& depth,
                       std::string view_id, const CameraPose& pose);

std::string pose_record(const std::string& view_id, const CameraPose& pose);
std::pair<std::string, CameraPose> parse_pose_record(const std::string& line);

}  // namespace haec

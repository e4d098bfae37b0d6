#include "haec/render.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"
#include "json.hpp"

namespace haec {

Intrinsics Intrinsics::square(int size, double hfov_deg) {
  Intrinsics k;
  k.width = k.height = size;
  k.fx = k.fy = 0.5 * size / std::tan(0.5 * hfov_deg * M_PI / 180.0);
  k.cx = k.cy = 0.5 * size;
  return k;
}

void CameraPose::validate() const {
  if (!(intrinsic.fx > 0.0 && intrinsic.fy > 0.0)) throw ArgumentError("focal lengths must be positive");
  if (intrinsic.width < 16 || intrinsic.height < 16) throw ArgumentError("image must be at least 16x16");
  const Eigen::Matrix3d r = rotation();
  if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(r.determinant() - 1.0) > 1e-9)
    throw ArgumentError("extrinsic rotation is not a proper rotation");
}

Eigen::Vector3d CameraPose::center() const {
  return -rotation().transpose() * extrinsic.topRightCorner<3, 1>();
}

std::optional<Projection> project_point(const Eigen::Vector3d& p, const CameraPose& pose, bool check_bounds) {
  const Eigen::Vector3d q = pose.rotation() * p + pose.extrinsic.topRightCorner<3, 1>();
  if (q.z() <= kMinDepth) return std::nullopt;
  const auto& k = pose.intrinsic;
  Projection out{k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy, q.z()};
  if (check_bounds && !(out.u >= 0.0 && out.u < k.width && out.v >= 0.0 && out.v < k.height))
    return std::nullopt;
  return out;
}

std::vector<std::optional<Projection>> project_points(std::span<const Eigen::Vector3d> points,
                                                      const CameraPose& pose) {
  std::vector<std::optional<Projection>> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(project_point(p, pose));
  return out;
}

namespace {

CameraPose from_axes(const Eigen::Vector3d& eye, const Eigen::Vector3d& forward, const Eigen::Vector3d& up,
                     const Intrinsics& intrinsic) {
  const Eigen::Vector3d z = forward.normalized();
  const Eigen::Vector3d x = z.cross(up).normalized();
  const Eigen::Vector3d y = z.cross(x);
  CameraPose pose;
  pose.intrinsic = intrinsic;
  Eigen::Matrix3d r;
  r.row(0) = x;
  r.row(1) = y;
  r.row(2) = z;
  pose.extrinsic.topLeftCorner<3, 3>() = r;
  pose.extrinsic.topRightCorner<3, 1>() = -r * eye;
  return pose;
}

}  // namespace

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Intrinsics& intrinsic) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d up(0.0, 0.0, 1.0);
  if (forward.cross(up).norm() < 1e-6) up = Eigen::Vector3d(0.0, 1.0, 0.0);
  return from_axes(eye, forward, up, intrinsic);
}

CameraPose horizontal_camera(const Eigen::Vector3d& center, double azimuth_rad, const Intrinsics& intrinsic) {
  const Eigen::Vector3d forward(std::cos(azimuth_rad), std::sin(azimuth_rad), 0.0);
  return from_axes(center, forward, Eigen::Vector3d(0.0, 0.0, 1.0), intrinsic);
}

GridRig grid_rig(const PointCloud& cloud, double spacing, double margin, const Intrinsics& intrinsic) {
  if (!(spacing > 0.0)) throw ArgumentError("grid spacing must be positive");
  if (!(margin >= 0.0)) throw ArgumentError("grid margin must be non-negative");
  const Eigen::Vector3d lo = cloud.bbox_min(), hi = cloud.bbox_max();

  GridRig rig;
  std::array<std::vector<double>, 3> ticks;
  for (int a = 0; a < 3; ++a) {
    const double start = lo[a] + margin, stop = hi[a] - margin;
    if (start > stop) {
      ticks[a].push_back(0.5 * (lo[a] + hi[a]));
      rig.warning = true;
      continue;
    }
    const auto steps = static_cast<std::size_t>(std::floor((stop - start) / spacing + 1e-9));
    for (std::size_t i = 0; i <= steps; ++i) ticks[a].push_back(start + static_cast<double>(i) * spacing);
  }
  // A fully collapsed box is the documented degenerate single-point grid, not a warning.
  bool all_collapsed = true;
  for (int a = 0; a < 3; ++a) all_collapsed &= lo[a] + margin > hi[a] - margin;
  if (all_collapsed) rig.warning = false;

  for (double z : ticks[2])
    for (double y : ticks[1])
      for (double x : ticks[0]) {
        const Eigen::Vector3d c(x, y, z);
        rig.grid_points.push_back(c);
        for (int k = 0; k < 8; ++k) rig.poses.push_back(horizontal_camera(c, k * M_PI / 4.0, intrinsic));
      }
  return rig;
}

std::vector<CameraPose> cube_rig(const Eigen::Vector3d& target, double radius, const Intrinsics& intrinsic) {
  if (!(radius > 0.0)) throw ArgumentError("cube rig radius must be positive");
  std::vector<CameraPose> poses;
  poses.reserve(8);
  const double s = radius / std::sqrt(3.0);
  for (int k = 0; k < 8; ++k) {
    const Eigen::Vector3d corner((k & 1) ? s : -s, (k & 2) ? s : -s, (k & 4) ? s : -s);
    poses.push_back(look_at(target + corner, target, intrinsic));
  }
  return poses;
}

Eigen::Vector3d RenderedView::color(int x, int y) const {
  const std::size_t i = 3 * pixel(x, y);
  return Eigen::Vector3d(rgb[i], rgb[i + 1], rgb[i + 2]) / 255.0;
}

RenderedView splat_render(const PointCloud& cloud, const CameraPose& pose, int splat_px, std::string view_id) {
  if (splat_px < 0) throw ArgumentError("splat radius must be non-negative");
  const int w = pose.intrinsic.width, h = pose.intrinsic.height;
  RenderedView view;
  view.view_id = std::move(view_id);
  view.pose = pose;
  view.width = w;
  view.height = h;
  view.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
  view.depth.assign(static_cast<std::size_t>(w) * h, std::numeric_limits<float>::infinity());
  std::vector<std::uint32_t> owner(static_cast<std::size_t>(w) * h, std::numeric_limits<std::uint32_t>::max());

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto proj = project_point(cloud.positions[i], pose);
    if (!proj) continue;
    const float d = static_cast<float>(proj->depth);
    const int x0 = std::max(0, proj->px() - splat_px), x1 = std::min(w - 1, proj->px() + splat_px);
    const int y0 = std::max(0, proj->py() - splat_px), y1 = std::min(h - 1, proj->py() + splat_px);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const std::size_t pix = view.pixel(x, y);
        if (d < view.depth[pix]) {
          view.depth[pix] = d;
          owner[pix] = static_cast<std::uint32_t>(i);
        }
      }
  }
  for (std::size_t pix = 0; pix < owner.size(); ++pix) {
    if (owner[pix] == std::numeric_limits<std::uint32_t>::max()) continue;
    const Eigen::Vector3d& c = cloud.colors[owner[pix]];
    for (int ch = 0; ch < 3; ++ch)
      view.rgb[3 * pix + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(c[ch], 0.0, 1.0) * 255.0));
  }
  return view;
}

void write_ppm(const std::filesystem::path& path, const RenderedView& view) {
  std::string out = "P6\n" + std::to_string(view.width) + " " + std::to_string(view.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(view.rgb.data()), view.rgb.size());
  io::write_file(path, out);
}

void write_depth(const std::filesystem::path& path, const RenderedView& view) {
  io::ByteWriter out;
  out.put_bytes("HDM1");
  out.put(static_cast<std::uint32_t>(view.height));
  out.put(static_cast<std::uint32_t>(view.width));
  out.put_span(std::span<const float>(view.depth));
  io::write_file(path, out.bytes());
}

RenderedView read_view(const std::filesystem::path& ppm, const std::filesystem::path& depth,
                       std::string view_id, const CameraPose& pose) {
  RenderedView view;
  view.view_id = std::move(view_id);
  view.pose = pose;

  const auto img = io::read_file(ppm);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < img.size() && std::isspace(static_cast<unsigned char>(img[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < img.size() && !std::isspace(static_cast<unsigned char>(img[pos]))) ++pos;
    if (start == pos) throw ParseError(ppm.string() + ": truncated PPM header", start);
    return std::string(img.data() + start, pos - start);
  };
  if (token() != "P6") throw ParseError(ppm.string() + ": not a binary PPM", 0);
  view.width = std::stoi(token());
  view.height = std::stoi(token());
  if (token() != "255") throw ParseError(ppm.string() + ": only 8-bit PPM supported", pos);
  ++pos;
  const std::size_t n = static_cast<std::size_t>(view.width) * view.height;
  if (img.size() - pos < 3 * n) throw ParseError(ppm.string() + ": truncated pixel data", img.size());
  view.rgb.assign(img.begin() + static_cast<std::ptrdiff_t>(pos),
                  img.begin() + static_cast<std::ptrdiff_t>(pos + 3 * n));

  const auto dbytes = io::read_file(depth);
  io::ByteReader in(dbytes);
  in.expect_magic("HDM1");
  const auto h = in.get<std::uint32_t>();
  const auto w = in.get<std::uint32_t>();
  if (static_cast<int>(h) != view.height || static_cast<int>(w) != view.width)
    throw ParseError(depth.string() + ": depth map size differs from image", 4);
  view.depth.resize(n);
  in.get_into(std::span<float>(view.depth));
  return view;
}

std::string pose_record(const std::string& view_id, const CameraPose& pose) {
  nlohmann::ordered_json j;
  j["view_id"] = view_id;
  std::vector<double> e(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) e[4 * r + c] = pose.extrinsic(r, c);
  j["extrinsic"] = e;
  const auto& k = pose.intrinsic;
  j["intrinsic"] = {k.fx, k.fy, k.cx, k.cy, k.width, k.height};
  return j.dump();
}

std::pair<std::string, CameraPose> parse_pose_record(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  CameraPose pose;
  const auto e = j.at("extrinsic").get<std::vector<double>>();
  if (e.size() != 16) throw ParseError("pose record extrinsic must have 16 entries", 0);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pose.extrinsic(r, c) = e[4 * r + c];
  const auto& k = j.at("intrinsic");
  pose.intrinsic.fx = k.at(0).get<double>();
  pose.intrinsic.fy = k.at(1).get<double>();
  pose.intrinsic.cx = k.at(2).get<double>();
  pose.intrinsic.cy = k.at(3).get<double>();
  pose.intrinsic.width = k.at(4).get<int>();
  pose.intrinsic.height = k.at(5).get<int>();
  return {j.at("view_id").get<std::string>(), pose};
}

}  // namespace haec

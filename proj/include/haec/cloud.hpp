#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace haec {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

// Vertex property that is not one of the core fields (e.g. pseudo-labels, query similarity).
struct ScalarProperty {
  std::string name;
  PlyType type = PlyType::f32;
  std::vector<double> values;
};

struct PointCloud {
  std::vector<Eigen::Vector3d> positions;
  std::vector<Eigen::Vector3d> colors;  // RGB in [0, 1]
  std::optional<std::vector<int>> gt_semantic;
  std::optional<std::vector<int>> gt_instance;  // -1 = none
  std::vector<ScalarProperty> extra;

  std::size_t size() const { return positions.size(); }

  // Throws ArgumentError when an invariant does not hold.
  void validate() const;

  const ScalarProperty* find_extra(std::string_view name) const;
  void set_extra(std::string name, PlyType type, std::vector<double> values);

  Eigen::Vector3d bbox_min() const;
  Eigen::Vector3d bbox_max() const;
};

// Per-point lifted feature vectors. Rows with hit_count == 0 are undefined and kept at zero.
struct FeatureField {
  std::size_t dim = 0;
  RowMatrix features;
  std::vector<std::uint32_t> hit_count;

  static FeatureField empty(std::size_t n_points, std::size_t dim);
  std::size_t size() const { return hit_count.size(); }
  bool defined(std::size_t p) const { return hit_count[p] > 0; }
};

enum class PlyFormat { ascii, binary_little_endian };

struct PlyWriteOptions {
  // 8-bit colors for viewers; the default writes doubles so a reload is exact.
  bool uchar_colors = false;
};

PointCloud parse_ply(std::span<const char> bytes);
PointCloud load_cloud(const std::filesystem::path& path);
// Fails with ParseError when the file is not in the requested encoding.
PointCloud load_cloud(const std::filesystem::path& path, PlyFormat format);

std::string serialize_ply(const PointCloud& cloud, PlyFormat format, const PlyWriteOptions& options = {});
void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, PlyFormat format,
                const PlyWriteOptions& options = {});

// One point per occupied voxel (centroid, mean color, majority labels with
// ties to the smallest id), ordered by linear voxel index.
PointCloud voxel_downsample(const PointCloud& cloud, double voxel);

void save_field(const std::filesystem::path& path, const FeatureField& field);
FeatureField load_field(const std::filesystem::path& path);

}  // namespace haec

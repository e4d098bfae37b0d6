#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "haec/cloud.hpp"
#include "haec/render.hpp"

namespace haec {

// H x W x C per-pixel features stored as a codebook plus one code per pixel.
// A dense map has one codebook row per pixel; the mock provider emits one row
// per palette concept, which keeps large views cheap.
struct FeatureMap {
  int width = 0, height = 0;
  RowMatrix codebook;
  std::vector<std::uint32_t> code;

  std::size_t dim() const { return static_cast<std::size_t>(codebook.cols()); }
  auto at(int x, int y) const { return codebook.row(code[static_cast<std::size_t>(y) * width + x]); }
  static FeatureMap dense(int width, int height, RowMatrix pixels);
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  // All three return unit-norm vectors of dimension dim().
  virtual Eigen::VectorXd text_embed(std::string_view text) const = 0;
  virtual Eigen::VectorXd image_embed(const RenderedView& view) const = 0;
  virtual FeatureMap pixel_features(const RenderedView& view) const = 0;
};

struct PaletteEntry {
  std::array<std::uint8_t, 3> color{};
  std::string token;
  // Prompts this concept leans towards (e.g. "an object", "a normal scene").
  std::vector<std::string> anchors;
};

// Deterministic stand-in for the vision-language encoders. Text vectors are
// seeded Gaussian hashes of the token; palette tokens are blended with their
// anchors. Each pixel takes the vector of the nearest palette color.
class MockProvider final : public EmbeddingProvider {
 public:
  MockProvider(std::uint64_t seed, std::vector<PaletteEntry> palette, std::size_t dim = 256,
               double anchor_weight = 0.5);

  std::size_t dim() const override { return dim_; }
  Eigen::VectorXd text_embed(std::string_view text) const override;
  Eigen::VectorXd image_embed(const RenderedView& view) const override;
  FeatureMap pixel_features(const RenderedView& view) const override;

  const std::vector<PaletteEntry>& palette() const { return palette_; }
  std::size_t palette_index(const std::array<std::uint8_t, 3>& rgb) const;

 private:
  Eigen::VectorXd hash_vector(std::string_view token) const;

  std::uint64_t seed_;
  std::size_t dim_;
  std::vector<PaletteEntry> palette_;
  RowMatrix palette_vectors_;
};

std::unique_ptr<EmbeddingProvider> mock_provider(std::uint64_t seed, std::vector<PaletteEntry> palette,
                                                 std::size_t dim = 256);

// Precomputed embeddings on disk:
//   <dir>/<view_id>.hfm1   per-pixel features
//   <dir>/<view_id>.hev1   optional image embedding (else the renormalized mean pixel feature)
//   <dir>/text_index.json  {"token": "file.hev1", ...}
class FileProvider final : public EmbeddingProvider {
 public:
  explicit FileProvider(std::filesystem::path dir);
  std::size_t dim() const override { return dim_; }
  Eigen::VectorXd text_embed(std::string_view text) const override;
  Eigen::VectorXd image_embed(const RenderedView& view) const override;
  FeatureMap pixel_features(const RenderedView& view) const override;

 private:
  std::filesystem::path dir_;
  std::size_t dim_ = 0;
  std::vector<std::pair<std::string, std::string>> text_files_;
};

struct Label {
  std::string text;
  Eigen::VectorXd vec;
};

struct ViewVerdict {
  std::string view_id;
  bool keep = false;
  std::string best_label;
  double probability = 0.0;
};

// Joint softmax over logit_scale * cosine against every label; kept iff the
// winner is a positive label with probability strictly above threshold.
ViewVerdict classify_view(const Eigen::VectorXd& image_vec, std::span<const Label> positives,
                          std::span<const Label> negatives, double threshold, double logit_scale);

inline constexpr std::string_view kThingPrompt = "an object";
inline constexpr std::string_view kStuffPrompt = "amorphous, uncountable stuff";

enum class ThingKind { thing, stuff };

// Probability of exactly 0.5 resolves to stuff.
ThingKind things_stuff(const Eigen::VectorXd& class_vec, const EmbeddingProvider& provider,
                       double logit_scale = 100.0);
double thing_probability(const Eigen::VectorXd& class_vec, const Eigen::VectorXd& thing_vec,
                         const Eigen::VectorXd& stuff_vec, double logit_scale);

std::vector<Label> embed_labels(const EmbeddingProvider& provider, std::span<const std::string> texts);

void write_feature_map(const std::filesystem::path& path, const FeatureMap& map);
FeatureMap read_feature_map(const std::filesystem::path& path);
void write_vector(const std::filesystem::path& path, const Eigen::VectorXd& v);
Eigen::VectorXd read_vector(const std::filesystem::path& path);

}  // namespace haec

#include "haec/embed.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"
#include "haec/rng.hpp"
#include "json.hpp"

namespace haec {

FeatureMap FeatureMap::dense(int width, int height, RowMatrix pixels) {
  if (pixels.rows() != static_cast<Eigen::Index>(width) * height)
    throw ArgumentError("dense feature map needs one row per pixel");
  FeatureMap m;
  m.width = width;
  m.height = height;
  m.codebook = std::move(pixels);
  m.code.resize(static_cast<std::size_t>(width) * height);
  for (std::uint32_t i = 0; i < m.code.size(); ++i) m.code[i] = i;
  return m;
}

namespace {

Eigen::VectorXd mean_feature(const FeatureMap& map) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(map.codebook.rows()), 0);
  for (auto c : map.code) ++counts[c];
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(map.dim()));
  for (std::size_t k = 0; k < counts.size(); ++k)
    if (counts[k]) sum += static_cast<double>(counts[k]) * map.codebook.row(static_cast<Eigen::Index>(k)).transpose();
  const double n = sum.norm();
  return n > 0.0 ? Eigen::VectorXd(sum / n) : sum;
}

}  // namespace

MockProvider::MockProvider(std::uint64_t seed, std::vector<PaletteEntry> palette, std::size_t dim,
                           double anchor_weight)
    : seed_(seed), dim_(dim), palette_(std::move(palette)) {
  if (dim_ == 0) throw ArgumentError("embedding dimension must be positive");
  if (palette_.empty()) throw ArgumentError("mock palette must not be empty");
  palette_vectors_.resize(static_cast<Eigen::Index>(palette_.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t k = 0; k < palette_.size(); ++k) {
    Eigen::VectorXd v = hash_vector(palette_[k].token);
    for (const auto& a : palette_[k].anchors) v += anchor_weight * hash_vector(a);
    palette_vectors_.row(static_cast<Eigen::Index>(k)) = v.normalized().transpose();
  }
}

Eigen::VectorXd MockProvider::hash_vector(std::string_view token) const {
  Rng rng(mix_seed(seed_, fnv1a(token)));
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim_));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  return v.normalized();
}

Eigen::VectorXd MockProvider::text_embed(std::string_view text) const {
  for (std::size_t k = 0; k < palette_.size(); ++k)
    if (palette_[k].token == text) return palette_vectors_.row(static_cast<Eigen::Index>(k)).transpose();
  return hash_vector(text);
}

std::size_t MockProvider::palette_index(const std::array<std::uint8_t, 3>& rgb) const {
  std::size_t best = 0;
  int best_d = std::numeric_limits<int>::max();
  for (std::size_t k = 0; k < palette_.size(); ++k) {
    int d = 0;
    for (int c = 0; c < 3; ++c) {
      const int diff = int(rgb[c]) - int(palette_[k].color[c]);
      d += diff * diff;
    }
    if (d < best_d) best_d = d, best = k;
  }
  return best;
}

FeatureMap MockProvider::pixel_features(const RenderedView& view) const {
  FeatureMap m;
  m.width = view.width;
  m.height = view.height;
  m.codebook = palette_vectors_;
  m.code.resize(static_cast<std::size_t>(view.width) * view.height);
  std::unordered_map<std::uint32_t, std::uint32_t> cache;
  for (std::size_t i = 0; i < m.code.size(); ++i) {
    const std::array<std::uint8_t, 3> rgb{view.rgb[3 * i], view.rgb[3 * i + 1], view.rgb[3 * i + 2]};
    const std::uint32_t key = (std::uint32_t(rgb[0]) << 16) | (std::uint32_t(rgb[1]) << 8) | rgb[2];
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, static_cast<std::uint32_t>(palette_index(rgb))).first;
    m.code[i] = it->second;
  }
  return m;
}

Eigen::VectorXd MockProvider::image_embed(const RenderedView& view) const {
  return mean_feature(pixel_features(view));
}

std::unique_ptr<EmbeddingProvider> mock_provider(std::uint64_t seed, std::vector<PaletteEntry> palette,
                                                 std::size_t dim) {
  return std::make_unique<MockProvider>(seed, std::move(palette), dim);
}

FileProvider::FileProvider(std::filesystem::path dir) : dir_(std::move(dir)) {
  const auto index_path = dir_ / "text_index.json";
  if (!std::filesystem::exists(index_path))
    throw PrerequisiteError("feature directory lacks text_index.json: " + dir_.string());
  const auto bytes = io::read_file(index_path);
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
  for (auto it = j.begin(); it != j.end(); ++it) text_files_.emplace_back(it.key(), it.value().get<std::string>());
  if (text_files_.empty()) throw ParseError(index_path.string() + ": empty text index", 0);
  dim_ = static_cast<std::size_t>(read_vector(dir_ / text_files_.front().second).size());
}

Eigen::VectorXd FileProvider::text_embed(std::string_view text) const {
  for (const auto& [token, file] : text_files_) {
    if (token != text) continue;
    Eigen::VectorXd v = read_vector(dir_ / file);
    if (static_cast<std::size_t>(v.size()) != dim_) throw ArgumentError("text embedding dimension mismatch: " + token);
    return v.normalized();
  }
  throw ArgumentError("no precomputed embedding for text \"" + std::string(text) + "\"");
}

Eigen::VectorXd FileProvider::image_embed(const RenderedView& view) const {
  const auto path = dir_ / (view.view_id + ".hev1");
  if (std::filesystem::exists(path)) return read_vector(path).normalized();
  return mean_feature(pixel_features(view));
}

FeatureMap FileProvider::pixel_features(const RenderedView& view) const {
  const auto path = dir_ / (view.view_id + ".hfm1");
  if (!std::filesystem::exists(path)) throw PrerequisiteError("missing feature map " + path.string());
  FeatureMap m = read_feature_map(path);
  if (m.width != view.width || m.height != view.height)
    throw ArgumentError("feature map size differs from view " + view.view_id);
  if (m.dim() != dim_) throw ArgumentError("feature map dimension mismatch for view " + view.view_id);
  return m;
}

ViewVerdict classify_view(const Eigen::VectorXd& image_vec, std::span<const Label> positives,
                          std::span<const Label> negatives, double threshold, double logit_scale) {
  if (positives.empty() || negatives.empty())
    throw ArgumentError("view classification needs at least one positive and one negative label");
  const double img_norm = image_vec.norm();
  std::vector<double> logits;
  std::vector<const Label*> labels;
  for (auto group : {positives, negatives})
    for (const auto& l : group) {
      const double denom = img_norm * l.vec.norm();
      logits.push_back(logit_scale * (denom > 0.0 ? image_vec.dot(l.vec) / denom : 0.0));
      labels.push_back(&l);
    }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;

  ViewVerdict v;
  v.best_label = labels[best]->text;
  v.probability = std::exp(logits[best] - mx) / z;
  v.keep = best < positives.size() && v.probability > threshold;
  return v;
}

double thing_probability(const Eigen::VectorXd& class_vec, const Eigen::VectorXd& thing_vec,
                         const Eigen::VectorXd& stuff_vec, double logit_scale) {
  const double n = class_vec.norm();
  if (n == 0.0) return 0.5;
  const double a = logit_scale * class_vec.dot(thing_vec) / (n * thing_vec.norm());
  const double b = logit_scale * class_vec.dot(stuff_vec) / (n * stuff_vec.norm());
  return 1.0 / (1.0 + std::exp(b - a));
}

ThingKind things_stuff(const Eigen::VectorXd& class_vec, const EmbeddingProvider& provider, double logit_scale) {
  const double p = thing_probability(class_vec, provider.text_embed(kThingPrompt),
                                     provider.text_embed(kStuffPrompt), logit_scale);
  return p > 0.5 ? ThingKind::thing : ThingKind::stuff;
}

std::vector<Label> embed_labels(const EmbeddingProvider& provider, std::span<const std::string> texts) {
  std::vector<Label> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back({t, provider.text_embed(t)});
  return out;
}

void write_feature_map(const std::filesystem::path& path, const FeatureMap& map) {
  io::ByteWriter out;
  out.put_bytes("HFM1");
  out.put(static_cast<std::uint32_t>(map.height));
  out.put(static_cast<std::uint32_t>(map.width));
  out.put(static_cast<std::uint32_t>(map.dim()));
  std::vector<float> row(map.dim());
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      const auto f = map.at(x, y);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(f[static_cast<Eigen::Index>(c)]);
      out.put_span(std::span<const float>(row));
    }
  io::write_file(path, out.bytes());
}

FeatureMap read_feature_map(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes);
  in.expect_magic("HFM1");
  const auto h = in.get<std::uint32_t>();
  const auto w = in.get<std::uint32_t>();
  const auto c = in.get<std::uint32_t>();
  std::vector<float> raw(static_cast<std::size_t>(h) * w * c);
  in.get_into(std::span<float>(raw));
  RowMatrix pixels(static_cast<Eigen::Index>(h) * w, c);
  for (Eigen::Index i = 0; i < pixels.rows(); ++i)
    for (Eigen::Index k = 0; k < pixels.cols(); ++k) pixels(i, k) = raw[static_cast<std::size_t>(i * c + k)];
  return FeatureMap::dense(static_cast<int>(w), static_cast<int>(h), std::move(pixels));
}

void write_vector(const std::filesystem::path& path, const Eigen::VectorXd& v) {
  io::ByteWriter out;
  out.put_bytes("HEV1");
  out.put(static_cast<std::uint32_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out.put(static_cast<float>(v[i]));
  io::write_file(path, out.bytes());
}

Eigen::VectorXd read_vector(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes);
  in.expect_magic("HEV1");
  const auto c = in.get<std::uint32_t>();
  Eigen::VectorXd v(c);
  for (std::uint32_t i = 0; i < c; ++i) v[i] = in.get<float>();
  return v;
}

}  // namespace haec

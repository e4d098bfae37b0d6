#include "haec/cloud.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"

namespace haec {

namespace {

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::f32;
  bool is_list = false;
  PlyType count_type = PlyType::u8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

std::optional<PlyType> parse_type(std::string_view t) {
  if (t == "char" || t == "int8") return PlyType::i8;
  if (t == "uchar" || t == "uint8") return PlyType::u8;
  if (t == "short" || t == "int16") return PlyType::i16;
  if (t == "ushort" || t == "uint16") return PlyType::u16;
  if (t == "int" || t == "int32") return PlyType::i32;
  if (t == "uint" || t == "uint32") return PlyType::u32;
  if (t == "float" || t == "float32") return PlyType::f32;
  if (t == "double" || t == "float64") return PlyType::f64;
  return std::nullopt;
}

const char* type_name(PlyType t) {
  switch (t) {
    case PlyType::i8: return "char";
    case PlyType::u8: return "uchar";
    case PlyType::i16: return "short";
    case PlyType::u16: return "ushort";
    case PlyType::i32: return "int";
    case PlyType::u32: return "uint";
    case PlyType::f32: return "float";
    case PlyType::f64: return "double";
  }
  return "float";
}

double read_binary(io::ByteReader& in, PlyType t) {
  switch (t) {
    case PlyType::i8: return in.get<std::int8_t>();
    case PlyType::u8: return in.get<std::uint8_t>();
    case PlyType::i16: return in.get<std::int16_t>();
    case PlyType::u16: return in.get<std::uint16_t>();
    case PlyType::i32: return in.get<std::int32_t>();
    case PlyType::u32: return in.get<std::uint32_t>();
    case PlyType::f32: return in.get<float>();
    case PlyType::f64: return in.get<double>();
  }
  return 0.0;
}

void write_binary(io::ByteWriter& out, PlyType t, double v) {
  switch (t) {
    case PlyType::i8: out.put(static_cast<std::int8_t>(v)); break;
    case PlyType::u8: out.put(static_cast<std::uint8_t>(v)); break;
    case PlyType::i16: out.put(static_cast<std::int16_t>(v)); break;
    case PlyType::u16: out.put(static_cast<std::uint16_t>(v)); break;
    case PlyType::i32: out.put(static_cast<std::int32_t>(v)); break;
    case PlyType::u32: out.put(static_cast<std::uint32_t>(v)); break;
    case PlyType::f32: out.put(static_cast<float>(v)); break;
    case PlyType::f64: out.put(v); break;
  }
}

bool is_integral(PlyType t) { return t != PlyType::f32 && t != PlyType::f64; }

void append_ascii(std::string& out, PlyType t, double v) {
  char buf[64];
  int n;
  if (is_integral(t)) {
    n = std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(v));
  } else if (t == PlyType::f32) {
    n = std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
  } else {
    n = std::snprintf(buf, sizeof buf, "%.17g", v);
  }
  out.append(buf, static_cast<std::size_t>(n));
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_number(std::string_view tok, std::uint64_t offset) {
  // from_chars rejects a leading '+', strtod-style inputs never carry one in practice.
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError("invalid number \"" + std::string(tok) + "\"", offset);
  return v;
}

struct Header {
  PlyFormat format = PlyFormat::ascii;
  std::vector<PlyElement> elements;
  std::size_t body_offset = 0;
};

Header parse_header(std::span<const char> bytes) {
  Header h;
  std::size_t pos = 0;
  auto next_line = [&](std::size_t& line_start) -> std::string_view {
    line_start = pos;
    const void* nl = std::memchr(bytes.data() + pos, '\n', bytes.size() - pos);
    if (!nl) throw ParseError("unterminated PLY header", pos);
    const auto end = static_cast<std::size_t>(static_cast<const char*>(nl) - bytes.data());
    std::string_view line(bytes.data() + pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
  };

  std::size_t at = 0;
  if (next_line(at) != "ply") throw ParseError("missing \"ply\" magic", 0);
  bool have_format = false;
  while (true) {
    const std::string_view line = next_line(at);
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() < 2) throw ParseError("malformed format line", at);
      if (tok[1] == "ascii") h.format = PlyFormat::ascii;
      else if (tok[1] == "binary_little_endian") h.format = PlyFormat::binary_little_endian;
      else throw ParseError("unsupported PLY format \"" + std::string(tok[1]) + "\"", at);
      have_format = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("malformed element line", at);
      PlyElement e;
      e.name = tok[1];
      e.count = static_cast<std::size_t>(parse_number(tok[2], at));
      h.elements.push_back(std::move(e));
    } else if (tok[0] == "property") {
      if (h.elements.empty()) throw ParseError("property before any element", at);
      PlyProperty p;
      if (tok.size() == 5 && tok[1] == "list") {
        auto ct = parse_type(tok[2]);
        auto it = parse_type(tok[3]);
        if (!ct || !it) throw ParseError("unknown list property type", at);
        p.is_list = true;
        p.count_type = *ct;
        p.type = *it;
        p.name = tok[4];
      } else if (tok.size() == 3) {
        auto t = parse_type(tok[1]);
        if (!t) throw ParseError("unknown property type \"" + std::string(tok[1]) + "\"", at);
        p.type = *t;
        p.name = tok[2];
      } else {
        throw ParseError("malformed property line", at);
      }
      h.elements.back().properties.push_back(std::move(p));
    } else {
      throw ParseError("unexpected header keyword \"" + std::string(tok[0]) + "\"", at);
    }
  }
  if (!have_format) throw ParseError("missing format line", 0);
  h.body_offset = pos;
  return h;
}

// Destination of each vertex property while decoding.
enum class Slot { x, y, z, red, green, blue, gt_sem, gt_inst, extra, skip };

}  // namespace

void PointCloud::validate() const {
  const std::size_t n = positions.size();
  if (n == 0) throw ArgumentError("point cloud is empty");
  if (colors.size() != n) throw ArgumentError("colors length differs from positions");
  if (gt_semantic && gt_semantic->size() != n) throw ArgumentError("gt_semantic length differs");
  if (gt_instance && gt_instance->size() != n) throw ArgumentError("gt_instance length differs");
  for (const auto& e : extra)
    if (e.values.size() != n) throw ArgumentError("property " + e.name + " length differs");
  for (std::size_t i = 0; i < n; ++i) {
    if (!positions[i].allFinite()) throw ArgumentError("non-finite coordinate at point " + std::to_string(i));
    if ((colors[i].array() < 0.0).any() || (colors[i].array() > 1.0).any() || !colors[i].allFinite())
      throw ArgumentError("color outside [0,1] at point " + std::to_string(i));
  }
}

const ScalarProperty* PointCloud::find_extra(std::string_view name) const {
  for (const auto& e : extra)
    if (e.name == name) return &e;
  return nullptr;
}

void PointCloud::set_extra(std::string name, PlyType type, std::vector<double> values) {
  for (auto& e : extra) {
    if (e.name == name) {
      e.type = type;
      e.values = std::move(values);
      return;
    }
  }
  extra.push_back({std::move(name), type, std::move(values)});
}

Eigen::Vector3d PointCloud::bbox_min() const {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  for (const auto& p : positions) lo = lo.cwiseMin(p);
  return lo;
}

Eigen::Vector3d PointCloud::bbox_max() const {
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity());
  for (const auto& p : positions) hi = hi.cwiseMax(p);
  return hi;
}

FeatureField FeatureField::empty(std::size_t n_points, std::size_t dim) {
  FeatureField f;
  f.dim = dim;
  f.features = RowMatrix::Zero(static_cast<Eigen::Index>(n_points), static_cast<Eigen::Index>(dim));
  f.hit_count.assign(n_points, 0);
  return f;
}

PointCloud parse_ply(std::span<const char> bytes) {
  const Header header = parse_header(bytes);

  PointCloud cloud;
  const PlyElement* vertex = nullptr;
  for (const auto& e : header.elements)
    if (e.name == "vertex") vertex = &e;
  if (!vertex) throw ParseError("no vertex element", 0);

  std::vector<Slot> slots;
  std::vector<std::size_t> extra_of;
  bool has_x = false, has_y = false, has_z = false;
  bool color_u8 = false;
  for (const auto& p : vertex->properties) {
    Slot s = Slot::skip;
    if (p.is_list) s = Slot::skip;
    else if (p.name == "x") s = Slot::x, has_x = true;
    else if (p.name == "y") s = Slot::y, has_y = true;
    else if (p.name == "z") s = Slot::z, has_z = true;
    else if (p.name == "red" || p.name == "green" || p.name == "blue") {
      s = p.name == "red" ? Slot::red : (p.name == "green" ? Slot::green : Slot::blue);
      color_u8 = is_integral(p.type);
    } else if (p.name == "gt_sem") s = Slot::gt_sem;
    else if (p.name == "gt_inst") s = Slot::gt_inst;
    else {
      s = Slot::extra;
      cloud.extra.push_back({p.name, p.type, {}});
    }
    slots.push_back(s);
    extra_of.push_back(s == Slot::extra ? cloud.extra.size() - 1 : 0);
  }
  if (!has_x || !has_y || !has_z) throw ParseError("vertex element lacks x, y or z", 0);

  const std::size_t n = vertex->count;
  cloud.positions.assign(n, Eigen::Vector3d::Zero());
  cloud.colors.assign(n, Eigen::Vector3d::Constant(0.5));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] == Slot::gt_sem) cloud.gt_semantic.emplace(n, -1);
    if (slots[i] == Slot::gt_inst) cloud.gt_instance.emplace(n, -1);
  }
  for (auto& e : cloud.extra) e.values.assign(n, 0.0);
  const double color_scale = color_u8 ? 1.0 / 255.0 : 1.0;

  auto store = [&](std::size_t row, std::size_t prop, double v) {
    switch (slots[prop]) {
      case Slot::x: cloud.positions[row][0] = v; break;
      case Slot::y: cloud.positions[row][1] = v; break;
      case Slot::z: cloud.positions[row][2] = v; break;
      case Slot::red: cloud.colors[row][0] = v * color_scale; break;
      case Slot::green: cloud.colors[row][1] = v * color_scale; break;
      case Slot::blue: cloud.colors[row][2] = v * color_scale; break;
      case Slot::gt_sem: (*cloud.gt_semantic)[row] = static_cast<int>(v); break;
      case Slot::gt_inst: (*cloud.gt_instance)[row] = static_cast<int>(v); break;
      case Slot::extra: cloud.extra[extra_of[prop]].values[row] = v; break;
      case Slot::skip: break;
    }
  };
  auto check_row = [&](std::size_t row, std::uint64_t offset) {
    if (!cloud.positions[row].allFinite())
      throw ParseError("non-finite coordinate in vertex " + std::to_string(row), offset);
    const auto& c = cloud.colors[row];
    if (!c.allFinite() || (c.array() < 0.0).any() || (c.array() > 1.0).any())
      throw ParseError("color outside [0,1] in vertex " + std::to_string(row), offset);
  };

  if (header.format == PlyFormat::binary_little_endian) {
    io::ByteReader in(bytes.subspan(header.body_offset));
    for (const auto& e : header.elements) {
      const bool is_vertex = &e == vertex;
      for (std::size_t row = 0; row < e.count; ++row) {
        const std::uint64_t row_offset = header.body_offset + in.offset();
        try {
          for (std::size_t pi = 0; pi < e.properties.size(); ++pi) {
            const auto& p = e.properties[pi];
            if (p.is_list) {
              const auto cnt = static_cast<std::size_t>(read_binary(in, p.count_type));
              for (std::size_t k = 0; k < cnt; ++k) read_binary(in, p.type);
            } else {
              const double v = read_binary(in, p.type);
              if (is_vertex) store(row, pi, v);
            }
          }
        } catch (const ParseError& err) {
          throw ParseError("truncated payload in element \"" + e.name + "\" row " + std::to_string(row),
                           header.body_offset + err.offset());
        }
        if (is_vertex) check_row(row, row_offset);
      }
    }
  } else {
    std::size_t pos = header.body_offset;
    auto next_line = [&](std::size_t& line_start) -> std::string_view {
      while (true) {
        line_start = pos;
        if (pos >= bytes.size()) throw ParseError("truncated payload", pos);
        const void* nl = std::memchr(bytes.data() + pos, '\n', bytes.size() - pos);
        const std::size_t end =
            nl ? static_cast<std::size_t>(static_cast<const char*>(nl) - bytes.data()) : bytes.size();
        std::string_view line(bytes.data() + pos, end - pos);
        pos = nl ? end + 1 : end;
        if (!split_ws(line).empty()) return line;
      }
    };
    for (const auto& e : header.elements) {
      const bool is_vertex = &e == vertex;
      for (std::size_t row = 0; row < e.count; ++row) {
        std::size_t at = 0;
        const auto tok = split_ws(next_line(at));
        std::size_t t = 0;
        for (std::size_t pi = 0; pi < e.properties.size(); ++pi) {
          const auto& p = e.properties[pi];
          if (t >= tok.size()) throw ParseError("too few values in element \"" + e.name + "\"", at);
          if (p.is_list) {
            const auto cnt = static_cast<std::size_t>(parse_number(tok[t++], at));
            if (t + cnt > tok.size()) throw ParseError("truncated list property", at);
            t += cnt;
          } else {
            const double v = parse_number(tok[t++], at);
            if (is_vertex) store(row, pi, v);
          }
        }
        if (is_vertex) check_row(row, at);
      }
    }
  }
  if (n == 0) throw ParseError("vertex element is empty", header.body_offset);
  return cloud;
}

PointCloud load_cloud(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_ply(bytes);
}

PointCloud load_cloud(const std::filesystem::path& path, PlyFormat format) {
  const auto bytes = io::read_file(path);
  const Header header = parse_header(bytes);
  if (header.format != format)
    throw ParseError(path.string() + ": PLY encoding differs from the requested format", 0);
  return parse_ply(bytes);
}

std::string serialize_ply(const PointCloud& cloud, PlyFormat format, const PlyWriteOptions& options) {
  cloud.validate();
  const std::size_t n = cloud.size();
  const PlyType pos_type = PlyType::f64;
  const PlyType color_type = options.uchar_colors ? PlyType::u8 : PlyType::f64;

  std::ostringstream hdr;
  hdr << "ply\nformat " << (format == PlyFormat::ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  hdr << "element vertex " << n << "\n";
  for (const char* axis : {"x", "y", "z"}) hdr << "property " << type_name(pos_type) << ' ' << axis << "\n";
  for (const char* ch : {"red", "green", "blue"}) hdr << "property " << type_name(color_type) << ' ' << ch << "\n";
  if (cloud.gt_semantic) hdr << "property int gt_sem\n";
  if (cloud.gt_instance) hdr << "property int gt_inst\n";
  for (const auto& e : cloud.extra) hdr << "property " << type_name(e.type) << ' ' << e.name << "\n";
  hdr << "end_header\n";

  auto color_value = [&](double c) { return options.uchar_colors ? std::round(c * 255.0) : c; };

  if (format == PlyFormat::binary_little_endian) {
    io::ByteWriter out;
    out.put_bytes(hdr.str());
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) write_binary(out, pos_type, cloud.positions[i][a]);
      for (int a = 0; a < 3; ++a) write_binary(out, color_type, color_value(cloud.colors[i][a]));
      if (cloud.gt_semantic) out.put(static_cast<std::int32_t>((*cloud.gt_semantic)[i]));
      if (cloud.gt_instance) out.put(static_cast<std::int32_t>((*cloud.gt_instance)[i]));
      for (const auto& e : cloud.extra) write_binary(out, e.type, e.values[i]);
    }
    return out.bytes();
  }

  std::string out = hdr.str();
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      append_ascii(out, pos_type, cloud.positions[i][a]);
      out += ' ';
    }
    for (int a = 0; a < 3; ++a) {
      append_ascii(out, color_type, color_value(cloud.colors[i][a]));
      out += ' ';
    }
    if (cloud.gt_semantic) out += std::to_string((*cloud.gt_semantic)[i]) + ' ';
    if (cloud.gt_instance) out += std::to_string((*cloud.gt_instance)[i]) + ' ';
    for (const auto& e : cloud.extra) {
      append_ascii(out, e.type, e.values[i]);
      out += ' ';
    }
    out.back() = '\n';
  }
  return out;
}

void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, PlyFormat format,
                const PlyWriteOptions& options) {
  io::write_file(path, serialize_ply(cloud, format, options));
}

PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) throw ArgumentError("voxel size must be positive");
  cloud.validate();
  const Eigen::Vector3d lo = cloud.bbox_min();
  const std::size_t n = cloud.size();

  using Key = std::array<std::int64_t, 3>;
  std::vector<std::pair<Key, std::uint32_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d c = ((cloud.positions[i] - lo) / voxel).array().floor();
    // z-major so the order matches a linear index x + nx * (y + ny * z).
    keyed[i] = {Key{static_cast<std::int64_t>(c.z()), static_cast<std::int64_t>(c.y()),
                    static_cast<std::int64_t>(c.x())},
                static_cast<std::uint32_t>(i)};
  }
  std::sort(keyed.begin(), keyed.end());

  auto majority = [](std::vector<int>& labels) {
    std::sort(labels.begin(), labels.end());
    int best = labels.front();
    std::size_t best_count = 0;
    for (std::size_t i = 0; i < labels.size();) {
      std::size_t j = i;
      while (j < labels.size() && labels[j] == labels[i]) ++j;
      if (j - i > best_count) best_count = j - i, best = labels[i];
      i = j;
    }
    return best;
  };

  PointCloud out;
  if (cloud.gt_semantic) out.gt_semantic.emplace();
  if (cloud.gt_instance) out.gt_instance.emplace();
  std::vector<int> sem, inst;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    Eigen::Vector3d pos = Eigen::Vector3d::Zero(), col = Eigen::Vector3d::Zero();
    sem.clear();
    inst.clear();
    while (j < n && keyed[j].first == keyed[i].first) {
      const auto idx = keyed[j].second;
      pos += cloud.positions[idx];
      col += cloud.colors[idx];
      if (cloud.gt_semantic) sem.push_back((*cloud.gt_semantic)[idx]);
      if (cloud.gt_instance) inst.push_back((*cloud.gt_instance)[idx]);
      ++j;
    }
    const double count = static_cast<double>(j - i);
    out.positions.push_back(pos / count);
    out.colors.push_back((col / count).cwiseMax(0.0).cwiseMin(1.0));
    if (cloud.gt_semantic) out.gt_semantic->push_back(majority(sem));
    if (cloud.gt_instance) out.gt_instance->push_back(majority(inst));
    i = j;
  }
  return out;
}

void save_field(const std::filesystem::path& path, const FeatureField& field) {
  io::ByteWriter out;
  out.put_bytes("HFF1");
  out.put(static_cast<std::uint32_t>(field.size()));
  out.put(static_cast<std::uint32_t>(field.dim));
  out.put_span(std::span<const std::uint32_t>(field.hit_count));
  out.put_span(std::span<const double>(field.features.data(), static_cast<std::size_t>(field.features.size())));
  io::write_file(path, out.bytes());
}

FeatureField load_field(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes);
  in.expect_magic("HFF1");
  const auto n = in.get<std::uint32_t>();
  const auto c = in.get<std::uint32_t>();
  FeatureField f = FeatureField::empty(n, c);
  in.get_into(std::span<std::uint32_t>(f.hit_count));
  in.get_into(std::span<double>(f.features.data(), static_cast<std::size_t>(f.features.size())));
  return f;
}

namespace io {

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  std::vector<char> data(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(data.data(), static_cast<std::streamsize>(data.size()));
  return data;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace io

}  // namespace haec

#include "haec/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "haec/binary_io.hpp"
#include "haec/cloud.hpp"
#include "haec/embed.hpp"
#include "haec/error.hpp"
#include "haec/lift.hpp"
#include "haec/moe.hpp"
#include "haec/panoptic.hpp"
#include "haec/pseudolabel.hpp"
#include "haec/render.hpp"
#include "haec/rng.hpp"
#include "haec/superpoint.hpp"
#include "haec/synthetic.hpp"
#include "json.hpp"

namespace haec {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"render", "filter", "lift",  "label", "partition",
                                              "train",  "infer",  "query", "eval",  "demo"};
  return names;
}

void apply_demo_defaults(Config& c) {
  using V = ConfigValue;
  auto strs = [](const std::vector<std::string>& v) {
    std::vector<ConfigValue> items;
    for (const auto& s : v) items.push_back(ConfigValue::string(s));
    return ConfigValue::array(std::move(items));
  };
  c.set_default("paths.work", V::string("demo"));
  c.set_default("render.spacing", V::real(10.0));
  c.set_default("render.margin", V::real(5.0));
  c.set_default("render.width", V::integer(128));
  c.set_default("render.height", V::integer(128));
  c.set_default("render.fx", V::real(64.0));
  c.set_default("render.fy", V::real(64.0));
  c.set_default("render.cx", V::real(64.0));
  c.set_default("render.cy", V::real(64.0));
  c.set_default("lift.cube_radius", V::real(6.0));
  c.set_default("lift.max_rounds", V::integer(8));
  c.set_default("label.k", V::integer(2));
  c.set_default("query.text", V::string("red object"));
  c.set_default("eval.labels", strs(demo_label_set()));
}

namespace {

// ---- paths, hashing, manifests ---------------------------------------------

fs::path work_dir(const Config& c) { return fs::path(c.get_string("paths.work")); }

fs::path resolve(const Config& c, const std::string& key) {
  const fs::path p(c.get_string(key));
  return p.is_absolute() ? p : work_dir(c) / p;
}

std::string hash_file(const fs::path& p) {
  const auto bytes = io::read_file(p);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(std::string_view(bytes.data(), bytes.size()))));
  return buf;
}

json to_json(const ConfigValue& v) {
  switch (v.kind) {
    case ConfigValue::Kind::boolean: return v.b;
    case ConfigValue::Kind::integer: return std::int64_t(v.num);
    case ConfigValue::Kind::real: return v.num;
    case ConfigValue::Kind::string: return v.str;
    case ConfigValue::Kind::array: {
      json a = json::array();
      for (const auto& i : v.items) a.push_back(to_json(i));
      return a;
    }
  }
  return nullptr;
}

class Manifest {
 public:
  Manifest(std::string stage, const Config& c) : stage_(std::move(stage)), c_(c) {}

  void input(const fs::path& p) { add(inputs_, p); }
  void output(const fs::path& p) { add(outputs_, p); }
  void note(const std::string& key, json value) { notes_[key] = std::move(value); }

  void write() const {
    json j;
    j["stage"] = stage_;
    j["seed"] = c_.get_int("seed");
    j["format_version"] = 1;
    json cfg = json::object();
    for (const auto& [k, v] : c_.values()) cfg[k] = to_json(v);
    j["config"] = cfg;
    j["defaulted_keys"] = c_.defaulted_keys();
    j["inputs"] = hashes(inputs_);
    j["outputs"] = hashes(outputs_);
    j["summary"] = notes_;
    io::write_file(work_dir(c_) / "manifests" / (stage_ + ".json"), j.dump(2) + "\n");
  }

 private:
  void add(std::set<fs::path>& into, const fs::path& p) const {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) into.insert(e.path());
    } else if (fs::exists(p)) {
      into.insert(p);
    }
  }
  json hashes(const std::set<fs::path>& files) const {
    json o = json::object();
    for (const auto& f : files) o[fs::relative(f, work_dir(c_)).generic_string()] = hash_file(f);
    return o;
  }

  std::string stage_;
  const Config& c_;
  std::set<fs::path> inputs_, outputs_;
  json notes_ = json::object();
};

void require(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) throw PrerequisiteError("missing " + p.string() + " (run the " + stage + " stage first)");
}

std::uint64_t seed_of(const Config& c) { return std::uint64_t(c.get_int("seed")); }

std::unique_ptr<EmbeddingProvider> make_provider(const Config& c) {
  const auto kind = c.get_string("provider.kind");
  if (kind == "mock") {
    const auto dim = c.get_int("provider.dim");
    if (dim < 1) throw ConfigError("provider.dim must be positive");
    return mock_provider(seed_of(c), demo_palette(), std::size_t(dim));
  }
  if (kind == "files") {
    if (c.get_string("paths.features").empty()) throw ConfigError("provider.kind = \"files\" needs paths.features");
    return std::make_unique<FileProvider>(resolve(c, "paths.features"));
  }
  throw ConfigError("provider.kind must be \"mock\" or \"files\"");
}

Intrinsics render_intrinsics(const Config& c) {
  Intrinsics in;
  in.width = int(c.get_int("render.width"));
  in.height = int(c.get_int("render.height"));
  in.fx = c.get_double("render.fx");
  in.fy = c.get_double("render.fy");
  in.cx = c.get_double("render.cx");
  in.cy = c.get_double("render.cy");
  if (in.width < 1 || in.height < 1 || !(in.fx > 0) || !(in.fy > 0)) throw ConfigError("invalid render intrinsics");
  return in;
}

FilterParams filter_params(const Config& c) {
  FilterParams f;
  f.positives = c.get_strings("filter.positives");
  f.negatives = c.get_strings("filter.negatives");
  f.threshold = c.get_double("filter.threshold");
  f.logit_scale = c.get_double("filter.logit_scale");
  if (f.positives.empty() || f.negatives.empty()) throw ConfigError("filter needs positive and negative prompts");
  if (!(f.threshold > 0.0 && f.threshold < 1.0)) throw ConfigError("filter.threshold must lie in (0, 1)");
  return f;
}

PointCloud load_input_cloud(const Config& c, Manifest& m) {
  const auto p = resolve(c, "paths.cloud");
  if (!fs::exists(p)) throw PrerequisiteError("missing input cloud " + p.string() + " (set paths.cloud or run demo)");
  m.input(p);
  return load_cloud(p);
}

std::vector<RenderedView> load_views(const Config& c, Manifest& m) {
  const auto dir = resolve(c, "paths.views");
  const auto poses = dir / "poses.jsonl";
  require(poses, "render");
  m.input(poses);
  std::ifstream in(poses);
  std::vector<RenderedView> views;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto [id, pose] = parse_pose_record(line);
    m.input(dir / (id + ".ppm"));
    m.input(dir / (id + ".hdm"));
    views.push_back(read_view(dir / (id + ".ppm"), dir / (id + ".hdm"), id, pose));
  }
  return views;
}

json losses_json(const Losses& l) {
  json j;
  j["rec"] = l.rec;
  j["triplet"] = l.triplet;
  j["balance"] = l.balance;
  j["affinity"] = l.affinity;
  j["total"] = l.total;
  return j;
}

// ---- stages ------------------------------------------------------------------

void stage_render(const Config& c, std::ostream& log) {
  Manifest m("render", c);
  const auto cloud = load_input_cloud(c, m);
  const auto rig = grid_rig(cloud, c.get_double("render.spacing"), c.get_double("render.margin"),
                            render_intrinsics(c));
  if (rig.warning) log << "render: inset box empty along an axis; that axis collapsed to the box center\n";
  const int splat = int(c.get_int("render.splat_px"));
  const auto dir = resolve(c, "paths.views");
  fs::create_directories(dir);
  std::string records;
  std::set<fs::path> written;
  for (std::size_t k = 0; k < rig.poses.size(); ++k) {
    char id[32];
    std::snprintf(id, sizeof id, "g%04zu_%zu", k / 8, k % 8);
    const auto view = splat_render(cloud, rig.poses[k], splat, id);
    written.insert(dir / (std::string(id) + ".ppm"));
    written.insert(dir / (std::string(id) + ".hdm"));
    write_ppm(dir / (std::string(id) + ".ppm"), view);
    write_depth(dir / (std::string(id) + ".hdm"), view);
    records += pose_record(id, rig.poses[k]) + "\n";
  }
  // views left over from an earlier rig
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if ((ext == ".ppm" || ext == ".hdm") && !written.count(e.path())) fs::remove(e.path());
  }
  io::write_file(dir / "poses.jsonl", records);
  written.insert(dir / "poses.jsonl");
  for (const auto& f : written) m.output(f);
  m.note("grid_points", rig.grid_points.size());
  m.note("views", rig.poses.size());
  m.write();
  log << "render: " << rig.grid_points.size() << " grid points, " << rig.poses.size() << " views\n";
}

void stage_filter(const Config& c, std::ostream& log) {
  Manifest m("filter", c);
  const auto views = load_views(c, m);
  const auto provider = make_provider(c);
  const auto f = filter_params(c);
  const auto pos = embed_labels(*provider, f.positives);
  const auto neg = embed_labels(*provider, f.negatives);
  json out = json::array();
  std::size_t kept = 0;
  for (const auto& v : views) {
    auto verdict = classify_view(provider->image_embed(v), pos, neg, f.threshold, f.logit_scale);
    verdict.view_id = v.view_id;
    kept += verdict.keep;
    json j;
    j["view_id"] = verdict.view_id;
    j["keep"] = verdict.keep;
    j["best_label"] = verdict.best_label;
    j["probability"] = verdict.probability;
    out.push_back(j);
  }
  const auto path = resolve(c, "paths.views") / "verdicts.json";
  io::write_file(path, out.dump(2) + "\n");
  m.output(path);
  m.note("views", views.size());
  m.note("kept", kept);
  m.write();
  log << "filter: kept " << kept << " of " << views.size() << " views\n";
}

void stage_lift(const Config& c, std::ostream& log) {
  Manifest m("lift", c);
  const auto cloud = load_input_cloud(c, m);
  auto views = load_views(c, m);
  const auto verdict_path = resolve(c, "paths.views") / "verdicts.json";
  require(verdict_path, "filter");
  m.input(verdict_path);
  const auto bytes = io::read_file(verdict_path);
  const auto verdicts = nlohmann::json::parse(bytes.begin(), bytes.end());
  std::set<std::string> keep;
  for (const auto& v : verdicts)
    if (v.at("keep").get<bool>()) keep.insert(v.at("view_id").get<std::string>());
  std::erase_if(views, [&](const RenderedView& v) { return !keep.count(v.view_id); });

  const auto provider = make_provider(c);
  const auto f = filter_params(c);
  FeatureField field = FeatureField::empty(cloud.size(), provider->dim());
  const double tau = c.get_double("lift.tau_rel");
  const auto grid_stats = lift_views(cloud, views, *provider, f, tau, field);

  CoverageParams cp;
  cp.target_coverage = c.get_double("lift.target_coverage");
  cp.max_rounds = int(c.get_int("lift.max_rounds"));
  cp.cube_radius = c.get_double("lift.cube_radius");
  cp.intrinsic = Intrinsics::square(int(c.get_int("lift.image_size")));
  cp.splat_px = int(c.get_int("render.splat_px"));
  cp.tau_rel = tau;
  cp.eps_scale = c.get_double("lift.eps_scale");
  cp.base_minpts = std::size_t(c.get_int("lift.base_minpts"));
  cp.filter = f;
  cp.seed = seed_of(c);
  auto result = coverage_loop(cloud, std::move(field), *provider, cp);

  const auto out = resolve(c, "paths.field");
  save_field(out, result.field);
  m.output(out);
  json rounds = json::array();
  for (const auto& r : result.rounds) {
    json j;
    j["unmapped"] = r.unmapped;
    j["clusters"] = r.clusters;
    j["drawn_points"] = r.drawn_points;
    j["views"] = r.poses;
    j["kept_views"] = r.lift.kept_views;
    j["coverage"] = r.coverage;
    rounds.push_back(j);
  }
  m.note("grid_views_used", grid_stats.kept_views);
  m.note("initial_coverage", result.initial_coverage);
  m.note("rounds", rounds);
  m.note("final_coverage", result.final_coverage);
  m.write();
  log << "lift: coverage " << result.initial_coverage << " -> " << result.final_coverage << " after "
      << result.rounds_used << " rounds\n";
}

void stage_label(const Config& c, std::ostream& log) {
  Manifest m("label", c);
  const auto cloud = load_input_cloud(c, m);
  const auto field_path = resolve(c, "paths.field");
  require(field_path, "lift");
  m.input(field_path);
  const auto field = load_field(field_path);
  const auto provider = make_provider(c);
  LabelParams lp;
  lp.k = std::size_t(c.get_int("label.k"));
  lp.seed = seed_of(c);
  lp.max_iter = int(c.get_int("label.max_iter"));
  lp.eps_scale = c.get_double("label.eps_scale");
  lp.base_minpts = std::size_t(c.get_int("label.base_minpts"));
  lp.logit_scale = c.get_double("label.logit_scale");
  const auto labels = derive_labels(cloud, field, *provider, lp);
  const auto out = resolve(c, "paths.labels");
  save_labels(out, cloud, labels);
  const auto stem = out.parent_path() / out.stem();
  m.output(out);
  m.output(stem.string() + ".json");
  for (std::size_t k = 0; k < labels.num_classes(); ++k)
    m.output(stem.string() + "_class_repr_" + std::to_string(k) + ".hev1");
  std::size_t things = 0;
  for (auto t : labels.is_thing) things += t;
  m.note("classes", labels.num_classes());
  m.note("thing_classes", things);
  m.note("instances", labels.n_instances);
  m.write();
  log << "label: " << labels.num_classes() << " classes (" << things << " things), " << labels.n_instances
      << " pseudo-instances\n";
}

void stage_partition(const Config& c, std::ostream& log) {
  Manifest m("partition", c);
  const auto cloud = load_input_cloud(c, m);
  const auto field_path = resolve(c, "paths.field");
  const auto labels_path = resolve(c, "paths.labels");
  require(field_path, "lift");
  require(labels_path, "label");
  m.input(field_path);
  m.input(labels_path);
  const auto field = load_field(field_path);
  const auto labels = load_labels(labels_path);
  HierarchyConfig hc;
  hc.levels = int(c.get_int("superpoint.levels"));
  hc.lambda = c.get_doubles("superpoint.lambda");
  hc.k_nn = std::size_t(c.get_int("superpoint.k_nn"));
  hc.spatial_weight = c.get_double("superpoint.spatial_weight");
  hc.seed = seed_of(c);
  if (hc.levels < 1) throw ConfigError("superpoint.levels must be at least 1");
  if (hc.lambda.size() < std::size_t(hc.levels)) throw ConfigError("superpoint.lambda needs one value per level");
  const auto h = build_hierarchy(cloud, labels, field, hc);
  const auto dir = resolve(c, "paths.hierarchy");
  save_hierarchy(dir, h);
  m.output(dir);
  std::vector<std::size_t> sizes;
  for (const auto& lv : h.levels) sizes.push_back(lv.size);
  m.note("level_sizes", sizes);
  m.write();
  log << "partition: " << h.depth() << " levels, sizes";
  for (auto s : sizes) log << ' ' << s;
  log << '\n';
}

MoeConfig model_config(const Config& c, int levels) {
  MoeConfig mc;
  mc.levels = levels;
  mc.hidden = int(c.get_int("model.hidden"));
  mc.experts = int(c.get_int("model.experts"));
  mc.heads = int(c.get_int("model.heads"));
  mc.head_layers = int(c.get_int("model.head_layers"));
  mc.alpha = c.get_double("model.alpha");
  mc.w_rec = c.get_double("model.w_rec");
  mc.w_tri = c.get_double("model.w_tri");
  mc.w_bal = c.get_double("model.w_bal");
  mc.w_aff = c.get_double("model.w_aff");
  mc.lr = c.get_double("model.lr");
  mc.seed = seed_of(c);
  mc.validate();
  return mc;
}

SuperpointHierarchy load_hierarchy_for(const Config& c, Manifest& m) {
  const auto dir = resolve(c, "paths.hierarchy");
  require(dir / "manifest.json", "partition");
  m.input(dir);
  return load_hierarchy(dir);
}

void stage_train(const Config& c, std::ostream& log) {
  Manifest m("train", c);
  const auto h = load_hierarchy_for(c, m);
  // The model follows the depth the partition actually reached.
  const auto mc = model_config(c, int(h.depth()));
  const int steps = int(c.get_int("model.steps"));
  if (steps < 0) throw ConfigError("model.steps must be non-negative");
  auto result = train_toy(h, init_params(mc, h.dim), mc, steps);
  const auto ckpt = resolve(c, "paths.checkpoint");
  save_checkpoint(ckpt, result.params, mc, h.dim);
  std::string csv = "step,rec,triplet,balance,affinity,total\n";
  for (std::size_t s = 0; s < result.trace.size(); ++s) {
    const auto& l = result.trace[s];
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", s, l.rec, l.triplet, l.balance,
                  l.affinity, l.total);
    csv += buf;
  }
  const auto log_path = work_dir(c) / "train_log.csv";
  io::write_file(log_path, csv);
  m.output(ckpt);
  m.output(log_path);
  m.note("steps", steps);
  m.note("first", losses_json(result.trace.front()));
  m.note("last", losses_json(result.trace.back()));
  m.write();
  log << "train: total loss " << result.trace.front().total << " -> " << result.trace.back().total << " over "
      << steps << " steps\n";
}

void stage_infer(const Config& c, std::ostream& log) {
  Manifest m("infer", c);
  auto cloud = load_input_cloud(c, m);
  const auto h = load_hierarchy_for(c, m);
  const auto ckpt = resolve(c, "paths.checkpoint");
  require(ckpt, "train");
  m.input(ckpt);
  MoeConfig mc;
  std::size_t dim = 0;
  const auto params = load_checkpoint(ckpt, &mc, &dim);
  if (dim != h.dim) throw ConfigError("checkpoint feature dimension differs from the hierarchy");
  const auto out = forward(h, params, mc);
  const auto provider = make_provider(c);
  if (provider->dim() != h.dim) throw ConfigError("provider dimension differs from the hierarchy");

  const auto& lv = h.levels[0];
  const Eigen::VectorXd thing_vec = provider->text_embed(kThingPrompt);
  const Eigen::VectorXd stuff_vec = provider->text_embed(kStuffPrompt);
  std::vector<std::uint8_t> thing(lv.size);
  for (std::size_t s = 0; s < lv.size; ++s)
    thing[s] = thing_probability(out.pred_vec.row(s).transpose(), thing_vec, stuff_vec,
                                 c.get_double("label.logit_scale")) > 0.5;
  const double thr = c.get_double("infer.affinity_threshold");
  if (!(thr > 0.0 && thr < 1.0)) throw ConfigError("infer.affinity_threshold must lie in (0, 1)");
  const auto sp_inst = cluster_instances(lv.size, lv.edges, out.pred_affinity, thr, thing);
  int n_inst = 0;
  for (int i : sp_inst) n_inst = std::max(n_inst, i + 1);

  const auto assign = h.point_assignment(0);
  FeatureField pred = FeatureField::empty(cloud.size(), h.dim);
  std::vector<double> inst(cloud.size()), cls(cloud.size(), -1.0);
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    pred.features.row(p) = out.pred_vec.row(assign[p]);
    pred.hit_count[p] = 1;
    inst[p] = sp_inst[assign[p]];
  }
  const auto label_texts = c.get_strings("eval.labels");
  if (!label_texts.empty()) {
    const auto labels = embed_labels(*provider, label_texts);
    const std::vector<std::uint8_t> all(cloud.size(), 1);
    const auto pc = classify_points(pred.features, all, labels);
    for (std::size_t p = 0; p < cloud.size(); ++p) cls[p] = pc[p];
  }
  cloud.set_extra("pred_inst", PlyType::i32, std::move(inst));
  cloud.set_extra("pred_cls", PlyType::i32, std::move(cls));
  const auto ply = resolve(c, "paths.predictions");
  save_cloud(ply, cloud, PlyFormat::binary_little_endian);
  auto vec_path = ply;
  vec_path.replace_extension(".hff");
  save_field(vec_path, pred);
  m.output(ply);
  m.output(vec_path);
  m.note("instances", n_inst);
  m.write();
  log << "infer: " << lv.size << " superpoints, " << n_inst << " instances\n";
}

void stage_query(const Config& c, std::ostream& log) {
  Manifest m("query", c);
  auto cloud = load_input_cloud(c, m);
  auto vec_path = resolve(c, "paths.predictions");
  vec_path.replace_extension(".hff");
  require(vec_path, "infer");
  m.input(vec_path);
  const auto pred = load_field(vec_path);
  if (pred.size() != cloud.size()) throw ArgumentError("predictions do not match the cloud");
  std::vector<std::uint8_t> defined(cloud.size(), 1);
  const auto field_path = resolve(c, "paths.field");
  if (fs::exists(field_path)) {
    m.input(field_path);
    const auto field = load_field(field_path);
    for (std::size_t p = 0; p < cloud.size(); ++p) defined[p] = field.defined(p);
  }
  const auto text = c.get_string("query.text");
  if (text.empty()) throw ConfigError("query needs a text (--text or query.text)");
  const auto provider = make_provider(c);
  const auto r = query(pred.features, defined, text, *provider, c.get_double("query.threshold"));
  std::size_t hits = 0;
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    hits += r.mask[p];
    // Red ramp: brighter red for higher similarity.
    const double t = std::clamp(r.similarity[p], 0.0, 1.0);
    cloud.colors[p] = Eigen::Vector3d(0.25 + 0.75 * t, 0.25 * (1.0 - t), 0.25 * (1.0 - t));
  }
  std::vector<double> mask(r.mask.begin(), r.mask.end());
  cloud.set_extra("sim", PlyType::f32, r.similarity);
  cloud.set_extra("mask", PlyType::u8, std::move(mask));
  const auto out = resolve(c, "query.output");
  PlyWriteOptions opt;
  opt.uchar_colors = true;
  save_cloud(out, cloud, PlyFormat::binary_little_endian, opt);
  m.output(out);
  m.note("text", text);
  m.note("matches", hits);
  m.write();
  log << "query \"" << text << "\": " << hits << " of " << cloud.size() << " points above "
      << c.get_double("query.threshold") << "\n";
}

void stage_eval(const Config& c, std::ostream& log) {
  Manifest m("eval", c);
  const auto cloud = load_input_cloud(c, m);
  if (!cloud.gt_semantic) throw PrerequisiteError("eval needs gt_sem labels in the input cloud");
  const auto label_texts = c.get_strings("eval.labels");
  if (label_texts.empty()) throw ConfigError("eval.labels must list the class names");
  const int n_classes = int(label_texts.size());
  for (int g : *cloud.gt_semantic)
    if (g >= n_classes) throw ConfigError("gt_sem exceeds the eval.labels list");

  const auto ply = resolve(c, "paths.predictions");
  require(ply, "infer");
  m.input(ply);
  const auto pred_cloud = load_cloud(ply);
  const auto* pc = pred_cloud.find_extra("pred_cls");
  const auto* pi = pred_cloud.find_extra("pred_inst");
  if (!pc || !pi || pred_cloud.size() != cloud.size()) throw PrerequisiteError("predictions incomplete (rerun infer)");
  std::vector<int> pred_cls(pc->values.begin(), pc->values.end());
  std::vector<int> pred_inst(pi->values.begin(), pi->values.end());

  json scores;
  const auto sem = eval_semantic(pred_cls, *cloud.gt_semantic, n_classes);
  json sj;
  sj["miou"] = sem.miou;
  sj["macc"] = sem.macc;
  json per = json::array();
  for (int k = 0; k < n_classes; ++k) {
    json cj;
    cj["label"] = label_texts[k];
    cj["present"] = bool(sem.present[k]);
    cj["iou"] = sem.iou[k];
    cj["acc"] = sem.acc[k];
    per.push_back(cj);
  }
  sj["per_class"] = per;
  scores["semantic"] = sj;

  if (cloud.gt_instance) {
    const auto pan = eval_panoptic(pred_cls, pred_inst, *cloud.gt_semantic, *cloud.gt_instance, n_classes);
    json pj;
    pj["pq"] = pan.pq;
    pj["rq"] = pan.rq;
    pj["sq"] = pan.sq;
    json pc_arr = json::array();
    for (int k = 0; k < n_classes; ++k) {
      const auto& s = pan.per_class[k];
      json cj;
      cj["label"] = label_texts[k];
      cj["present"] = s.present;
      cj["stuff"] = s.stuff;
      cj["tp"] = s.tp, cj["fp"] = s.fp, cj["fn"] = s.fn;
      cj["pq"] = s.pq, cj["rq"] = s.rq, cj["sq"] = s.sq;
      pc_arr.push_back(cj);
    }
    pj["per_class"] = pc_arr;
    scores["panoptic"] = pj;
  } else {
    scores["panoptic"] = nullptr;  // no gt instances: PQ undefined
  }
  int n_inst = 0;
  for (int i : pred_inst) n_inst = std::max(n_inst, i + 1);
  scores["instances"] = n_inst;

  const auto labels_path = resolve(c, "paths.labels");
  if (fs::exists(labels_path)) {
    m.input(labels_path);
    const auto provider = make_provider(c);
    const auto oracle = eval_oracle(load_labels(labels_path), *cloud.gt_semantic, embed_labels(*provider, label_texts));
    json oj;
    oj["miou"] = oracle.miou;
    oj["macc"] = oracle.macc;
    scores["oracle"] = oj;
  }
  const auto out = resolve(c, "paths.scores");
  io::write_file(out, scores.dump(2) + "\n");
  m.output(out);
  m.write();
  log << "eval: mIoU " << sem.miou << ", mAcc " << sem.macc;
  if (scores["panoptic"].is_object()) log << ", PQ " << scores["panoptic"]["pq"].get<double>();
  if (scores.contains("oracle")) log << ", oracle mIoU " << scores["oracle"]["miou"].get<double>();
  log << ", instances " << n_inst << "\n";
}

void stage_demo(const Config& c, std::ostream& log) {
  const auto cloud_path = resolve(c, "paths.cloud");
  save_cloud(cloud_path, demo_scene(seed_of(c)), PlyFormat::binary_little_endian);
  log << "demo: wrote synthetic scene to " << cloud_path.string() << "\n";
  for (const auto& s : stage_names())
    if (s != "demo") run_stage(s, c, log);
  const auto scores = io::read_file(resolve(c, "paths.scores"));
  log.write(scores.data(), std::streamsize(scores.size()));
}

}  // namespace

void run_stage(const std::string& stage, const Config& c, std::ostream& log) {
  if (stage == "render") return stage_render(c, log);
  if (stage == "filter") return stage_filter(c, log);
  if (stage == "lift") return stage_lift(c, log);
  if (stage == "label") return stage_label(c, log);
  if (stage == "partition") return stage_partition(c, log);
  if (stage == "train") return stage_train(c, log);
  if (stage == "infer") return stage_infer(c, log);
  if (stage == "query") return stage_query(c, log);
  if (stage == "eval") return stage_eval(c, log);
  if (stage == "demo") return stage_demo(c, log);
  throw ConfigError("unknown stage " + stage);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const PrerequisiteError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArgumentError*>(&e)) return 2;
  return 1;
}

}  // namespace haec

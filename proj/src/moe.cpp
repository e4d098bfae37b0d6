#include "haec/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "haec/autodiff.hpp"
#include "haec/binary_io.hpp"
#include "haec/error.hpp"
#include "haec/rng.hpp"
#include "json.hpp"

namespace haec {

using ad::Mat;
using ad::Tape;
using ad::Var;

void MoeConfig::validate() const {
  if (levels < 1) throw ConfigError("model.levels must be at least 1");
  if (hidden < 1) throw ConfigError("model.hidden must be at least 1");
  if (experts < 2) throw ConfigError("model.experts must be at least 2 for top-2 routing");
  if (top_k != 2) throw ConfigError("model.top_k is fixed at 2");
  if (heads < 1 || hidden % heads != 0) throw ConfigError("model.heads must divide model.hidden");
  if (head_layers < 1) throw ConfigError("model.head_layers must be at least 1");
  if (!(alpha > 0.0 && alpha < 2.0)) throw ConfigError("model.alpha must lie in (0, 2)");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("model.lr must be positive");
  for (double w : {w_rec, w_tri, w_bal, w_aff})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be non-negative");
}

namespace {
// Two largest entries, lower index first among equals.
std::array<int, 2> top2(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  int a = 0;
  for (int e = 1; e < p.size(); ++e)
    if (p(e) > p(a)) a = e;
  int b = a == 0 ? 1 : 0;
  for (int e = 0; e < p.size(); ++e)
    if (e != a && p(e) > p(b)) b = e;
  return {a, b};
}
}  // namespace

GateResult gate_from_logits(const Eigen::VectorXd& logits) {
  GateResult g;
  if (logits.size() < 2) throw ArgumentError("gate needs at least two experts");
  g.probs = (logits.array() - logits.maxCoeff()).exp();
  g.probs /= g.probs.sum();
  g.selected = top2(g.probs.transpose());
  const double s = g.probs(g.selected[0]) + g.probs(g.selected[1]);
  g.weights = {g.probs(g.selected[0]) / s, g.probs(g.selected[1]) / s};
  return g;
}

GateResult gate(const Eigen::VectorXd& node_repr, const Eigen::VectorXd& rpe_mean, const Eigen::MatrixXd& W,
                const Eigen::RowVectorXd& b) {
  Eigen::RowVectorXd in(node_repr.size() + rpe_mean.size());
  in << node_repr.transpose(), rpe_mean.transpose();
  if (W.rows() != in.size() || W.cols() != b.size()) throw ArgumentError("gate parameter shape mismatch");
  return gate_from_logits((in * W + b).transpose());
}

double load_balance_loss(const Eigen::MatrixXd& probs, std::span<const std::array<int, 2>> selected) {
  const Eigen::Index n = probs.rows(), E = probs.cols();
  if (n == 0 || std::size_t(n) != selected.size()) throw ArgumentError("load balance needs one routing per node");
  Eigen::VectorXd f = Eigen::VectorXd::Zero(E);
  for (const auto& s : selected) f(s[0]) += 0.5, f(s[1]) += 0.5;
  f /= double(n);
  const Eigen::VectorXd P = probs.colwise().mean().transpose();
  return double(E) * f.dot(P);
}

namespace {
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  return na > 0 && nb > 0 ? a.dot(b) / (na * nb) : 0.0;
}
}  // namespace

double loss_rec(const Eigen::VectorXd& pred, const std::array<Eigen::VectorXd, 3>& targets, bool masked) {
  if (masked) return 0.0;
  double s = 0.0;
  for (const auto& t : targets) s += 1.0 - cosine(pred, t);
  return s / 3.0;
}

double loss_triplet(const Eigen::VectorXd& anchor, const Eigen::VectorXd& pos, const Eigen::VectorXd& neg,
                    double alpha) {
  return std::max(0.0, cosine(anchor, neg) - cosine(anchor, pos) + alpha);
}

std::vector<double> balanced_weights(std::span<const double> labels) {
  std::size_t pos = 0;
  for (double y : labels) pos += y > 0.5;
  const std::size_t neg = labels.size() - pos;
  std::vector<double> w(labels.size(), 1.0 / double(labels.size()));
  if (pos == 0 || neg == 0) return w;
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = labels[i] > 0.5 ? 0.5 / double(pos) : 0.5 / double(neg);
  return w;
}

double affinity_bce(std::span<const double> pred, std::span<const double> labels, double eps) {
  if (pred.size() != labels.size() || pred.empty()) throw ArgumentError("bce needs matching non-empty inputs");
  const auto w = balanced_weights(labels);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double q = std::clamp(pred[i], eps, 1.0 - eps);
    total -= w[i] * (labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q));
  }
  return total;
}

std::vector<double> affinity_labels(const SuperpointHierarchy& h) {
  const auto& lv = h.levels.at(0);
  std::vector<double> y;
  y.reserve(lv.edges.size());
  for (const auto& [a, b] : lv.edges) {
    const bool same = lv.is_thing[a] && lv.is_thing[b] && !lv.masked[a] && !lv.masked[b] &&
                      lv.majority_instance[a] >= 0 && lv.majority_instance[a] == lv.majority_instance[b];
    y.push_back(same ? 1.0 : 0.0);
  }
  return y;
}

// ---------------------------------------------------------------------------

namespace {

std::string block_name(bool decoder, int level) { return (decoder ? "dec" : "enc") + std::to_string(level + 1); }

void add_block_params(ParamMap& p, Rng& rng, const std::string& name, const MoeConfig& c) {
  const int D = c.hidden;
  auto randn = [&](int r, int k, double scale) {
    Mat m(r, k);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < k; ++j) m(i, j) = scale * rng.normal();
    return m;
  };
  p[name + ".ln.g"] = Mat::Ones(1, D);
  p[name + ".ln.b"] = Mat::Zero(1, D);
  p[name + ".gate.W"] = randn(D + kRpeDim, c.experts, 1.0 / std::sqrt(double(D + kRpeDim)));
  p[name + ".gate.b"] = Mat::Zero(1, c.experts);
  for (int e = 0; e < c.experts; ++e) {
    const std::string ex = name + ".e" + std::to_string(e);
    p[ex + ".q"] = randn(D, D, 1.0 / std::sqrt(double(D)));
    p[ex + ".k"] = randn(D, D, 1.0 / std::sqrt(double(D)));
    p[ex + ".v"] = randn(D, D, 1.0 / std::sqrt(double(D)));
    p[ex + ".o"] = randn(D, D, 0.5 / std::sqrt(double(D)));
    p[ex + ".ob"] = Mat::Zero(1, D);
    p[ex + ".r"] = randn(kRpeDim, c.heads, 1.0 / std::sqrt(double(kRpeDim)));
  }
}

std::vector<int> head_dims(int D, int C, int layers) {
  std::vector<int> d(layers + 1);
  for (int k = 0; k <= layers; ++k) d[k] = int(std::lround(D + double(C - D) * k / layers));
  return d;
}

struct LevelCtx {
  int n = 0;
  Mat x;                      // z-scored sp_geom
  std::vector<int> dst, src;  // directed attention edges, self loops last
  Mat rpe;                    // per directed edge
  Mat rpe_mean;               // per node, over incoming non-self edges
  std::vector<int> parent;    // this level's parent_of (children -> this level), empty on level 0
  Mat inv_children;           // n x 1
  double scale = 1.0;
};

Mat zscore(const RowMatrix& x) {
  Mat out = x;
  const double n = double(x.rows());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).sum() / n;
    const double var = (x.col(j).array() - mean).square().sum() / n;
    if (var <= 1e-24) out.col(j).setZero();
    else out.col(j) = (x.col(j).array() - mean) / std::sqrt(var);
  }
  return out;
}

std::vector<LevelCtx> make_contexts(const SuperpointHierarchy& h) {
  std::vector<LevelCtx> ctx(h.levels.size());
  for (std::size_t l = 0; l < h.levels.size(); ++l) {
    const auto& lv = h.levels[l];
    auto& c = ctx[l];
    c.n = int(lv.size);
    c.x = zscore(lv.sp_geom);
    double total = 0.0;
    for (const auto& [a, b] : lv.edges)
      total += (lv.sp_geom.row(b).head<3>() - lv.sp_geom.row(a).head<3>()).norm();
    if (!lv.edges.empty() && total > 0) c.scale = total / double(lv.edges.size());
    const std::size_t m = 2 * lv.edges.size() + lv.size;
    c.rpe = Mat::Zero(m, kRpeDim);
    c.rpe_mean = Mat::Zero(c.n, kRpeDim);
    std::vector<double> deg(c.n, 0.0);
    std::size_t k = 0;
    for (std::size_t e = 0; e < lv.edges.size(); ++e) {
      const int a = int(lv.edges[e].first), b = int(lv.edges[e].second);
      for (auto [i, j] : {std::pair{b, a}, std::pair{a, b}}) {
        c.dst.push_back(i), c.src.push_back(j);
        c.rpe.row(k).head<3>() = (lv.sp_geom.row(j).head<3>() - lv.sp_geom.row(i).head<3>()) / c.scale;
        c.rpe.row(k).tail<kEdgeFeatDim>() = lv.edge_features.row(e) / c.scale;
        c.rpe_mean.row(i) += c.rpe.row(k);
        deg[i] += 1.0;
        ++k;
      }
    }
    for (int i = 0; i < c.n; ++i) {
      c.dst.push_back(i), c.src.push_back(i);
      if (deg[i] > 0) c.rpe_mean.row(i) /= deg[i];
    }
    if (l > 0) {
      c.parent.assign(lv.parent_of.begin(), lv.parent_of.end());
      c.inv_children = Mat::Zero(c.n, 1);
      for (int p : c.parent) c.inv_children(p) += 1.0;
      c.inv_children = c.inv_children.cwiseInverse();
    }
  }
  return ctx;
}

class Forward {
 public:
  Forward(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& c, const EvalOptions& o)
      : h_(h), params_(params), c_(c), o_(o), ctx_(make_contexts(h)) {}

  Evaluation run() {
    const int L = int(h_.levels.size());
    const int C = int(h_.dim);
    // Encoder fine -> coarse.
    std::vector<Var> enc(L);
    for (int l = 0; l < L; ++l) {
      Var x = t_.constant(ctx_[l].x);
      Var in = t_.gelu(t_.add_row(t_.matmul(x, P("in" + std::to_string(l + 1) + ".W")),
                                  P("in" + std::to_string(l + 1) + ".b")));
      Var hl = in;
      if (l > 0) {
        Var pooled = t_.scale_rows(t_.segment_sum(enc[l - 1], ctx_[l].parent, ctx_[l].n),
                                   t_.constant(ctx_[l].inv_children));
        hl = t_.add(pooled, in);
      }
      enc[l] = block(block_name(false, l), hl, ctx_[l]);
    }
    // Decoder coarse -> fine.
    Var cur = enc[L - 1];
    for (int l = L - 2; l >= 0; --l) {
      Var up = t_.gather_rows(cur, ctx_[l + 1].parent);
      cur = block(block_name(true, l), t_.add(enc[l], up), ctx_[l]);
    }
    // Final norm shared by both heads.
    cur = t_.layer_norm_rows(cur, P("out.ln.g"), P("out.ln.b"));
    // Semantic head.
    Var z = cur;
    for (int k = 0; k < c_.head_layers; ++k) {
      z = t_.add_row(t_.matmul(z, P("sem" + std::to_string(k) + ".W")), P("sem" + std::to_string(k) + ".b"));
      if (k + 1 < c_.head_layers) z = t_.gelu(z);
    }
    if (t_.value(z).cols() != C) throw ConfigError("checkpoint feature dimension does not match the hierarchy");
    Var pred = t_.normalize_rows(z);

    Evaluation ev;
    auto& out = ev.out;
    out.pred_vec = t_.value(pred);
    out.routing = routing_;
    out.gate_stats = stats_;

    // Affinity head.
    const auto& lv0 = h_.levels[0];
    Var l_aff = t_.constant(Mat::Zero(1, 1));
    if (!lv0.edges.empty()) {
      std::vector<int> ea, eb;
      for (const auto& [a, b] : lv0.edges) ea.push_back(int(a)), eb.push_back(int(b));
      Var ha = t_.gather_rows(cur, ea), hb = t_.gather_rows(cur, eb);
      Var feat = t_.concat_cols(t_.concat_cols(t_.abs(t_.sub(ha, hb)), t_.mul(ha, hb)),
                                t_.constant(Mat(lv0.edge_features / ctx_[0].scale)));
      Var hid = t_.gelu(t_.add_row(t_.matmul(feat, P("aff1.W")), P("aff1.b")));
      Var logit = t_.add_row(t_.matmul(hid, P("aff2.W")), P("aff2.b"));
      Var p = t_.sigmoid(logit);
      const Mat& pv = t_.value(p);
      out.pred_affinity.assign(pv.data(), pv.data() + pv.size());
      const auto y = affinity_labels(h_);
      const auto w = balanced_weights(y);
      l_aff = t_.bce_logits_weighted(logit, Eigen::Map<const Mat>(y.data(), Eigen::Index(y.size()), 1),
                                     Eigen::Map<const Mat>(w.data(), Eigen::Index(w.size()), 1));
    }

    Var l_rec = rec_loss(pred);
    Var l_tri = triplet_loss(pred);
    Var l_bal = t_.constant(Mat::Zero(1, 1));
    for (Var b : bal_) l_bal = t_.add(l_bal, b);
    l_bal = t_.scale(l_bal, 1.0 / double(bal_.size()));
    Var total = t_.add(t_.add(t_.scale(l_rec, c_.w_rec), t_.scale(l_tri, c_.w_tri)),
                       t_.add(t_.scale(l_bal, c_.w_bal), t_.scale(l_aff, c_.w_aff)));
    out.losses = {t_.value(l_rec)(0, 0), t_.value(l_tri)(0, 0), t_.value(l_bal)(0, 0), t_.value(l_aff)(0, 0),
                  t_.value(total)(0, 0)};
    if (o_.gradients) {
      t_.backward(total);
      for (const auto& [name, v] : vars_) ev.grads[name] = t_.grad(v);
    }
    return ev;
  }

 private:
  Var P(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) throw ConfigError("checkpoint lacks parameter " + name);
    Var v = t_.param(p->second);
    vars_.emplace(name, v);
    return v;
  }

  Var expert(const std::string& ex, Var u, const LevelCtx& L) {
    const int D = c_.hidden, H = c_.heads, dh = D / H;
    Mat B = Mat::Zero(D, H);
    for (int d = 0; d < D; ++d) B(d, d / dh) = 1.0;
    Var q = t_.gather_rows(t_.matmul(u, P(ex + ".q")), L.dst);
    Var k = t_.gather_rows(t_.matmul(u, P(ex + ".k")), L.src);
    Var v = t_.gather_rows(t_.matmul(u, P(ex + ".v")), L.src);
    Var score = t_.add(t_.scale(t_.matmul(t_.mul(q, k), t_.constant(B)), 1.0 / std::sqrt(double(dh))),
                       t_.matmul(t_.constant(L.rpe), P(ex + ".r")));
    Var attn = t_.segment_softmax(score, L.dst, L.n);
    Var msg = t_.mul(t_.matmul(attn, t_.constant(B.transpose())), v);
    Var agg = t_.segment_sum(msg, L.dst, L.n);
    return t_.add_row(t_.matmul(agg, P(ex + ".o")), P(ex + ".ob"));
  }

  Var block(const std::string& name, Var h, const LevelCtx& L) {
    const int E = c_.experts;
    Var u = t_.layer_norm_rows(h, P(name + ".ln.g"), P(name + ".ln.b"));
    Var gin = t_.concat_cols(u, t_.constant(L.rpe_mean));
    Var probs = t_.softmax_rows(t_.add_row(t_.matmul(gin, P(name + ".gate.W")), P(name + ".gate.b")));
    const Mat& pv = t_.value(probs);

    const std::size_t bi = routing_.blocks.size();
    std::vector<std::array<int, 2>> sel(L.n);
    if (o_.frozen) {
      if (bi >= o_.frozen->blocks.size() || o_.frozen->blocks[bi].size() != std::size_t(L.n))
        throw ArgumentError("frozen routing does not match the model");
      sel = o_.frozen->blocks[bi];
    } else {
      for (int i = 0; i < L.n; ++i) sel[i] = top2(pv.row(i));
    }
    Mat mask = Mat::Zero(L.n, E);
    for (int i = 0; i < L.n; ++i) mask(i, sel[i][0]) = 1.0, mask(i, sel[i][1]) = 1.0;
    Var w = t_.masked_renorm(probs, mask);

    GateStats gs;
    gs.f.assign(E, 0.0);
    for (const auto& s : sel) gs.f[s[0]] += 0.5 / L.n, gs.f[s[1]] += 0.5 / L.n;
    Var P_e = t_.matmul(t_.constant(Mat::Constant(1, L.n, 1.0 / L.n)), probs);
    Var bal = t_.scale(t_.matmul(P_e, t_.constant(Eigen::Map<const Mat>(gs.f.data(), E, 1))), double(E));
    const Mat& pe = t_.value(P_e);
    gs.P.assign(pe.data(), pe.data() + E);
    gs.loss = t_.value(bal)(0, 0);
    stats_.push_back(gs);
    bal_.push_back(bal);
    routing_.blocks.push_back(std::move(sel));

    Var out = h;
    for (int e = 0; e < E; ++e) {
      // Every expert runs on every node; unselected experts carry zero weight.
      Var y = expert(name + ".e" + std::to_string(e), u, L);
      out = t_.add(out, t_.scale_rows(y, t_.slice_cols(w, e, 1)));
    }
    return out;
  }

  Var rec_loss(Var pred) {
    const auto& lv = h_.levels[0];
    std::vector<int> keep;
    for (std::size_t s = 0; s < lv.size; ++s)
      if (!lv.masked[s]) keep.push_back(int(s));
    if (keep.empty()) return t_.constant(Mat::Zero(1, 1));
    Var pk = t_.gather_rows(pred, keep);
    Var sum = t_.constant(Mat::Zero(keep.size(), 1));
    for (const RowMatrix* tm : {&lv.t1, &lv.t2, &lv.t3}) {
      Mat tn(keep.size(), tm->cols());
      for (std::size_t k = 0; k < keep.size(); ++k) {
        const double nrm = tm->row(keep[k]).norm();
        tn.row(k) = nrm > 0 ? Eigen::RowVectorXd(tm->row(keep[k]) / nrm) : Eigen::RowVectorXd::Zero(tm->cols());
      }
      sum = t_.add(sum, t_.row_dot(pk, t_.constant(tn)));
    }
    return t_.add_scalar(t_.scale(t_.mean(sum), -1.0 / 3.0), 1.0);
  }

  Var triplet_loss(Var pred) {
    const auto& lv = h_.levels[0];
    std::vector<int> anchors, pos, neg;
    Rng rng(mix_seed(c_.seed, std::uint64_t(o_.step)));
    std::vector<int> live;
    for (std::size_t s = 0; s < lv.size; ++s)
      if (!lv.masked[s]) live.push_back(int(s));
    for (int a : live) {
      std::vector<int> same, other;
      for (int s : live) {
        if (s == a) continue;
        (lv.majority_class[s] == lv.majority_class[a] ? same : other).push_back(s);
      }
      if (same.empty() || other.empty()) continue;
      anchors.push_back(a);
      pos.push_back(same[rng.index(same.size())]);
      neg.push_back(other[rng.index(other.size())]);
    }
    if (anchors.empty()) return t_.constant(Mat::Zero(1, 1));
    Var A = t_.gather_rows(pred, anchors);
    Var gap = t_.sub(t_.row_dot(A, t_.gather_rows(pred, neg)), t_.row_dot(A, t_.gather_rows(pred, pos)));
    return t_.mean(t_.relu(t_.add_scalar(gap, c_.alpha)));
  }

  const SuperpointHierarchy& h_;
  const ParamMap& params_;
  const MoeConfig& c_;
  const EvalOptions& o_;
  std::vector<LevelCtx> ctx_;
  Tape t_;
  std::map<std::string, Var> vars_;
  Routing routing_;
  std::vector<GateStats> stats_;
  std::vector<Var> bal_;
};

}  // namespace

ParamMap init_params(const MoeConfig& c, std::size_t feature_dim) {
  c.validate();
  if (feature_dim < 1) throw ConfigError("feature dimension must be positive");
  ParamMap p;
  Rng rng(mix_seed(c.seed, 0x6d6f65));
  const int D = c.hidden;
  auto randn = [&](int r, int k, double scale) {
    Mat m(r, k);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < k; ++j) m(i, j) = scale * rng.normal();
    return m;
  };
  for (int l = 0; l < c.levels; ++l) {
    p["in" + std::to_string(l + 1) + ".W"] = randn(kGeomDim, D, 1.0 / std::sqrt(double(kGeomDim)));
    p["in" + std::to_string(l + 1) + ".b"] = Mat::Zero(1, D);
  }
  for (int l = 0; l < c.levels; ++l) add_block_params(p, rng, block_name(false, l), c);
  for (int l = c.levels - 2; l >= 0; --l) add_block_params(p, rng, block_name(true, l), c);
  p["out.ln.g"] = Mat::Ones(1, D);
  p["out.ln.b"] = Mat::Zero(1, D);
  const auto dims = head_dims(D, int(feature_dim), c.head_layers);
  for (int k = 0; k < c.head_layers; ++k) {
    p["sem" + std::to_string(k) + ".W"] = randn(dims[k], dims[k + 1], 1.0 / std::sqrt(double(dims[k])));
    p["sem" + std::to_string(k) + ".b"] = Mat::Zero(1, dims[k + 1]);
  }
  p["aff1.W"] = randn(2 * D + kEdgeFeatDim, D, 1.0 / std::sqrt(double(2 * D + kEdgeFeatDim)));
  p["aff1.b"] = Mat::Zero(1, D);
  p["aff2.W"] = randn(D, 1, 1.0 / std::sqrt(double(D)));
  p["aff2.b"] = Mat::Zero(1, 1);
  return p;
}

Evaluation evaluate(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& config,
                    const EvalOptions& options) {
  config.validate();
  if (int(h.levels.size()) != config.levels)
    throw ConfigError("hierarchy has " + std::to_string(h.levels.size()) + " levels but model.levels is " +
                      std::to_string(config.levels));
  for (const auto& [name, m] : params)
    if (!m.allFinite()) throw NumericError("non-finite parameter " + name);
  return Forward(h, params, config, options).run();
}

ForwardOutput forward(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& config, int step) {
  EvalOptions o;
  o.step = step;
  return evaluate(h, params, config, o).out;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

double central_difference(const std::function<double(double)>& f, double x, double eps) {
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

GradCheckResult grad_check(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& config,
                           std::size_t max_samples, double eps, std::uint64_t seed,
                           const std::vector<std::string>& only) {
  EvalOptions base_opt;
  base_opt.gradients = true;
  const auto base = evaluate(h, params, config, base_opt);
  const Routing routing = base.out.routing;

  std::vector<std::pair<std::string, Eigen::Index>> entries;
  for (const auto& [name, m] : params) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    for (Eigen::Index i = 0; i < m.size(); ++i) entries.emplace_back(name, i);
  }
  Rng rng(seed);
  const std::size_t n = std::min(max_samples, entries.size());
  for (std::size_t i = 0; i < n; ++i) std::swap(entries[i], entries[i + rng.index(entries.size() - i)]);
  entries.resize(n);

  GradCheckResult r;
  ParamMap p = params;
  EvalOptions frozen;
  frozen.frozen = &routing;
  for (const auto& [name, i] : entries) {
    double& x = p[name](i);
    const double x0 = x;
    auto moved_at = [&](double v) {
      x = v;
      return !(forward(h, p, config).routing == routing);
    };
    const bool moved = moved_at(x0 + eps) || moved_at(x0 - eps);
    x = x0;
    if (moved) {
      ++r.excluded;
      continue;
    }
    const double numeric = central_difference(
        [&](double v) {
          x = v;
          return evaluate(h, p, config, frozen).out.losses.total;
        },
        x0, eps);
    x = x0;
    r.max_rel_error = std::max(r.max_rel_error, relative_error(base.grads.at(name)(i), numeric));
    ++r.checked;
  }
  return r;
}

TrainResult train_toy(const SuperpointHierarchy& h, ParamMap params, const MoeConfig& config, int steps) {
  if (steps < 0) throw ArgumentError("steps must be non-negative");
  TrainResult r;
  for (int step = 0; step <= steps; ++step) {
    EvalOptions o;
    o.step = step;
    o.gradients = step < steps;
    auto ev = evaluate(h, params, config, o);
    const auto& L = ev.out.losses;
    if (!std::isfinite(L.total)) throw NumericError("training diverged at step " + std::to_string(step));
    r.trace.push_back(L);
    if (step == steps) break;
    for (auto& [name, m] : params) {
      m -= config.lr * ev.grads.at(name);
      if (!m.allFinite()) throw NumericError("training diverged at step " + std::to_string(step));
    }
  }
  r.params = std::move(params);
  return r;
}

// ---------------------------------------------------------------------------

namespace {
nlohmann::ordered_json config_json(const MoeConfig& c, std::size_t feature_dim) {
  nlohmann::ordered_json j;
  j["levels"] = c.levels;
  j["hidden"] = c.hidden;
  j["experts"] = c.experts;
  j["top_k"] = c.top_k;
  j["heads"] = c.heads;
  j["head_layers"] = c.head_layers;
  j["alpha"] = c.alpha;
  j["w_rec"] = c.w_rec;
  j["w_tri"] = c.w_tri;
  j["w_bal"] = c.w_bal;
  j["w_aff"] = c.w_aff;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["feature_dim"] = feature_dim;
  return j;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamMap& params, const MoeConfig& config,
                     std::size_t feature_dim) {
  io::ByteWriter w;
  w.put_bytes("HCK1");
  const std::string header = config_json(config, feature_dim).dump();
  w.put<std::uint32_t>(header.size());
  w.put_bytes(header);
  w.put<std::uint32_t>(params.size());
  for (const auto& [name, m] : params) {
    w.put<std::uint32_t>(name.size());
    w.put_bytes(name);
    w.put<std::uint32_t>(2);
    w.put<std::uint32_t>(m.rows());
    w.put<std::uint32_t>(m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.put(static_cast<float>(m(i, j)));
  }
  io::write_file(path, w.bytes());
}

ParamMap load_checkpoint(const std::filesystem::path& path, MoeConfig* config, std::size_t* feature_dim) {
  if (!std::filesystem::exists(path)) throw PrerequisiteError("no checkpoint at " + path.string() + " (run train)");
  const auto data = io::read_file(path);
  io::ByteReader r(data);
  r.expect_magic("HCK1");
  const auto len = r.get<std::uint32_t>();
  const std::size_t header_at = r.offset();
  const std::string header = r.get_string(len);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what(), header_at + e.byte);
  }
  if (config) {
    MoeConfig c;
    c.levels = j.at("levels"), c.hidden = j.at("hidden"), c.experts = j.at("experts"), c.top_k = j.at("top_k");
    c.heads = j.at("heads"), c.head_layers = j.at("head_layers"), c.alpha = j.at("alpha");
    c.w_rec = j.at("w_rec"), c.w_tri = j.at("w_tri"), c.w_bal = j.at("w_bal"), c.w_aff = j.at("w_aff");
    c.lr = j.at("lr"), c.seed = j.at("seed");
    *config = c;
  }
  if (feature_dim) *feature_dim = j.at("feature_dim");
  ParamMap p;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.get_string(r.get<std::uint32_t>());
    const std::size_t at = r.offset();
    if (r.get<std::uint32_t>() != 2) throw ParseError("tensor " + name + " is not rank 2", at);
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    Mat m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t k = 0; k < cols; ++k) m(i, k) = r.get<float>();
    p.emplace(name, std::move(m));
  }
  return p;
}

}  // namespace haec

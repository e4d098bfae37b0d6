#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "haec/error.hpp"
#include "haec/moe.hpp"
#include "haec/parallel.hpp"
#include "haec/synthetic.hpp"
#include "oracles.hpp"

using namespace haec;

namespace {

MoeConfig toy_config(const SuperpointHierarchy& h) {
  MoeConfig c;
  c.levels = int(h.depth());
  c.hidden = 16;
  c.experts = 4;
  return c;
}

Eigen::VectorXd unit(int dim, int axis) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  v[axis] = 1;
  return v;
}

// Relabel level-1 superpoints by perm (old -> new) and carry every dependent array along.
SuperpointHierarchy permute_level0(const SuperpointHierarchy& h, const std::vector<std::uint32_t>& perm,
                                   std::vector<std::size_t>& edge_map) {
  SuperpointHierarchy out = h;
  const auto& a = h.levels[0];
  auto& b = out.levels[0];
  const std::size_t S = a.size;
  for (auto& p : b.parent_of) p = perm[p];
  auto rows = [&](const RowMatrix& m) {
    RowMatrix r(m.rows(), m.cols());
    for (std::size_t s = 0; s < S; ++s) r.row(perm[s]) = m.row(Eigen::Index(s));
    return r;
  };
  b.sp_geom = rows(a.sp_geom);
  b.t1 = rows(a.t1);
  b.t2 = rows(a.t2);
  b.t3 = rows(a.t3);
  for (std::size_t s = 0; s < S; ++s) {
    b.point_count[perm[s]] = a.point_count[s];
    b.majority_class[perm[s]] = a.majority_class[s];
    b.majority_instance[perm[s]] = a.majority_instance[s];
    b.is_thing[perm[s]] = a.is_thing[s];
    b.masked[perm[s]] = a.masked[s];
  }
  std::vector<Edge> e;
  for (const auto& [x, y] : a.edges) e.emplace_back(std::min(perm[x], perm[y]), std::max(perm[x], perm[y]));
  b.edges = make_graph(S, e).edges;
  edge_map.assign(a.edges.size(), 0);
  for (std::size_t k = 0; k < e.size(); ++k)
    edge_map[k] = std::size_t(std::lower_bound(b.edges.begin(), b.edges.end(), e[k]) - b.edges.begin());
  for (std::size_t k = 0; k < e.size(); ++k) b.edge_features.row(Eigen::Index(edge_map[k])) = a.edge_features.row(Eigen::Index(k));
  if (h.depth() > 1) {
    auto& up = out.levels[1].parent_of;
    for (std::size_t s = 0; s < S; ++s) up[perm[s]] = h.levels[1].parent_of[s];
  }
  return out;
}

}  // namespace

TEST_CASE("gate") {
  auto g = gate_from_logits(Eigen::VectorXd::Zero(4));
  for (int e = 0; e < 4; ++e) CHECK(g.probs[e] == doctest::Approx(0.25));
  CHECK(g.selected == std::array<int, 2>{0, 1});
  CHECK(g.weights[0] == 0.5);
  CHECK(g.weights[1] == 0.5);

  Eigen::VectorXd l(4);
  l << 10, 0, 0, 0;
  g = gate_from_logits(l);
  CHECK(g.selected[0] == 0);
  CHECK(g.weights[0] > 0.9999);

  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    Eigen::VectorXd x(4);
    for (auto& v : x) v = 3.0 * rng.normal();
    g = gate_from_logits(x);
    CHECK(std::abs(g.weights[0] + g.weights[1] - 1.0) < 1e-12);
    CHECK(g.selected[0] != g.selected[1]);
    CHECK(g.probs[g.selected[0]] >= g.probs[g.selected[1]]);
    for (int e = 0; e < 4; ++e)
      if (e != g.selected[0] && e != g.selected[1]) CHECK(g.probs[e] <= g.probs[g.selected[1]]);
  }
  CHECK_THROWS_AS(gate_from_logits(Eigen::VectorXd::Zero(1)), ArgumentError);
}

TEST_CASE("load balance") {
  const int n = 64, E = 4;
  std::vector<std::array<int, 2>> sel;
  for (int i = 0; i < n; ++i) sel.push_back({(2 * i) % E, (2 * i + 1) % E});
  CHECK(load_balance_loss(Eigen::MatrixXd::Constant(n, E, 0.25), sel) == doctest::Approx(1.0));

  Eigen::MatrixXd one = Eigen::MatrixXd::Zero(n, E);
  one.col(0).setOnes();
  std::vector<std::array<int, 2>> same(std::size_t(n), {0, 0});
  CHECK(load_balance_loss(one, same) == doctest::Approx(double(E)));

  Rng rng(8);
  Eigen::MatrixXd probs(n, E);
  std::vector<std::array<int, 2>> top;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x(E);
    for (auto& v : x) v = rng.normal();
    const auto g = gate_from_logits(x);
    probs.row(i) = g.probs.transpose();
    top.push_back(g.selected);
  }
  CHECK(std::abs(load_balance_loss(probs, top) - oracle::load_balance(probs, top)) < 1e-9);
}

TEST_CASE("reconstruction and triplet losses") {
  const auto v = unit(5, 0);
  CHECK(loss_rec(v, {v, v, v}) == 0.0);
  CHECK(std::abs(loss_rec(v, {-v, -v, -v}) - 2.0) < 1e-12);
  const auto o = unit(5, 1);
  CHECK(std::abs(loss_rec(v, {o, o, o}) - 1.0) < 1e-12);
  CHECK(loss_rec(v, {-v, -v, -v}, true) == 0.0);

  const double alpha = 0.2;
  auto dir = [](double c) {
    Eigen::VectorXd x(2);
    x << c, std::sqrt(1 - c * c);
    return x;
  };
  const auto a = unit(2, 0);
  CHECK(std::abs(loss_triplet(a, dir(1.0), dir(0.0), alpha) - 0.0) < 1e-12);
  CHECK(std::abs(loss_triplet(a, dir(0.3), dir(0.9), alpha) - 0.8) < 1e-12);
  CHECK(std::abs(loss_triplet(a, dir(0.6), dir(0.6), alpha) - 0.2) < 1e-12);
}

TEST_CASE("affinity bce") {
  const std::vector<double> y{1, 0, 1, 0, 0};
  const std::vector<double> perfect{1, 0, 1, 0, 0};
  CHECK(affinity_bce(perfect, y) <= 1e-6);
  CHECK(affinity_bce(std::vector<double>(5, 0.5), y) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> p, l;
    for (int i = 0; i < 40; ++i) {
      p.push_back(rng.uniform(0.01, 0.99));
      l.push_back(rng.uniform() < 0.2 ? 1.0 : 0.0);
    }
    CHECK(std::abs(affinity_bce(p, l) - oracle::balanced_bce(p, l)) < 1e-12);
  }
  CHECK_THROWS_AS(affinity_bce(std::vector<double>{}, std::vector<double>{}), ArgumentError);
}

TEST_CASE("affinity labels follow pseudo-instances") {
  const auto h = toy_hierarchy(12, 8, 2, 3);
  const auto y = affinity_labels(h);
  const auto& lv = h.levels[0];
  REQUIRE(y.size() == lv.edges.size());
  for (std::size_t e = 0; e < y.size(); ++e) {
    const auto [a, b] = lv.edges[e];
    const bool same = lv.is_thing[a] && lv.is_thing[b] && !lv.masked[a] && !lv.masked[b] &&
                      lv.majority_instance[a] == lv.majority_instance[b];
    CHECK(y[e] == (same ? 1.0 : 0.0));
  }
}

TEST_CASE("forward shapes, determinism and permutation equivariance") {
  const auto h = toy_hierarchy(12, 32, 3, 21);
  const auto cfg = toy_config(h);
  const auto params = init_params(cfg, 32);
  const auto out = forward(h, params, cfg);
  CHECK(out.pred_vec.rows() == 12);
  CHECK(out.pred_vec.cols() == 32);
  CHECK(out.pred_affinity.size() == h.levels[0].edges.size());
  for (Eigen::Index s = 0; s < 12; ++s) CHECK(std::abs(out.pred_vec.row(s).norm() - 1.0) < 1e-12);
  for (double p : out.pred_affinity) CHECK((p > 0.0 && p < 1.0));

  const auto again = forward(h, params, cfg);
  CHECK(again.pred_vec == out.pred_vec);
  CHECK(again.pred_affinity == out.pred_affinity);
  CHECK(again.losses.total == out.losses.total);

  const auto saved = thread_limit();
  thread_limit() = 4;
  const auto threaded = forward(h, params, cfg);
  thread_limit() = saved;
  CHECK(threaded.pred_vec == out.pred_vec);
  CHECK(threaded.losses.total == out.losses.total);

  std::vector<std::uint32_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng(4);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
  std::vector<std::size_t> edge_map;
  const auto hp = permute_level0(h, perm, edge_map);
  const auto op = forward(hp, params, cfg);
  for (std::size_t s = 0; s < 12; ++s)
    CHECK((op.pred_vec.row(perm[s]) - out.pred_vec.row(Eigen::Index(s))).cwiseAbs().maxCoeff() < 1e-9);
  for (std::size_t e = 0; e < edge_map.size(); ++e)
    CHECK(std::abs(op.pred_affinity[edge_map[e]] - out.pred_affinity[e]) < 1e-9);

  auto wrong = cfg;
  wrong.levels = 2;
  CHECK_THROWS_AS(forward(h, params, wrong), ConfigError);
}

TEST_CASE("gradients match central differences") {
  auto quad = [](double x) { return 3.0 * x * x + 2.0 * x + 1.0; };
  CHECK(relative_error(6.0 * 0.7 + 2.0, central_difference(quad, 0.7, 1e-4)) < 1e-8);

  const auto h = toy_hierarchy(12, 32, 3, 5);
  const auto cfg = toy_config(h);
  const auto params = init_params(cfg, 32);
  const auto r = grad_check(h, params, cfg, 400, 1e-4, 1);
  CHECK(r.checked > 300);
  CHECK(r.max_rel_error < 1e-4);

  // every gate logit of the first block tied: nudging any bias changes the top-2 pair
  auto tied = params;
  tied["enc1.gate.W"].setZero();
  tied["enc1.gate.b"].setZero();
  const auto at_tie = grad_check(h, tied, cfg, 1000, 1e-4, 2, {"enc1.gate.b"});
  CHECK(at_tie.excluded == 4);
  CHECK(at_tie.checked == 0);
  const auto rest = grad_check(h, tied, cfg, 1000, 1e-4, 2, {"sem0.W", "aff2.W", "enc1.e0.q"});
  CHECK(rest.excluded == 0);
  CHECK(rest.checked > 0);
  CHECK(rest.max_rel_error < 1e-4);
}

TEST_CASE("training") {
  const auto h = toy_hierarchy(12, 16, 2, 9);
  auto cfg = toy_config(h);
  const auto params = init_params(cfg, 16);
  const auto zero = train_toy(h, params, cfg, 0);
  CHECK(zero.trace.size() == 1);
  for (const auto& [name, m] : params) CHECK(zero.params.at(name) == m);

  const auto r = train_toy(h, params, cfg, 60);
  CHECK(r.trace.size() == 61);
  CHECK(r.trace.back().total < r.trace.front().total);

  cfg.w_rec = cfg.w_tri = cfg.w_aff = 0.0;
  cfg.w_bal = 1.0;
  const auto bal = train_toy(h, params, cfg, 100);
  CHECK(bal.trace.back().balance < bal.trace.front().balance);
  CHECK(std::abs(bal.trace.back().balance - 1.0) < std::abs(bal.trace.front().balance - 1.0));
  CHECK_THROWS_AS(train_toy(h, params, cfg, -1), ArgumentError);
}

TEST_CASE("checkpoint round trip") {
  const auto h = toy_hierarchy(12, 8, 2, 1);
  auto cfg = toy_config(h);
  cfg.seed = 77;
  const auto params = init_params(cfg, 8);
  const auto path = std::filesystem::temp_directory_path() / "haec_ckpt_rt.hck";
  save_checkpoint(path, params, cfg, 8);
  MoeConfig back_cfg;
  std::size_t dim = 0;
  const auto back = load_checkpoint(path, &back_cfg, &dim);
  std::filesystem::remove(path);
  CHECK(dim == 8);
  CHECK(back_cfg.levels == cfg.levels);
  CHECK(back_cfg.hidden == cfg.hidden);
  CHECK(back_cfg.experts == cfg.experts);
  REQUIRE(back.size() == params.size());
  for (const auto& [name, m] : params) {
    const Eigen::MatrixXd want = m.cast<float>().cast<double>();
    CHECK(back.at(name) == want);
  }
  CHECK_THROWS(load_checkpoint(path));
}

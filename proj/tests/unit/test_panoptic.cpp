#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "haec/error.hpp"
#include "haec/panoptic.hpp"
#include "haec/synthetic.hpp"
#include "oracles.hpp"

using namespace haec;

namespace {

// Segment matching per class from scratch: map (class, instance) -> point set.
struct Counts {
  int tp = 0, fp = 0, fn = 0;
  double iou = 0.0;
};

std::map<int, Counts> match_oracle(const std::vector<int>& ps, const std::vector<int>& pi, const std::vector<int>& gs,
                                   const std::vector<int>& gi, int n_classes) {
  std::vector<bool> stuff(std::size_t(n_classes), true);
  for (std::size_t p = 0; p < gs.size(); ++p)
    if (gs[p] >= 0 && gi[p] >= 0) stuff[std::size_t(gs[p])] = false;
  auto segments = [&](const std::vector<int>& s, const std::vector<int>& i) {
    std::map<std::pair<int, int>, std::set<std::size_t>> out;
    for (std::size_t p = 0; p < s.size(); ++p) {
      if (s[p] < 0) continue;
      if (stuff[std::size_t(s[p])]) out[{s[p], -1}].insert(p);
      else if (i[p] >= 0) out[{s[p], i[p]}].insert(p);
    }
    return out;
  };
  // ignore points without gt
  std::vector<int> ps2 = ps, pi2 = pi;
  for (std::size_t p = 0; p < gs.size(); ++p)
    if (gs[p] < 0) ps2[p] = -1;
  const auto P = segments(ps2, pi2), G = segments(gs, gi);
  std::map<int, Counts> c;
  std::set<std::pair<int, int>> matched;
  for (const auto& [gk, gset] : G) {
    bool hit = false;
    for (const auto& [pk, pset] : P) {
      if (pk.first != gk.first) continue;
      std::size_t inter = 0;
      for (auto p : pset) inter += gset.count(p);
      const double iou = double(inter) / double(gset.size() + pset.size() - inter);
      if (iou > 0.5) {
        c[gk.first].tp++, c[gk.first].iou += iou;
        matched.insert(pk);
        hit = true;
      }
    }
    if (!hit) c[gk.first].fn++;
  }
  for (const auto& [pk, pset] : P)
    if (!matched.count(pk)) c[pk.first].fp++;
  return c;
}

}  // namespace

TEST_CASE("instance clustering") {
  const std::vector<Edge> path{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}};
  const std::vector<std::uint8_t> all_things(6, 1);
  CHECK(cluster_instances(6, path, std::vector<double>(5, 1.0), 0.5, all_things) == std::vector<int>(6, 0));
  CHECK(cluster_instances(6, path, std::vector<double>(5, 0.4), 0.5, all_things) ==
        std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(cluster_instances(6, path, std::vector<double>{0.9, 0.9, 0.1, 0.9, 0.9}, 0.5, all_things) ==
        std::vector<int>{0, 0, 0, 1, 1, 1});
  const std::vector<std::uint8_t> mixed{1, 1, 0, 1, 1, 1};
  CHECK(cluster_instances(6, path, std::vector<double>(5, 1.0), 0.5, mixed) == std::vector<int>{0, 0, -1, 1, 1, 1});

  Rng rng(3);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 5 + rng.index(30);
    std::set<Edge> es;
    for (std::size_t k = 0; k < 2 * n; ++k) {
      auto a = std::uint32_t(rng.index(n)), b = std::uint32_t(rng.index(n));
      if (a != b) es.emplace(std::min(a, b), std::max(a, b));
    }
    const std::vector<Edge> edges(es.begin(), es.end());
    std::vector<double> aff;
    for (std::size_t e = 0; e < edges.size(); ++e) aff.push_back(rng.uniform());
    std::vector<std::uint8_t> thing;
    for (std::size_t s = 0; s < n; ++s) thing.push_back(rng.uniform() < 0.7);
    CHECK(cluster_instances(n, edges, aff, 0.6, thing) == oracle::threshold_components(n, edges, aff, 0.6, thing));
  }
}

TEST_CASE("query") {
  RowMatrix v(3, 3);
  v << 1, 0, 0, 0, 1, 0, 2, 0, 0;
  const std::vector<std::uint8_t> def{1, 1, 0};
  Eigen::VectorXd t(3);
  t << 1, 0, 0;
  const auto r = query(v, def, t, 0.2);
  CHECK(r.similarity[0] == doctest::Approx(1.0));
  CHECK(r.similarity[1] == 0.0);
  CHECK(r.similarity[2] == 0.0);
  CHECK(r.mask == std::vector<std::uint8_t>{1, 0, 0});

  // monotone in the threshold
  Rng rng(5);
  RowMatrix x(200, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const std::vector<std::uint8_t> all(200, 1);
  Eigen::VectorXd q(6);
  for (auto& e : q) e = rng.normal();
  auto lo = query(x, all, q, 0.1), hi = query(x, all, q, 0.4);
  for (std::size_t p = 0; p < 200; ++p) CHECK(hi.mask[p] <= lo.mask[p]);

  // a palette token picks exactly the points of that concept
  const auto cloud = demo_scene(6);
  MockProvider mp(6, demo_palette(), 256);
  const auto names = demo_label_set();
  RowMatrix f(cloud.size(), 256);
  for (std::size_t p = 0; p < cloud.size(); ++p)
    f.row(Eigen::Index(p)) = mp.text_embed(names[std::size_t((*cloud.gt_semantic)[p])]).transpose();
  const std::vector<std::uint8_t> every(cloud.size(), 1);
  const auto red = query(f, every, "red object", mp, 0.9);
  for (std::size_t p = 0; p < cloud.size(); ++p) CHECK(bool(red.mask[p]) == ((*cloud.gt_semantic)[p] == 0));
}

TEST_CASE("point classification") {
  RowMatrix v(3, 2);
  v << 1, 1, 1, 0, 0, 1;
  Label a{"a", Eigen::Vector2d(1, 0)}, b{"b", Eigen::Vector2d(0, 1)};
  const std::vector<Label> labels{a, b};
  CHECK(classify_points(v, std::vector<std::uint8_t>{1, 1, 0}, labels) == std::vector<int>{0, 0, -1});
  const std::vector<Label> swapped{b, a};
  CHECK(classify_points(v, std::vector<std::uint8_t>{1, 1, 1}, swapped) == std::vector<int>{0, 1, 0});
}

TEST_CASE("semantic evaluation") {
  const std::vector<int> gt{0, 0, 0, 1, 1, -1};
  auto s = eval_semantic(gt, gt, 2);
  CHECK(s.miou == 100.0);
  CHECK(s.macc == 100.0);

  const std::vector<int> all0{0, 0, 0, 0, 0, 1};
  s = eval_semantic(all0, gt, 2);
  CHECK(s.iou[0] == doctest::Approx(3.0 / 5.0));
  CHECK(s.iou[1] == 0.0);
  CHECK(s.miou == doctest::Approx(30.0));

  // class 2 absent from gt: excluded from the means
  s = eval_semantic(gt, gt, 3);
  CHECK(s.miou == 100.0);
  CHECK_FALSE(s.present[2]);
  CHECK_THROWS_AS(eval_semantic(gt, std::vector<int>(6, -1), 2), ArgumentError);
}

TEST_CASE("panoptic quality") {
  // class 0 thing with one instance of four points, class 1 stuff
  const std::vector<int> gs{0, 0, 0, 0, 1, 1}, gi{0, 0, 0, 0, -1, -1};
  auto r = eval_panoptic(gs, gi, gs, gi, 2);
  CHECK(r.pq == doctest::Approx(100.0));
  CHECK(r.per_class[1].stuff);

  const std::vector<int> split{0, 0, 1, 1, -1, -1};
  r = eval_panoptic(gs, split, gs, gi, 2);
  CHECK(r.per_class[0].tp == 0);
  CHECK(r.per_class[0].fp == 2);
  CHECK(r.per_class[0].fn == 1);
  CHECK(r.per_class[0].pq == 0.0);

  const std::vector<int> none(6, -1);
  r = eval_panoptic(std::vector<int>{1, 1, 1, 1, 1, 1}, none, gs, gi, 2);
  CHECK(r.per_class[0].fn == 1);
  CHECK(r.per_class[0].tp == 0);

  Rng rng(50);
  for (int t = 0; t < 50; ++t) {
    const int n = 60, C = 3;
    std::vector<int> ps(n), pi(n), g(n), gin(n);
    for (int p = 0; p < n; ++p) {
      g[std::size_t(p)] = int(rng.index(C));
      gin[std::size_t(p)] = g[std::size_t(p)] == 2 ? -1 : int(rng.index(3));
      // mostly right, sometimes perturbed
      ps[std::size_t(p)] = rng.uniform() < 0.8 ? g[std::size_t(p)] : int(rng.index(C));
      pi[std::size_t(p)] = rng.uniform() < 0.8 ? gin[std::size_t(p)] : int(rng.index(4));
    }
    const auto res = eval_panoptic(ps, pi, g, gin, C);
    const auto want = match_oracle(ps, pi, g, gin, C);
    for (int c = 0; c < C; ++c) {
      const auto& pc = res.per_class[std::size_t(c)];
      if (!pc.present) continue;
      CHECK(std::abs(pc.pq - pc.rq * pc.sq) < 1e-6);
      const auto it = want.find(c);
      const Counts w = it == want.end() ? Counts{} : it->second;
      CHECK(pc.tp == w.tp);
      CHECK(pc.fp == w.fp);
      CHECK(pc.fn == w.fn);
      CHECK(pc.iou_sum == doctest::Approx(w.iou));
    }
  }
}

TEST_CASE("oracle evaluation") {
  const auto cloud = demo_scene(3);
  MockProvider mp(3, demo_palette(), 256);
  const auto labels = embed_labels(mp, demo_label_set());
  PseudoLabelSet pl;
  pl.class_repr = RowMatrix(2, 256);
  // deliberately swapped cluster ids
  pl.class_repr.row(0) = labels[1].vec.transpose();
  pl.class_repr.row(1) = labels[0].vec.transpose();
  pl.is_thing = {0, 1};
  for (std::size_t p = 0; p < cloud.size(); ++p) pl.z_pc.push_back(1 - (*cloud.gt_semantic)[p]);
  const auto s = eval_oracle(pl, *cloud.gt_semantic, labels);
  CHECK(s.miou == 100.0);
  CHECK(s.macc == 100.0);
  std::fill(pl.z_pc.begin(), pl.z_pc.end(), -1);
  CHECK_THROWS_AS(eval_oracle(pl, *cloud.gt_semantic, labels), ArgumentError);
}

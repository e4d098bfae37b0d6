#include "haec/panoptic.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "haec/error.hpp"

namespace haec {

namespace {
struct UnionFind {
  std::vector<std::uint32_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
  std::uint32_t find(std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};
}  // namespace

std::vector<int> cluster_instances(std::size_t n, std::span<const Edge> edges, std::span<const double> affinity,
                                   double threshold, std::span<const std::uint8_t> thing_mask) {
  if (edges.size() != affinity.size()) throw ArgumentError("one affinity per edge required");
  if (thing_mask.size() != n) throw ArgumentError("one thing flag per superpoint required");
  UnionFind uf(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [a, b] = edges[e];
    if (a >= n || b >= n) throw ArgumentError("edge endpoint out of range");
    if (affinity[e] > threshold && thing_mask[a] && thing_mask[b]) uf.unite(a, b);
  }
  std::vector<int> id(n, -1), root_id(n, -1);
  int next = 0;
  for (std::uint32_t s = 0; s < n; ++s) {
    if (!thing_mask[s]) continue;
    const auto r = uf.find(s);
    if (root_id[r] < 0) root_id[r] = next++;
    id[s] = root_id[r];
  }
  return id;
}

QueryResult query(const RowMatrix& vectors, std::span<const std::uint8_t> defined, const Eigen::VectorXd& text_vec,
                  double threshold) {
  if (vectors.cols() != text_vec.size()) throw ArgumentError("query embedding dimension mismatch");
  if (defined.size() != std::size_t(vectors.rows())) throw ArgumentError("one defined flag per point required");
  QueryResult r;
  r.similarity.assign(vectors.rows(), 0.0);
  r.mask.assign(vectors.rows(), 0);
  const double tn = text_vec.norm();
  for (Eigen::Index p = 0; p < vectors.rows(); ++p) {
    if (!defined[p]) continue;
    const double vn = vectors.row(p).norm();
    if (vn == 0.0 || tn == 0.0) continue;
    r.similarity[p] = vectors.row(p).dot(text_vec) / (vn * tn);
    r.mask[p] = r.similarity[p] > threshold;
  }
  return r;
}

QueryResult query(const RowMatrix& vectors, std::span<const std::uint8_t> defined, std::string_view text,
                  const EmbeddingProvider& provider, double threshold) {
  return query(vectors, defined, provider.text_embed(text), threshold);
}

std::vector<int> classify_points(const RowMatrix& vectors, std::span<const std::uint8_t> defined,
                                 std::span<const Label> labels) {
  if (labels.empty()) throw ArgumentError("label set is empty");
  RowMatrix L(labels.size(), vectors.cols());
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k].vec.size() != vectors.cols()) throw ArgumentError("label embedding dimension mismatch");
    const double n = labels[k].vec.norm();
    L.row(k) = n > 0 ? Eigen::RowVectorXd(labels[k].vec.transpose() / n) : Eigen::RowVectorXd::Zero(vectors.cols());
  }
  std::vector<int> out(vectors.rows(), -1);
  for (Eigen::Index p = 0; p < vectors.rows(); ++p) {
    if (!defined[p]) continue;
    const Eigen::VectorXd s = L * vectors.row(p).transpose();
    int best = 0;
    for (Eigen::Index k = 1; k < s.size(); ++k)
      if (s(k) > s(best)) best = int(k);
    out[p] = best;
  }
  return out;
}

SemanticScores eval_semantic(std::span<const int> pred, std::span<const int> gt, int n_classes) {
  if (pred.size() != gt.size()) throw ArgumentError("prediction and gt lengths differ");
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t scored = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0) continue;
    if (gt[i] >= n_classes) throw ArgumentError("gt class id out of range");
    ++scored;
    if (pred[i] == gt[i]) {
      tp[gt[i]] += 1;
    } else {
      fn[gt[i]] += 1;
      if (pred[i] >= 0 && pred[i] < n_classes) fp[pred[i]] += 1;
    }
  }
  if (scored == 0) throw ArgumentError("no gt-labeled points to evaluate");
  SemanticScores s;
  s.iou.assign(n_classes, 0.0);
  s.acc.assign(n_classes, 0.0);
  s.present.assign(n_classes, 0);
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    const double gt_count = tp[c] + fn[c];
    if (gt_count == 0) continue;
    s.present[c] = 1;
    ++present;
    s.iou[c] = tp[c] / (tp[c] + fp[c] + fn[c]);
    s.acc[c] = tp[c] / gt_count;
    s.miou += s.iou[c];
    s.macc += s.acc[c];
  }
  s.miou = 100.0 * s.miou / present;
  s.macc = 100.0 * s.macc / present;
  return s;
}

PanopticScores eval_panoptic(std::span<const int> pred_sem, std::span<const int> pred_inst,
                             std::span<const int> gt_sem, std::span<const int> gt_inst, int n_classes) {
  const std::size_t n = gt_sem.size();
  if (pred_sem.size() != n || pred_inst.size() != n || gt_inst.size() != n)
    throw ArgumentError("panoptic inputs differ in length");
  PanopticScores out;
  out.per_class.resize(n_classes);
  std::vector<std::uint8_t> stuff(n_classes, 1);
  for (std::size_t i = 0; i < n; ++i)
    if (gt_sem[i] >= 0 && gt_sem[i] < n_classes && gt_inst[i] >= 0) stuff[gt_sem[i]] = 0;

  // Segment key: class and instance (stuff classes use instance 0).
  using Key = std::pair<int, int>;
  auto seg_of = [&](int cls, int inst) -> std::optional<Key> {
    if (cls < 0 || cls >= n_classes) return std::nullopt;
    if (stuff[cls]) return Key{cls, 0};
    if (inst < 0) return std::nullopt;
    return Key{cls, inst};
  };
  std::map<Key, double> gt_area, pred_area;
  std::map<std::pair<Key, Key>, double> inter;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt_sem[i] < 0) continue;
    const auto g = seg_of(gt_sem[i], gt_inst[i]);
    const auto p = seg_of(pred_sem[i], pred_inst[i]);
    if (g) gt_area[*g] += 1;
    if (p) pred_area[*p] += 1;
    if (g && p && g->first == p->first) inter[{*g, *p}] += 1;
  }
  std::map<Key, bool> gt_matched, pred_matched;
  for (const auto& [pair, area] : inter) {
    const double iou = area / (gt_area[pair.first] + pred_area[pair.second] - area);
    if (iou > 0.5) {
      auto& c = out.per_class[pair.first.first];
      ++c.tp;
      c.iou_sum += iou;
      gt_matched[pair.first] = true;
      pred_matched[pair.second] = true;
    }
  }
  for (const auto& [k, a] : gt_area) {
    out.per_class[k.first].present = true;
    if (!gt_matched.count(k)) ++out.per_class[k.first].fn;
  }
  for (const auto& [k, a] : pred_area) {
    out.per_class[k.first].present = true;
    if (!pred_matched.count(k)) ++out.per_class[k.first].fp;
  }
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    auto& s = out.per_class[c];
    s.stuff = stuff[c];
    if (!s.present) continue;
    ++present;
    s.sq = s.tp > 0 ? s.iou_sum / s.tp : 0.0;
    s.rq = s.tp / (s.tp + 0.5 * s.fp + 0.5 * s.fn);
    s.pq = s.iou_sum / (s.tp + 0.5 * s.fp + 0.5 * s.fn);
    out.pq += s.pq, out.sq += s.sq, out.rq += s.rq;
  }
  if (present > 0) {
    out.pq = 100.0 * out.pq / present;
    out.sq = 100.0 * out.sq / present;
    out.rq = 100.0 * out.rq / present;
  }
  out.semantic = eval_semantic(pred_sem, gt_sem, n_classes);
  out.miou = out.semantic.miou;
  out.macc = out.semantic.macc;
  return out;
}

SemanticScores eval_oracle(const PseudoLabelSet& labels, std::span<const int> gt_sem, std::span<const Label> label_set) {
  if (gt_sem.size() != labels.z_pc.size()) throw ArgumentError("gt does not cover the labeled cloud");
  const std::size_t K = labels.num_classes();
  std::vector<std::uint8_t> all(K, 1);
  const auto class_label = classify_points(labels.class_repr, all, label_set);
  std::vector<int> pred, gt;
  for (std::size_t p = 0; p < gt_sem.size(); ++p) {
    if (labels.z_pc[p] < 0) continue;
    pred.push_back(class_label[labels.z_pc[p]]);
    gt.push_back(gt_sem[p]);
  }
  if (pred.empty()) throw ArgumentError("no pseudo-labeled points to evaluate");
  return eval_semantic(pred, gt, int(label_set.size()));
}

}  // namespace haec

#include "haec/superpoint.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"
#include "haec/kdtree.hpp"
#include "haec/parallel.hpp"
#include "haec/rng.hpp"
#include "json.hpp"

namespace haec {

void Graph::build_csr() {
  offsets.assign(n + 1, 0);
  for (const auto& [a, b] : edges) {
    ++offsets[a + 1];
    ++offsets[b + 1];
  }
  for (std::size_t i = 0; i < n; ++i) offsets[i + 1] += offsets[i];
  neighbors.assign(offsets[n], 0);
  std::vector<std::uint32_t> fill(offsets.begin(), offsets.end() - 1);
  for (const auto& [a, b] : edges) {
    neighbors[fill[a]++] = b;
    neighbors[fill[b]++] = a;
  }
  for (std::size_t i = 0; i < n; ++i) std::sort(neighbors.begin() + offsets[i], neighbors.begin() + offsets[i + 1]);
}

Graph make_graph(std::size_t n, std::vector<Edge> edges) {
  for (auto& e : edges) {
    if (e.first == e.second || e.first >= n || e.second >= n) throw ArgumentError("invalid graph edge");
    if (e.first > e.second) std::swap(e.first, e.second);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  Graph g;
  g.n = n;
  g.edges = std::move(edges);
  g.build_csr();
  return g;
}

namespace {

std::vector<std::vector<std::uint32_t>> knn_lists(std::span<const Eigen::Vector3d> positions, std::size_t k) {
  KdTree tree(positions);
  std::vector<std::vector<std::uint32_t>> out(positions.size());
  parallel_for(positions.size(), [&](std::size_t i) {
    const auto found = tree.knn(positions[i], k + 1);
    auto& row = out[i];
    row.reserve(k);
    for (const auto& nb : found) {
      if (nb.index == i) continue;
      if (row.size() == k) break;
      row.push_back(nb.index);
    }
  });
  return out;
}

Graph graph_from_knn(std::size_t n, const std::vector<std::vector<std::uint32_t>>& knn) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : knn[i]) edges.emplace_back(std::min<std::uint32_t>(i, j), std::max<std::uint32_t>(i, j));
  return make_graph(n, std::move(edges));
}

// Dinic max-flow on double capacities.
class MaxFlow {
 public:
  explicit MaxFlow(int n) : head_(n, -1), level_(n), iter_(n) {}

  void add_edge(int u, int v, double cap, double reverse_cap = 0.0) {
    to_.push_back(v), cap_.push_back(cap), next_.push_back(head_[u]), head_[u] = int(to_.size()) - 1;
    to_.push_back(u), cap_.push_back(reverse_cap), next_.push_back(head_[v]), head_[v] = int(to_.size()) - 1;
  }

  void run(int s, int t) {
    while (bfs(s, t)) {
      iter_ = head_;
      while (dfs(s, t, std::numeric_limits<double>::infinity()) > kEps) {
      }
    }
  }

  // Nodes still reachable from s in the residual graph.
  std::vector<std::uint8_t> source_side(int s) const {
    std::vector<std::uint8_t> seen(head_.size(), 0);
    std::vector<int> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int e = head_[u]; e >= 0; e = next_[e])
        if (cap_[e] > kEps && !seen[to_[e]]) seen[to_[e]] = 1, stack.push_back(to_[e]);
    }
    return seen;
  }

 private:
  static constexpr double kEps = 1e-13;

  bool bfs(int s, int t) {
    std::fill(level_.begin(), level_.end(), -1);
    std::deque<int> q{s};
    level_[s] = 0;
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int e = head_[u]; e >= 0; e = next_[e])
        if (cap_[e] > kEps && level_[to_[e]] < 0) level_[to_[e]] = level_[u] + 1, q.push_back(to_[e]);
    }
    return level_[t] >= 0;
  }

  double dfs(int u, int t, double f) {
    if (u == t) return f;
    for (int& e = iter_[u]; e >= 0; e = next_[e]) {
      const int v = to_[e];
      if (cap_[e] <= kEps || level_[v] != level_[u] + 1) continue;
      const double d = dfs(v, t, std::min(f, cap_[e]));
      if (d > kEps) {
        cap_[e] -= d;
        cap_[e ^ 1] += d;
        return d;
      }
    }
    return 0.0;
  }

  std::vector<int> head_, level_, iter_;
  std::vector<int> to_, next_;
  std::vector<double> cap_;
};

struct Stats {
  double n = 0.0;
  Eigen::VectorXd s;
  double q = 0.0;

  double cost() const { return n > 0.0 ? q - s.squaredNorm() / n : 0.0; }
};

double cost_of(double n, const Eigen::VectorXd& s, double q) { return n > 0.0 ? q - s.squaredNorm() / n : 0.0; }

class Partitioner {
 public:
  Partitioner(const Graph& g, const RowMatrix& x, double lambda, const PartitionOptions& opt)
      : g_(g), x_(x), lambda_(lambda), opt_(opt), comp_(g.n, 0), local_(g.n, -1), sqn_(g.n) {
    for (std::size_t i = 0; i < g.n; ++i) sqn_[i] = x.row(i).squaredNorm();
    double total = 0.0;
    for (double v : sqn_) total += v;
    tol_ = 1e-12 * (1.0 + total + lambda * double(g.edges.size()));
  }

  PartitionResult run() {
    PartitionResult r;
    if (g_.n == 0) return r;
    // One component, then its connected pieces: splitting a disconnected
    // component never adds cut edges, so this can only lower the energy.
    record(true);
    relabel_connected();
    record(false);
    for (int it = 0; it < opt_.max_outer_iterations; ++it) {
      bool changed = split_pass();
      changed |= merge_pass();
      changed |= move_pass();
      if (!changed) break;
    }
    relabel_connected();
    r.component = comp_;
    r.n_components = n_comp_;
    r.energy = partition_energy(g_, x_, comp_, lambda_);
    r.energy_trace = std::move(trace_);
    if (r.energy_trace.empty() || r.energy_trace.back() != r.energy) r.energy_trace.push_back(r.energy);
    return r;
  }

 private:
  void record(bool force) {
    if (force || opt_.trace_energy) trace_.push_back(partition_energy(g_, x_, comp_, lambda_));
  }

  Stats stats_of(std::span<const std::uint32_t> nodes) const {
    Stats st;
    st.s = Eigen::VectorXd::Zero(x_.cols());
    for (auto i : nodes) {
      st.n += 1.0;
      st.s += x_.row(i).transpose();
      st.q += sqn_[i];
    }
    return st;
  }

  std::vector<std::vector<std::uint32_t>> members() const {
    std::vector<std::vector<std::uint32_t>> m(n_comp_);
    for (std::uint32_t i = 0; i < g_.n; ++i) m[comp_[i]].push_back(i);
    return m;
  }

  // Renumber components by lowest member, splitting any that are disconnected.
  bool relabel_connected() {
    std::vector<std::uint32_t> next(g_.n, UINT32_MAX);
    std::uint32_t count = 0;
    std::vector<std::uint32_t> stack;
    for (std::uint32_t i = 0; i < g_.n; ++i) {
      if (next[i] != UINT32_MAX) continue;
      next[i] = count;
      stack.assign(1, i);
      while (!stack.empty()) {
        const auto u = stack.back();
        stack.pop_back();
        for (auto v : g_.adjacent(u))
          if (next[v] == UINT32_MAX && comp_[v] == comp_[u]) next[v] = count, stack.push_back(v);
      }
      ++count;
    }
    const bool changed = count != n_comp_;
    comp_ = std::move(next);
    n_comp_ = count;
    return changed;
  }

  // Best two-way split of one component: side[i] in {0,1} per local node and
  // the energy change. Returns false when no split lowers the energy.
  bool best_split(const std::vector<std::uint32_t>& nodes, std::vector<std::uint8_t>& side, double& delta) {
    const std::size_t m = nodes.size();
    if (m < 2) return false;
    for (std::size_t k = 0; k < m; ++k) local_[nodes[k]] = int(k);
    std::vector<std::vector<int>> adj(m);
    for (std::size_t k = 0; k < m; ++k)
      for (auto v : g_.adjacent(nodes[k]))
        if (comp_[v] == comp_[nodes[k]]) adj[k].push_back(local_[v]);
    const Stats whole = stats_of(nodes);
    const bool ok = m <= opt_.exact_split_limit ? exact_split(nodes, adj, whole, side, delta)
                                                : cut_split(nodes, adj, whole, side, delta);
    for (auto i : nodes) local_[i] = -1;
    return ok && delta < -tol_;
  }

  // Gray-code walk over all 2^(m-1) splits with node 0 pinned to side 0.
  bool exact_split(const std::vector<std::uint32_t>& nodes, const std::vector<std::vector<int>>& adj,
                   const Stats& whole, std::vector<std::uint8_t>& side, double& delta) {
    const std::size_t m = nodes.size();
    const long long steps = 1LL << (m - 1);
    std::vector<std::uint8_t> cur(m, 0);
    Eigen::VectorXd sb = Eigen::VectorXd::Zero(x_.cols());
    double nb = 0.0, qb = 0.0;
    long long cut = 0;
    double best = std::numeric_limits<double>::infinity();
    long long best_code = 0;
    const double base = whole.cost();
    for (long long t = 1; t < steps; ++t) {
      const int k = std::countr_zero(static_cast<unsigned long long>(t)) + 1;
      for (int v : adj[k]) cut += cur[v] == cur[k] ? 1 : -1;
      const double sign = cur[k] ? -1.0 : 1.0;
      cur[k] ^= 1;
      sb += sign * x_.row(nodes[k]).transpose();
      nb += sign;
      qb += sign * sqn_[nodes[k]];
      const double d = cost_of(whole.n - nb, whole.s - sb, whole.q - qb) + cost_of(nb, sb, qb) - base +
                       lambda_ * double(cut);
      if (d < best) best = d, best_code = t ^ (t >> 1);
    }
    side.assign(m, 0);
    for (std::size_t k = 1; k < m; ++k) side[k] = (best_code >> (k - 1)) & 1;
    delta = best;
    return true;
  }

  // Alternate exact two-label min-cut for fixed centers with center updates,
  // starting from the sign of the leading principal component.
  bool cut_split(const std::vector<std::uint32_t>& nodes, const std::vector<std::vector<int>>& adj,
                 const Stats& whole, std::vector<std::uint8_t>& side, double& delta) {
    const std::size_t m = nodes.size();
    const Eigen::Index d = x_.cols();
    const Eigen::RowVectorXd mean = (whole.s / whole.n).transpose();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (auto i : nodes) {
      const Eigen::RowVectorXd c = x_.row(i) - mean;
      cov.noalias() += c.transpose() * c;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.eigenvalues()(d - 1) <= 1e-14 * (1.0 + cov.trace())) return false;
    const Eigen::VectorXd axis = eig.eigenvectors().col(d - 1);
    side.assign(m, 0);
    for (std::size_t k = 0; k < m; ++k) side[k] = (x_.row(nodes[k]) - mean).dot(axis) > 0.0;

    auto centers = [&](const std::vector<std::uint8_t>& s, Eigen::RowVectorXd& a, Eigen::RowVectorXd& b) {
      a = Eigen::RowVectorXd::Zero(d), b = Eigen::RowVectorXd::Zero(d);
      double na = 0, nb = 0;
      for (std::size_t k = 0; k < m; ++k) {
        if (s[k]) b += x_.row(nodes[k]), nb += 1;
        else a += x_.row(nodes[k]), na += 1;
      }
      if (na == 0 || nb == 0) return false;
      a /= na, b /= nb;
      return true;
    };
    Eigen::RowVectorXd a, b;
    if (!centers(side, a, b)) return false;
    for (int it = 0; it < 10; ++it) {
      MaxFlow flow(int(m) + 2);
      const int src = int(m), sink = int(m) + 1;
      for (std::size_t k = 0; k < m; ++k) {
        const double da = (x_.row(nodes[k]) - a).squaredNorm();
        const double db = (x_.row(nodes[k]) - b).squaredNorm();
        if (db > da) flow.add_edge(src, int(k), db - da);
        else if (da > db) flow.add_edge(int(k), sink, da - db);
      }
      if (lambda_ > 0.0)
        for (std::size_t k = 0; k < m; ++k)
          for (int v : adj[k])
            if (v > int(k)) flow.add_edge(int(k), v, lambda_, lambda_);
      flow.run(src, sink);
      const auto reach = flow.source_side(src);
      std::vector<std::uint8_t> next(m);
      for (std::size_t k = 0; k < m; ++k) next[k] = reach[k] ? 0 : 1;
      if (next == side) break;
      Eigen::RowVectorXd na, nb;
      if (!centers(next, na, nb)) break;
      side = std::move(next);
      a = na, b = nb;
    }
    std::vector<std::uint32_t> part_a, part_b;
    for (std::size_t k = 0; k < m; ++k) (side[k] ? part_b : part_a).push_back(nodes[k]);
    long long cut = 0;
    for (std::size_t k = 0; k < m; ++k)
      for (int v : adj[k])
        if (v > int(k) && side[v] != side[k]) ++cut;
    delta = stats_of(part_a).cost() + stats_of(part_b).cost() - whole.cost() + lambda_ * double(cut);
    return true;
  }

  bool split_pass() {
    bool any = false;
    auto mem = members();
    std::deque<std::uint32_t> work;
    for (std::uint32_t c = 0; c < n_comp_; ++c) work.push_back(c);
    std::vector<std::uint8_t> side;
    while (!work.empty()) {
      const auto c = work.front();
      work.pop_front();
      double delta = 0.0;
      if (!best_split(mem[c], side, delta)) continue;
      const auto nodes = std::move(mem[c]);
      // Each side may itself be disconnected; every connected piece becomes a component.
      std::vector<std::uint32_t> piece(nodes.size(), UINT32_MAX);
      for (std::size_t k = 0; k < nodes.size(); ++k) local_[nodes[k]] = int(k);
      std::vector<std::uint32_t> ids;
      std::vector<int> stack;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (piece[k] != UINT32_MAX) continue;
        const std::uint32_t id = ids.empty() ? c : n_comp_++;
        ids.push_back(id);
        piece[k] = id;
        stack.assign(1, int(k));
        while (!stack.empty()) {
          const int u = stack.back();
          stack.pop_back();
          for (auto v : g_.adjacent(nodes[u])) {
            const int lv = local_[v];
            if (lv < 0 || piece[lv] != UINT32_MAX || side[lv] != side[u]) continue;
            piece[lv] = id;
            stack.push_back(lv);
          }
        }
      }
      for (auto i : nodes) local_[i] = -1;
      mem.resize(n_comp_);
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        comp_[nodes[k]] = piece[k];
        mem[piece[k]].push_back(nodes[k]);
      }
      for (auto id : ids) work.push_back(id);
      any = true;
      record(false);
    }
    return any;
  }

  bool merge_pass() {
    auto mem = members();
    std::vector<Stats> st(n_comp_);
    for (std::uint32_t c = 0; c < n_comp_; ++c) st[c] = stats_of(mem[c]);
    std::vector<std::map<std::uint32_t, long long>> nbr(n_comp_);
    for (const auto& [i, j] : g_.edges) {
      const auto a = comp_[i], b = comp_[j];
      if (a == b) continue;
      ++nbr[a][b];
      ++nbr[b][a];
    }
    bool any = false;
    for (;;) {
      double best = -tol_;
      std::uint32_t bc = 0, bd = 0;
      bool found = false;
      for (std::uint32_t c = 0; c < n_comp_; ++c)
        for (const auto& [d, cnt] : nbr[c]) {
          if (d <= c) continue;
          const double delta = cost_of(st[c].n + st[d].n, st[c].s + st[d].s, st[c].q + st[d].q) - st[c].cost() -
                               st[d].cost() - lambda_ * double(cnt);
          if (delta < best) best = delta, bc = c, bd = d, found = true;
        }
      if (!found) break;
      st[bc].n += st[bd].n, st[bc].s += st[bd].s, st[bc].q += st[bd].q;
      st[bd] = Stats{0.0, Eigen::VectorXd::Zero(x_.cols()), 0.0};
      for (const auto& [e, cnt] : nbr[bd]) {
        nbr[e].erase(bd);
        if (e == bc) continue;
        nbr[bc][e] += cnt;
        nbr[e][bc] += cnt;
      }
      nbr[bd].clear();
      for (auto i : mem[bd]) comp_[i] = bc;
      mem[bc].insert(mem[bc].end(), mem[bd].begin(), mem[bd].end());
      mem[bd].clear();
      any = true;
      record(false);
    }
    if (any) relabel_connected();
    return any;
  }

  bool move_pass() {
    bool any = false;
    for (int pass = 0; pass < 20; ++pass) {
      auto mem = members();
      std::vector<Stats> st(n_comp_);
      for (std::uint32_t c = 0; c < n_comp_; ++c) st[c] = stats_of(mem[c]);
      bool moved = false;
      std::vector<std::pair<std::uint32_t, long long>> around;
      for (std::uint32_t i = 0; i < g_.n; ++i) {
        const auto c = comp_[i];
        if (st[c].n <= 1.0) continue;
        around.clear();
        long long own = 0;
        for (auto v : g_.adjacent(i)) {
          if (comp_[v] == c) {
            ++own;
            continue;
          }
          auto it = std::find_if(around.begin(), around.end(), [&](const auto& p) { return p.first == comp_[v]; });
          if (it == around.end()) around.emplace_back(comp_[v], 1);
          else ++it->second;
        }
        if (around.empty()) continue;
        std::sort(around.begin(), around.end());
        const Eigen::VectorXd xi = x_.row(i).transpose();
        const double leave = cost_of(st[c].n - 1, st[c].s - xi, st[c].q - sqn_[i]) - st[c].cost();
        double best = -tol_;
        std::uint32_t target = c;
        for (const auto& [d, cnt] : around) {
          const double delta = leave + cost_of(st[d].n + 1, st[d].s + xi, st[d].q + sqn_[i]) - st[d].cost() +
                               lambda_ * double(own - cnt);
          if (delta < best) best = delta, target = d;
        }
        if (target == c) continue;
        st[c].n -= 1, st[c].s -= xi, st[c].q -= sqn_[i];
        st[target].n += 1, st[target].s += xi, st[target].q += sqn_[i];
        comp_[i] = target;
        moved = true;
        record(false);
      }
      if (!moved) break;
      any = true;
      relabel_connected();
      record(false);
    }
    return any;
  }

  const Graph& g_;
  const RowMatrix& x_;
  double lambda_;
  PartitionOptions opt_;
  std::vector<std::uint32_t> comp_;
  std::uint32_t n_comp_ = 1;
  std::vector<int> local_;
  std::vector<double> sqn_;
  std::vector<double> trace_;
  double tol_ = 0.0;
};

}  // namespace

Graph build_adjacency(std::span<const Eigen::Vector3d> positions, std::size_t k_nn) {
  if (k_nn < 1) throw ArgumentError("k_nn must be at least 1");
  if (positions.size() <= k_nn) throw ArgumentError("need more points than k_nn");
  return graph_from_knn(positions.size(), knn_lists(positions, k_nn));
}

double partition_energy(const Graph& graph, const RowMatrix& features, std::span<const std::uint32_t> component,
                        double lambda) {
  if (component.size() != graph.n || std::size_t(features.rows()) != graph.n)
    throw ArgumentError("partition size mismatch");
  std::uint32_t k = 0;
  for (auto c : component) k = std::max(k, c + 1);
  RowMatrix mean = RowMatrix::Zero(k, features.cols());
  std::vector<double> count(k, 0.0);
  for (std::size_t i = 0; i < graph.n; ++i) {
    mean.row(component[i]) += features.row(i);
    count[component[i]] += 1.0;
  }
  for (std::uint32_t c = 0; c < k; ++c)
    if (count[c] > 0) mean.row(c) /= count[c];
  double e = 0.0;
  for (std::size_t i = 0; i < graph.n; ++i) e += (features.row(i) - mean.row(component[i])).squaredNorm();
  std::size_t cut = 0;
  for (const auto& [a, b] : graph.edges) cut += component[a] != component[b];
  return e + lambda * double(cut);
}

PartitionResult partition_level(const Graph& graph, const RowMatrix& features, double lambda,
                                const PartitionOptions& options) {
  if (lambda < 0.0) throw ArgumentError("lambda must be non-negative");
  if (std::size_t(features.rows()) != graph.n) throw ArgumentError("one feature row per node required");
  if (!features.allFinite()) throw NumericError("non-finite partition features");
  return Partitioner(graph, features, lambda, options).run();
}

// ---------------------------------------------------------------------------

namespace {

struct Shape {
  double linearity = 0, planarity = 0, scattering = 0, verticality = 0;
};

Shape shape_of(const std::vector<Eigen::Vector3d>& pts) {
  Shape s;
  if (pts.size() < 3) return s;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : pts) mean += p;
  mean /= double(pts.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  cov /= double(pts.size());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const auto ev = eig.eigenvalues();  // ascending
  if (ev(2) <= 1e-15) return s;
  s.linearity = (ev(2) - ev(1)) / ev(2);
  s.planarity = (ev(1) - ev(0)) / ev(2);
  s.scattering = std::max(0.0, ev(0)) / ev(2);
  s.verticality = 1.0 - std::abs(eig.eigenvectors()(2, 0));
  return s;
}

// Members of each group as CSR: order[offs[g] .. offs[g+1]).
void group(std::span<const std::uint32_t> assign, std::size_t groups, std::vector<std::uint32_t>& offs,
           std::vector<std::uint32_t>& order) {
  offs.assign(groups + 1, 0);
  for (auto a : assign) ++offs[a + 1];
  for (std::size_t g = 0; g < groups; ++g) offs[g + 1] += offs[g];
  order.resize(assign.size());
  std::vector<std::uint32_t> fill(offs.begin(), offs.end() - 1);
  for (std::uint32_t i = 0; i < assign.size(); ++i) order[fill[assign[i]]++] = i;
}

void fill_geometry(SuperpointLevel& level, std::span<const std::uint32_t> assign, const PointCloud& cloud,
                   const Graph& point_graph) {
  const std::size_t S = level.size;
  std::vector<std::uint32_t> offs, order;
  group(assign, S, offs, order);
  level.point_count.resize(S);
  level.sp_geom = RowMatrix::Zero(S, kGeomDim);
  parallel_for(S, [&](std::size_t s) {
    level.point_count[s] = offs[s + 1] - offs[s];
    std::vector<Eigen::Vector3d> pts;
    Eigen::Vector3d lo = Eigen::Vector3d::Constant(INFINITY), hi = -lo, c = Eigen::Vector3d::Zero(),
                    rgb = Eigen::Vector3d::Zero();
    for (auto k = offs[s]; k < offs[s + 1]; ++k) {
      const auto& p = cloud.positions[order[k]];
      pts.push_back(p);
      c += p;
      rgb += cloud.colors[order[k]];
      lo = lo.cwiseMin(p), hi = hi.cwiseMax(p);
    }
    const double n = double(pts.size());
    c /= n, rgb /= n;
    const Shape sh = shape_of(pts);
    auto row = level.sp_geom.row(s);
    row.segment<3>(0) = c.transpose();
    row.segment<3>(3) = (hi - lo).transpose();
    row(6) = sh.planarity;
    row(7) = sh.linearity;
    row(8) = sh.verticality;
    row(9) = (rgb.x() - rgb.y()) / std::sqrt(2.0);
    row(10) = (rgb.x() + rgb.y() - 2.0 * rgb.z()) / std::sqrt(6.0);
  });

  struct Acc {
    Eigen::Vector3d abs_sum = Eigen::Vector3d::Zero();
    double len = 0, len2 = 0, count = 0;
  };
  std::map<Edge, Acc> acc;
  for (const auto& [p, q] : point_graph.edges) {
    auto a = assign[p], b = assign[q];
    if (a == b) continue;
    auto& e = acc[{std::min(a, b), std::max(a, b)}];
    const Eigen::Vector3d off = cloud.positions[q] - cloud.positions[p];
    e.abs_sum += off.cwiseAbs();
    e.len += off.norm();
    e.len2 += off.squaredNorm();
    e.count += 1;
  }
  level.edges.clear();
  level.edge_features = RowMatrix::Zero(acc.size(), kEdgeFeatDim);
  std::size_t r = 0;
  for (const auto& [edge, e] : acc) {
    level.edges.push_back(edge);
    auto row = level.edge_features.row(r++);
    row.segment<3>(0) = (e.abs_sum / e.count).transpose();
    const double m = e.len / e.count;
    row(3) = std::sqrt(std::max(0.0, e.len2 / e.count - m * m));
    row.segment<3>(4) = (level.sp_geom.row(edge.second).segment<3>(0) - level.sp_geom.row(edge.first).segment<3>(0))
                            .cwiseAbs();
  }
}

// Column z-scores, scaled so the mean squared row norm is at most 1.
RowMatrix standardize(const RowMatrix& x) {
  RowMatrix out = x;
  const double n = double(x.rows());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).sum() / n;
    const double var = (x.col(j).array() - mean).square().sum() / n;
    if (var <= 1e-24) out.col(j).setZero();
    else out.col(j) = (x.col(j).array() - mean) / std::sqrt(var);
  }
  return out / std::sqrt(double(x.cols()));
}

template <typename T>
T majority(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  T best = v.front();
  std::size_t best_n = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    if (j - i > best_n) best_n = j - i, best = v[i];
    i = j;
  }
  return best;
}

// Centers of a seeded spherical k-means (K = min(4, rows)) ordered by population, lower id first on ties.
std::vector<Eigen::RowVectorXd> populous_centers(const RowMatrix& rows, std::uint64_t seed) {
  const std::size_t k = std::min<std::size_t>(4, rows.rows());
  const auto km = spherical_kmeans(rows, k, seed);
  std::vector<std::size_t> pop(k, 0);
  for (int a : km.assignments) ++pop[a];
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return pop[a] > pop[b]; });
  std::vector<Eigen::RowVectorXd> out;
  for (auto i : idx)
    if (pop[i] > 0) out.push_back(km.centroids.row(i));
  return out;
}

void resize_targets(SuperpointLevel& level, std::size_t C) {
  level.t1 = RowMatrix::Zero(level.size, C);
  level.t2 = RowMatrix::Zero(level.size, C);
  level.t3 = RowMatrix::Zero(level.size, C);
  level.majority_class.assign(level.size, -1);
  level.majority_instance.assign(level.size, -1);
  level.is_thing.assign(level.size, 0);
  level.masked.assign(level.size, 1);
}

}  // namespace

std::vector<std::uint32_t> SuperpointHierarchy::point_assignment(std::size_t level) const {
  if (level >= levels.size()) throw ArgumentError("hierarchy level out of range");
  std::vector<std::uint32_t> a = levels[0].parent_of;
  for (std::size_t l = 1; l <= level; ++l)
    for (auto& v : a) v = levels[l].parent_of[v];
  return a;
}

RowMatrix point_features(const PointCloud& cloud, std::size_t k_nn, double spatial_weight) {
  const std::size_t n = cloud.size();
  RowMatrix x(n, 10);
  const auto knn = knn_lists(cloud.positions, std::min(k_nn, n ? n - 1 : 0));
  parallel_for(n, [&](std::size_t i) {
    std::vector<Eigen::Vector3d> pts{cloud.positions[i]};
    for (auto j : knn[i]) pts.push_back(cloud.positions[j]);
    const Shape sh = shape_of(pts);
    x.row(i) << cloud.colors[i].x(), cloud.colors[i].y(), cloud.colors[i].z(), sh.linearity, sh.planarity,
        sh.scattering, sh.verticality, spatial_weight * cloud.positions[i].x(),
        spatial_weight * cloud.positions[i].y(), spatial_weight * cloud.positions[i].z();
  });
  return x;
}

SuperpointHierarchy build_hierarchy(const PointCloud& cloud, const PseudoLabelSet& labels, const FeatureField& field,
                                    const HierarchyConfig& config) {
  cloud.validate();
  if (config.levels < 1) throw ArgumentError("hierarchy needs at least one level");
  if (config.lambda.size() < std::size_t(config.levels)) throw ArgumentError("one lambda per hierarchy level required");
  if (field.size() != cloud.size() || labels.z_pc.size() != cloud.size())
    throw ArgumentError("field and labels must cover every point");

  SuperpointHierarchy h;
  h.n_points = cloud.size();
  h.dim = field.dim;
  h.seed = config.seed;
  h.k_nn = config.k_nn;

  const Graph point_graph = build_adjacency(cloud.positions, config.k_nn);
  {
    const RowMatrix x = point_features(cloud, config.k_nn, config.spatial_weight);
    auto part = partition_level(point_graph, x, config.lambda[0]);
    SuperpointLevel level;
    level.parent_of = std::move(part.component);
    level.size = part.n_components;
    level.lambda = config.lambda[0];
    fill_geometry(level, level.parent_of, cloud, point_graph);
    h.levels.push_back(std::move(level));
  }
  for (int l = 1; l < config.levels; ++l) {
    const auto& prev = h.levels.back();
    if (prev.size <= 1) break;
    const Graph g = make_graph(prev.size, prev.edges);
    auto part = partition_level(g, standardize(prev.sp_geom), config.lambda[l]);
    if (part.n_components >= prev.size) break;  // no coarsening
    SuperpointLevel level;
    level.parent_of = std::move(part.component);
    level.size = part.n_components;
    level.lambda = config.lambda[l];
    h.levels.push_back(std::move(level));
    fill_geometry(h.levels.back(), h.point_assignment(h.levels.size() - 1), cloud, point_graph);
  }
  propagate_targets(h, field, labels);
  return h;
}

void propagate_targets(SuperpointHierarchy& h, const FeatureField& field, const PseudoLabelSet& labels) {
  if (h.levels.empty()) throw ArgumentError("hierarchy has no levels");
  const std::size_t C = field.dim;
  h.dim = C;
  {
    auto& level = h.levels[0];
    resize_targets(level, C);
    std::vector<std::uint32_t> offs, order;
    group(level.parent_of, level.size, offs, order);
    parallel_for(level.size, [&](std::size_t s) {
      std::vector<std::uint32_t> pts;
      for (auto k = offs[s]; k < offs[s + 1]; ++k) {
        const auto p = order[k];
        if (field.defined(p) && labels.z_pc[p] >= 0) pts.push_back(p);
      }
      if (pts.empty()) return;
      RowMatrix rows(pts.size(), C);
      std::vector<int> cls, inst;
      for (std::size_t k = 0; k < pts.size(); ++k) {
        rows.row(k) = field.features.row(pts[k]);
        cls.push_back(labels.z_pc[pts[k]]);
        inst.push_back(labels.z_pi[pts[k]]);
      }
      const auto centers = populous_centers(rows, mix_seed(h.seed, s));
      level.t1.row(s) = centers[0];
      level.t2.row(s) = centers.size() > 1 ? centers[1] : centers[0];
      const int c = majority(cls);
      level.t3.row(s) = labels.class_repr.row(c);
      level.majority_class[s] = c;
      level.majority_instance[s] = majority(inst);
      level.is_thing[s] = labels.is_thing[c];
      level.masked[s] = 0;
    });
  }
  for (std::size_t l = 1; l < h.levels.size(); ++l) {
    const auto& child = h.levels[l - 1];
    auto& level = h.levels[l];
    resize_targets(level, C);
    std::vector<std::uint32_t> offs, order;
    group(level.parent_of, level.size, offs, order);
    parallel_for(level.size, [&](std::size_t s) {
      std::vector<std::uint32_t> kids;
      for (auto k = offs[s]; k < offs[s + 1]; ++k)
        if (!child.masked[order[k]]) kids.push_back(order[k]);
      if (kids.empty()) return;
      RowMatrix r1(kids.size(), C), r2(kids.size(), C);
      std::vector<int> cls, inst;
      for (std::size_t k = 0; k < kids.size(); ++k) {
        r1.row(k) = child.t1.row(kids[k]);
        r2.row(k) = child.t2.row(kids[k]);
        cls.push_back(child.majority_class[kids[k]]);
        inst.push_back(child.majority_instance[kids[k]]);
      }
      const std::uint64_t seed = mix_seed(mix_seed(h.seed, l), s);
      level.t1.row(s) = populous_centers(r1, seed)[0];
      level.t2.row(s) = populous_centers(r2, mix_seed(seed, 2))[0];
      const int c = majority(cls);
      level.t3.row(s) = labels.class_repr.row(c);
      level.majority_class[s] = c;
      level.majority_instance[s] = majority(inst);
      level.is_thing[s] = labels.is_thing[c];
      level.masked[s] = 0;
    });
  }
}

// ---------------------------------------------------------------------------

namespace {

void put_matrix_f32(io::ByteWriter& w, const RowMatrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.put(static_cast<float>(m(i, j)));
}

RowMatrix get_matrix_f32(io::ByteReader& r, std::size_t rows, std::size_t cols) {
  RowMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = r.get<float>();
  return m;
}

std::string level_file(std::size_t l) { return "level" + std::to_string(l + 1) + ".bin"; }

}  // namespace

void save_hierarchy(const std::filesystem::path& dir, const SuperpointHierarchy& h) {
  nlohmann::ordered_json j;
  j["format"] = "haec-superpoints";
  j["version"] = 1;
  j["n_points"] = h.n_points;
  j["dim"] = h.dim;
  j["seed"] = h.seed;
  j["k_nn"] = h.k_nn;
  j["levels"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < h.levels.size(); ++l) {
    const auto& lv = h.levels[l];
    io::ByteWriter w;
    w.put_bytes("HSP1");
    w.put<std::uint32_t>(lv.parent_of.size());
    w.put<std::uint32_t>(lv.size);
    w.put<std::uint32_t>(lv.edges.size());
    w.put<std::uint32_t>(h.dim);
    w.put_span<std::uint32_t>(lv.parent_of);
    for (const auto& [a, b] : lv.edges) w.put(a), w.put(b);
    put_matrix_f32(w, lv.edge_features);
    put_matrix_f32(w, lv.sp_geom);
    w.put_span<std::uint32_t>(lv.point_count);
    put_matrix_f32(w, lv.t1);
    put_matrix_f32(w, lv.t2);
    put_matrix_f32(w, lv.t3);
    for (std::size_t s = 0; s < lv.size; ++s) {
      w.put<std::int32_t>(lv.majority_class[s]);
      w.put<std::int32_t>(lv.majority_instance[s]);
      w.put<std::uint8_t>(lv.is_thing[s]);
      w.put<std::uint8_t>(lv.masked[s]);
    }
    io::write_file(dir / level_file(l), w.bytes());
    nlohmann::ordered_json lj;
    lj["file"] = level_file(l);
    lj["size"] = lv.size;
    lj["children"] = lv.parent_of.size();
    lj["edges"] = lv.edges.size();
    lj["lambda"] = lv.lambda;
    j["levels"].push_back(lj);
  }
  io::write_file(dir / "manifest.json", j.dump(2) + "\n");
}

SuperpointHierarchy load_hierarchy(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.json";
  if (!std::filesystem::exists(manifest))
    throw PrerequisiteError("no superpoint hierarchy at " + dir.string() + " (run the partition stage)");
  const auto bytes = io::read_file(manifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("hierarchy manifest: ") + e.what(), e.byte);
  }
  SuperpointHierarchy h;
  h.n_points = j.at("n_points").get<std::size_t>();
  h.dim = j.at("dim").get<std::size_t>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.k_nn = j.at("k_nn").get<std::size_t>();
  for (const auto& lj : j.at("levels")) {
    const auto data = io::read_file(dir / lj.at("file").get<std::string>());
    io::ByteReader r(data);
    r.expect_magic("HSP1");
    SuperpointLevel lv;
    const auto children = r.get<std::uint32_t>();
    lv.size = r.get<std::uint32_t>();
    const auto n_edges = r.get<std::uint32_t>();
    const auto C = r.get<std::uint32_t>();
    if (C != h.dim) throw ParseError("hierarchy level dimension mismatch", 16);
    lv.parent_of.resize(children);
    r.get_into<std::uint32_t>(lv.parent_of);
    for (std::uint32_t e = 0; e < n_edges; ++e) {
      const auto a = r.get<std::uint32_t>();
      const auto b = r.get<std::uint32_t>();
      lv.edges.emplace_back(a, b);
    }
    lv.edge_features = get_matrix_f32(r, n_edges, kEdgeFeatDim);
    lv.sp_geom = get_matrix_f32(r, lv.size, kGeomDim);
    lv.point_count.resize(lv.size);
    r.get_into<std::uint32_t>(lv.point_count);
    lv.t1 = get_matrix_f32(r, lv.size, C);
    lv.t2 = get_matrix_f32(r, lv.size, C);
    lv.t3 = get_matrix_f32(r, lv.size, C);
    for (std::size_t s = 0; s < lv.size; ++s) {
      lv.majority_class.push_back(r.get<std::int32_t>());
      lv.majority_instance.push_back(r.get<std::int32_t>());
      lv.is_thing.push_back(r.get<std::uint8_t>());
      lv.masked.push_back(r.get<std::uint8_t>());
    }
    for (auto p : lv.parent_of)
      if (p >= lv.size) throw ParseError("parent index out of range", 20);
    lv.lambda = lj.at("lambda").get<double>();
    h.levels.push_back(std::move(lv));
  }
  if (h.levels.empty() || h.levels[0].parent_of.size() != h.n_points)
    throw ParseError("hierarchy does not cover the cloud", 0);
  return h;
}

}  // namespace haec

#pragma once

// Undirected graphs, driver-node maps and graph-derived quantities used by
// the controlled dynamics.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <queue>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nodec/autodiff.hpp"
#include "nodec/random.hpp"

namespace nodec::graph {

class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LatticeDims {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Simple undirected graph with 0/1 adjacency. Edges are stored as sorted
/// (i < j) pairs; neighbor lists are sorted by node index.
class Graph {
 public:
  Graph() = default;

  Graph(std::size_t n, std::vector<Edge> edges, std::optional<LatticeDims> lattice = std::nullopt)
      : n_(n), lattice_(lattice) {
    for (auto& [i, j] : edges) {
      if (i >= n || j >= n) throw GraphError("edge (" + std::to_string(i) + "," + std::to_string(j) + ") out of range");
      if (i == j) throw GraphError("self-loop at node " + std::to_string(i));
      if (i > j) std::swap(i, j);
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    edges_ = std::move(edges);
    adj_.assign(n, {});
    for (auto [i, j] : edges_) {
      adj_[i].push_back(j);
      adj_[j].push_back(i);
    }
    for (auto& nb : adj_) std::sort(nb.begin(), nb.end());
  }

  std::size_t size() const { return n_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::span<const std::size_t> neighbors(std::size_t i) const { return adj_.at(i); }
  std::size_t degree(std::size_t i) const { return adj_.at(i).size(); }
  const std::optional<LatticeDims>& lattice() const { return lattice_; }

  std::size_t max_degree() const {
    std::size_t d = 0;
    for (const auto& nb : adj_) d = std::max(d, nb.size());
    return d;
  }
  double mean_degree() const { return n_ ? 2.0 * static_cast<double>(edges_.size()) / static_cast<double>(n_) : 0.0; }

  bool has_edge(std::size_t i, std::size_t j) const {
    const auto& nb = adj_.at(i);
    return std::binary_search(nb.begin(), nb.end(), j);
  }

  Eigen::MatrixXd adjacency() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_));
    for (auto [i, j] : edges_) {
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
      a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = 1.0;
    }
    return a;
  }

  /// L = D - A.
  Eigen::MatrixXd laplacian() const {
    Eigen::MatrixXd l = -adjacency();
    for (std::size_t i = 0; i < n_; ++i) l(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = static_cast<double>(degree(i));
    return l;
  }

  /// Adjacency as a constant sparse operator for the autodiff tape.
  std::shared_ptr<const ad::SparseMatrix> adjacency_operator() const {
    auto s = std::make_shared<ad::SparseMatrix>();
    s->rows = s->cols = n_;
    s->row_ptr.assign(1, 0);
    for (std::size_t i = 0; i < n_; ++i) {
      for (auto j : adj_[i]) {
        s->col_idx.push_back(j);
        s->values.push_back(1.0);
      }
      s->row_ptr.push_back(s->col_idx.size());
    }
    return s;
  }

 private:
  std::size_t n_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::size_t>> adj_;
  std::optional<LatticeDims> lattice_;
};

/// Ordered driver nodes. Control input m acts on node `nodes()[m]` only, so
/// the implied N x M matrix B has one non-zero per column and at most one
/// per row.
class DriverMap {
 public:
  DriverMap() = default;

  DriverMap(std::size_t node_count, std::vector<std::size_t> nodes, std::vector<double> gains = {})
      : n_(node_count), nodes_(std::move(nodes)), gains_(std::move(gains)) {
    if (nodes_.size() > n_) throw GraphError("more drivers than nodes");
    std::vector<bool> seen(n_, false);
    for (auto i : nodes_) {
      if (i >= n_) throw GraphError("driver node " + std::to_string(i) + " out of range");
      if (seen[i]) throw GraphError("duplicate driver node " + std::to_string(i));
      seen[i] = true;
    }
    if (!gains_.empty() && gains_.size() != nodes_.size()) throw GraphError("gain count differs from driver count");
    auto idx = std::vector<std::ptrdiff_t>(nodes_.size());
    for (std::size_t m = 0; m < nodes_.size(); ++m) idx[m] = static_cast<std::ptrdiff_t>(nodes_[m]);
    scatter_ = ad::make_index(std::move(idx));
  }

  std::size_t node_count() const { return n_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::vector<std::size_t>& nodes() const { return nodes_; }
  const std::vector<double>& gains() const { return gains_; }
  bool has_gains() const { return !gains_.empty(); }

  /// Flat index mapping control slot m to its node (for scatter_add / gather).
  const ad::Index& index() const { return scatter_; }

  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(nodes_.size()));
    for (std::size_t m = 0; m < nodes_.size(); ++m) b(static_cast<Eigen::Index>(nodes_[m]), static_cast<Eigen::Index>(m)) = 1.0;
    return b;
  }

  std::optional<std::size_t> slot_of(std::size_t node) const {
    auto it = std::find(nodes_.begin(), nodes_.end(), node);
    if (it == nodes_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - nodes_.begin());
  }

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> nodes_;
  std::vector<double> gains_;
  ad::Index scatter_ = ad::make_index({});
};

// ---------------------------------------------------------------------------
// Constructors

/// G(n, p): each unordered pair is included independently with probability p.
inline Graph erdos_renyi(std::size_t n, double p, std::uint64_t seed) {
  if (n == 0) throw GraphError("erdos_renyi: n must be positive");
  if (!(p >= 0.0 && p <= 1.0)) throw GraphError("erdos_renyi: p must lie in [0, 1]");
  Rng rng(seed);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.uniform() < p) edges.emplace_back(i, j);
  return Graph(n, std::move(edges));
}

/// 4-neighbour grid without wraparound; node (r, c) has index r * cols + c.
inline Graph lattice2d(std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw GraphError("lattice2d: rows and cols must be positive");
  std::vector<Edge> edges;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (c + 1 < cols) edges.emplace_back(i, i + 1);
      if (r + 1 < rows) edges.emplace_back(i, i + cols);
    }
  return Graph(rows * cols, std::move(edges), LatticeDims{rows, cols});
}

enum class Quadrant { upper_left, upper_right, lower_left, lower_right };

/// Nodes of a lattice quadrant (row 0 is the top row), ascending.
inline std::vector<std::size_t> quadrant_nodes(const Graph& g, Quadrant q) {
  if (!g.lattice()) throw GraphError("quadrant_nodes: graph is not a lattice");
  const auto [rows, cols] = *g.lattice();
  const bool upper = q == Quadrant::upper_left || q == Quadrant::upper_right;
  const bool left = q == Quadrant::upper_left || q == Quadrant::lower_left;
  const std::size_t r0 = upper ? 0 : rows / 2, r1 = upper ? rows / 2 : rows;
  const std::size_t c0 = left ? 0 : cols / 2, c1 = left ? cols / 2 : cols;
  std::vector<std::size_t> out;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) out.push_back(r * cols + c);
  return out;
}

// ---------------------------------------------------------------------------
// Spectral quantities

/// Moore-Penrose pseudo-inverse of the graph Laplacian. Eigenvalues at or
/// below 1e-9 * lambda_max are treated as zero modes.
inline Eigen::MatrixXd laplacian_pinv(const Graph& g) {
  if (g.size() == 0) throw GraphError("laplacian_pinv: empty graph");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.laplacian());
  const Eigen::VectorXd& lam = es.eigenvalues();
  const double lmax = lam.cwiseAbs().maxCoeff();
  const double tol = 1e-9 * lmax;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(lam.size());
  for (Eigen::Index k = 0; k < lam.size(); ++k)
    if (std::abs(lam(k)) > tol) inv(k) = 1.0 / lam(k);
  const Eigen::MatrixXd& v = es.eigenvectors();
  return v * inv.asDiagonal() * v.transpose();
}

/// Synchronized steady state K^{-1} L^+ omega (in the co-rotating frame).
inline std::vector<double> steady_state(const Graph& g, double coupling, std::span<const double> omega) {
  if (coupling == 0.0) throw GraphError("steady_state: coupling must be non-zero");
  if (omega.size() != g.size()) throw GraphError("steady_state: frequency vector length differs from node count");
  const Eigen::MatrixXd pinv = laplacian_pinv(g);
  const Eigen::Map<const Eigen::VectorXd> w(omega.data(), static_cast<Eigen::Index>(omega.size()));
  const Eigen::VectorXd x = pinv * w / coupling;
  return {x.data(), x.data() + x.size()};
}

/// Feedback-control gains taken at equality of the stability bound:
///   b_i = sum_{j in N(i)} |K A_ij cos(x_i - x_j) - eps| - (K A_ij cos(x_j - x_i) - eps).
/// Only actual neighbours contribute. Nodes with |b_i| > 1e-12 become drivers,
/// in ascending order, carrying their gains.
inline DriverMap kuramoto_gains(const Graph& g, double coupling, std::span<const double> steady, double margin) {
  if (margin < 0.0) throw GraphError("kuramoto_gains: margin must be non-negative");
  if (steady.size() != g.size()) throw GraphError("kuramoto_gains: state length differs from node count");
  std::vector<std::size_t> nodes;
  std::vector<double> gains;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double b = 0.0;
    for (auto j : g.neighbors(i)) {
      const double lhs = coupling * std::cos(steady[i] - steady[j]) - margin;
      const double rhs = coupling * std::cos(steady[j] - steady[i]) - margin;
      b += std::abs(lhs) - rhs;
    }
    if (std::abs(b) > 1e-12) {
      nodes.push_back(i);
      gains.push_back(b);
    }
  }
  return DriverMap(g.size(), std::move(nodes), std::move(gains));
}

// ---------------------------------------------------------------------------
// Matching-based driver selection

struct Matching {
  std::size_t size = 0;
  std::vector<std::ptrdiff_t> left;   // left vertex -> matched right vertex or -1
  std::vector<std::ptrdiff_t> right;  // right vertex -> matched left vertex or -1
};

/// Hopcroft-Karp maximum matching on a bipartite graph given by the
/// adjacency lists of its left vertices.
inline Matching hopcroft_karp(std::size_t n_left, std::size_t n_right, const std::vector<std::vector<std::size_t>>& adj) {
  constexpr std::size_t inf = std::numeric_limits<std::size_t>::max();
  Matching m;
  m.left.assign(n_left, -1);
  m.right.assign(n_right, -1);
  std::vector<std::size_t> dist(n_left);

  auto bfs = [&] {
    std::queue<std::size_t> q;
    bool found = false;
    for (std::size_t u = 0; u < n_left; ++u) {
      if (m.left[u] < 0) {
        dist[u] = 0;
        q.push(u);
      } else {
        dist[u] = inf;
      }
    }
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (auto v : adj[u]) {
        const auto w = m.right[v];
        if (w < 0) {
          found = true;
        } else if (dist[static_cast<std::size_t>(w)] == inf) {
          dist[static_cast<std::size_t>(w)] = dist[u] + 1;
          q.push(static_cast<std::size_t>(w));
        }
      }
    }
    return found;
  };

  // Iterative DFS along the BFS layering.
  std::vector<std::size_t> it(n_left);
  auto dfs = [&](std::size_t root) {
    std::vector<std::size_t> stack{root};
    std::vector<std::size_t> via;  // right vertex used to descend from stack[k]
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      bool advanced = false;
      while (it[u] < adj[u].size()) {
        const std::size_t v = adj[u][it[u]++];
        const auto w = m.right[v];
        if (w < 0) {
          // Augment along the stack.
          via.push_back(v);
          for (std::size_t k = 0; k < stack.size(); ++k) {
            m.left[stack[k]] = static_cast<std::ptrdiff_t>(via[k]);
            m.right[via[k]] = static_cast<std::ptrdiff_t>(stack[k]);
          }
          return true;
        }
        if (dist[static_cast<std::size_t>(w)] == dist[u] + 1) {
          via.push_back(v);
          stack.push_back(static_cast<std::size_t>(w));
          advanced = true;
          break;
        }
      }
      if (!advanced) {
        dist[u] = inf;
        stack.pop_back();
        if (!via.empty()) via.pop_back();
      }
    }
    return false;
  };

  while (bfs()) {
    std::fill(it.begin(), it.end(), 0);
    for (std::size_t u = 0; u < n_left; ++u)
      if (m.left[u] < 0 && dfs(u)) ++m.size;
  }
  return m;
}

/// Arcs of the node-split bipartite representation: out-copy i -> in-copy j
/// for every arc i -> j. Undirected edges contribute both directions.
inline std::vector<std::vector<std::size_t>> split_arcs(const Graph& g) {
  std::vector<std::vector<std::size_t>> adj(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) adj[i].assign(g.neighbors(i).begin(), g.neighbors(i).end());
  return adj;
}

inline DriverMap drivers_from_arcs(std::size_t n, std::vector<std::vector<std::size_t>> arcs, std::uint64_t seed) {
  if (seed != 0) {
    Rng rng(seed);
    for (auto& a : arcs)
      for (std::size_t k = a.size(); k > 1; --k) std::swap(a[k - 1], a[rng.below(k)]);
  }
  const Matching m = hopcroft_karp(n, n, arcs);
  std::vector<std::size_t> drivers;
  for (std::size_t v = 0; v < n; ++v)
    if (m.right[v] < 0) drivers.push_back(v);
  if (drivers.empty() && n > 0) drivers.push_back(0);
  return DriverMap(n, std::move(drivers));
}

/// Minimum driver set from a maximum matching of the node-split graph:
/// in-copies left unmatched are drivers. A perfect matching yields the single
/// driver 0. seed == 0 scans neighbours in index order; other seeds shuffle
/// the scan order and may pick a different matching of the same size.
inline DriverMap max_matching_drivers(const Graph& g, std::uint64_t seed = 0) {
  return drivers_from_arcs(g.size(), split_arcs(g), seed);
}

/// Like max_matching_drivers, but each undirected edge is first given a single
/// random direction (seeded), so the graph is read as a directed network.
inline DriverMap oriented_matching_drivers(const Graph& g, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> arcs(g.size());
  for (auto [i, j] : g.edges()) {
    if (rng.uniform() < 0.5)
      arcs[i].push_back(j);
    else
      arcs[j].push_back(i);
  }
  return drivers_from_arcs(g.size(), std::move(arcs), 0);
}

// ---------------------------------------------------------------------------
// Edge-list text format: "# nodes=N" header, then one "i j" line per edge
// (0-based, i < j, sorted).

inline void write_edge_list(std::ostream& os, const Graph& g) {
  os << "# nodes=" << g.size() << '\n';
  for (auto [i, j] : g.edges()) os << i << ' ' << j << '\n';
}

inline Graph read_edge_list(std::istream& is) {
  std::string line;
  std::optional<std::size_t> n;
  std::vector<Edge> edges;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("nodes=");
      if (pos != std::string::npos) n = std::stoull(line.substr(pos + 6));
      continue;
    }
    std::istringstream ls(line);
    std::size_t i = 0, j = 0;
    if (!(ls >> i >> j)) throw GraphError("edge list line " + std::to_string(lineno) + ": expected 'i j'");
    edges.emplace_back(i, j);
  }
  if (!n) throw GraphError("edge list: missing '# nodes=N' header");
  return Graph(*n, std::move(edges));
}

}  // namespace nodec::graph

#pragma once

// Exhaustive maximum bipartite matching for small graphs.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "nodec/graph.hpp"

namespace oracle {

/// Maximum matching size by memoized search over the used right vertices.
inline std::size_t max_matching(std::size_t n_left, std::size_t n_right, const std::vector<std::vector<std::size_t>>& adj) {
  std::vector<std::vector<int>> memo(n_left + 1, std::vector<int>(std::size_t{1} << n_right, -1));
  auto go = [&](auto&& self, std::size_t i, std::uint32_t used) -> int {
    if (i == n_left) return 0;
    int& m = memo[i][used];
    if (m >= 0) return m;
    int best = self(self, i + 1, used);
    for (auto v : adj[i])
      if (!(used >> v & 1u)) best = std::max(best, 1 + self(self, i + 1, used | (1u << v)));
    return m = best;
  };
  return static_cast<std::size_t>(go(go, 0, 0));
}

/// Graph on n nodes whose edges are the set bits of `mask` over pairs (i < j).
inline nodec::graph::Graph from_mask(std::size_t n, std::uint64_t mask) {
  std::vector<nodec::graph::Edge> edges;
  std::size_t bit = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++bit)
      if (mask >> bit & 1u) edges.emplace_back(i, j);
  return nodec::graph::Graph(n, std::move(edges));
}

}  // namespace oracle

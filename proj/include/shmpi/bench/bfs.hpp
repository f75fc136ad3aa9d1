#pragma once

// Level-synchronous BFS over a replicated seeded random graph. Vertices are
// block-distributed; each level ships (vertex, parent) candidates to the
// vertex owner with a by-reference alltoallv.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <vector>

#include "shmpi/bench/common.hpp"

namespace shmpi::bench {

inline constexpr std::int64_t kNoParent = -1;

/// Undirected graph in CSR form with sorted adjacency lists.
struct Graph {
  std::uint64_t n = 0;
  std::vector<std::uint64_t> row;  // n + 1
  std::vector<std::uint32_t> adj;

  std::span<const std::uint32_t> neighbors(std::uint64_t v) const {
    return {adj.data() + row[v], adj.data() + row[v + 1]};
  }
  std::uint64_t degree(std::uint64_t v) const { return row[v + 1] - row[v]; }
  bool has_edge(std::uint64_t u, std::uint64_t v) const {
    auto nb = neighbors(u);
    return std::binary_search(nb.begin(), nb.end(), static_cast<std::uint32_t>(v));
  }
};

inline Graph build_graph(std::uint64_t n, const std::vector<std::pair<std::uint64_t, std::uint64_t>>& edges) {
  Graph g;
  g.n = n;
  g.row.assign(n + 1, 0);
  for (auto [u, v] : edges) {
    if (u >= n || v >= n) raise(Errc::InvalidConfig, "edge endpoint out of range");
    if (u == v) continue;
    ++g.row[u + 1];
    ++g.row[v + 1];
  }
  for (std::uint64_t i = 0; i < n; ++i) g.row[i + 1] += g.row[i];
  g.adj.resize(g.row[n]);
  std::vector<std::uint64_t> fill(g.row.begin(), g.row.end() - 1);
  for (auto [u, v] : edges) {
    if (u == v) continue;
    g.adj[fill[u]++] = static_cast<std::uint32_t>(v);
    g.adj[fill[v]++] = static_cast<std::uint32_t>(u);
  }
  for (std::uint64_t i = 0; i < n; ++i) std::sort(g.adj.begin() + g.row[i], g.adj.begin() + g.row[i + 1]);
  return g;
}

/// Seeded uniform random edges, edgefactor * 2^scale of them.
inline Graph generate_graph(const WorkloadSpec& s) {
  if (!s.edges.empty()) return build_graph(s.n_vertices, s.edges);
  if (s.scale < 1 || s.scale > 26) raise(Errc::InvalidConfig, "bfs scale must be in [1, 26]");
  const std::uint64_t n = std::uint64_t{1} << s.scale;
  const std::uint64_t m = n * static_cast<std::uint64_t>(s.edgefactor);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges(m);
  for (std::uint64_t i = 0; i < m; ++i) edges[i] = {hash2(s.seed, 2 * i) % n, hash2(s.seed, 2 * i + 1) % n};
  return build_graph(n, edges);
}

inline std::uint64_t bfs_root(const WorkloadSpec& s, const Graph& g) {
  if (s.root >= 0) {
    if (static_cast<std::uint64_t>(s.root) >= g.n) raise(Errc::InvalidConfig, "bfs root out of range");
    return static_cast<std::uint64_t>(s.root);
  }
  for (std::uint64_t k = 0; k < 64; ++k) {
    const std::uint64_t v = hash2(s.seed ^ 0x5EED, k) % g.n;
    if (g.degree(v) > 0) return v;
  }
  return 0;
}

struct SerialBfs {
  std::vector<std::int64_t> parent;
  std::vector<std::int64_t> level;  // -1 when unreachable
  std::uint64_t visited = 0;
};

/// Single-process reference BFS.
inline SerialBfs serial_bfs(const Graph& g, std::uint64_t root) {
  SerialBfs r;
  r.parent.assign(g.n, kNoParent);
  r.level.assign(g.n, -1);
  std::deque<std::uint64_t> q{root};
  r.parent[root] = static_cast<std::int64_t>(root);
  r.level[root] = 0;
  while (!q.empty()) {
    const auto u = q.front();
    q.pop_front();
    ++r.visited;
    for (auto w : g.neighbors(u)) {
      if (r.parent[w] != kNoParent) continue;
      r.parent[w] = static_cast<std::int64_t>(u);
      r.level[w] = r.level[u] + 1;
      q.push_back(w);
    }
  }
  return r;
}

/// Checks a parent array slice [b.begin, b.end) against reference levels.
/// Returns an empty string when valid.
inline std::string check_parents(const Graph& g, std::uint64_t root, const SerialBfs& ref, Block b,
                                 std::span<const std::int64_t> parent) {
  for (std::uint64_t v = b.begin; v < b.end; ++v) {
    const auto p = parent[v - b.begin];
    const auto lv = ref.level[v];
    const std::string at = "vertex " + std::to_string(v);
    if (lv < 0) {
      if (p != kNoParent) return at + " is unreachable but has a parent";
      continue;
    }
    if (p == kNoParent) return at + " is reachable but was not visited";
    if (v == root) {
      if (p != static_cast<std::int64_t>(root)) return "root is not its own parent";
      continue;
    }
    if (p < 0 || static_cast<std::uint64_t>(p) >= g.n) return at + " has an out-of-range parent";
    if (!g.has_edge(static_cast<std::uint64_t>(p), v)) return at + ": parent edge missing from graph";
    if (ref.level[static_cast<std::uint64_t>(p)] != lv - 1) return at + ": parent level is not one less";
  }
  return {};
}

inline int owner_of(std::uint64_t v, std::uint64_t n, int p) {
  const std::uint64_t per = (n + static_cast<std::uint64_t>(p) - 1) / static_cast<std::uint64_t>(p);
  return static_cast<int>(v / per);
}

inline RankOutcome run_bfs_rank(Communicator& comm, const WorkloadSpec& spec) {
  const Graph g = generate_graph(spec);
  const std::uint64_t root = bfs_root(spec, g);
  const int p = comm.size();
  const int me = comm.rank();
  const Block mine = block_of(g.n, p, me);
  std::vector<std::int64_t> parent(mine.size(), kNoParent);

  RankOutcome out;
  timed_phase(comm, out, [&] {
    std::vector<std::uint64_t> frontier;
    if (owner_of(root, g.n, p) == me) {
      parent[root - mine.begin] = static_cast<std::int64_t>(root);
      frontier.push_back(root);
    }
    std::vector<std::size_t> counts(static_cast<std::size_t>(p)), displs(static_cast<std::size_t>(p));
    std::vector<std::uint64_t> next;
    for (;;) {
      std::fill(counts.begin(), counts.end(), 0);
      for (auto u : frontier)
        for (auto w : g.neighbors(u)) ++counts[static_cast<std::size_t>(owner_of(w, g.n, p))];
      std::size_t total = 0;
      for (int r = 0; r < p; ++r) {
        displs[static_cast<std::size_t>(r)] = total;
        total += counts[static_cast<std::size_t>(r)];
      }
      SharedBuf buf = comm.alloc(std::max<std::size_t>(total, 1) * 2 * sizeof(std::uint64_t));
      {
        auto pairs = buf.as<std::uint64_t>();
        std::vector<std::size_t> pos(displs);
        for (auto u : frontier)
          for (auto w : g.neighbors(u)) {
            auto& at = pos[static_cast<std::size_t>(owner_of(w, g.n, p))];
            pairs[2 * at] = w;
            pairs[2 * at + 1] = u;
            ++at;
          }
      }
      std::vector<std::size_t> bcounts(counts.size()), bdispls(displs.size());
      for (std::size_t r = 0; r < counts.size(); ++r) {
        bcounts[r] = counts[r] * 2 * sizeof(std::uint64_t);
        bdispls[r] = displs[r] * 2 * sizeof(std::uint64_t);
      }
      auto msgs = comm.alltoallv_ref(buf, bcounts, bdispls);
      buf.reset();

      next.clear();
      for (const auto& m : msgs) {
        auto bytes = m.bytes();
        const auto* pairs = reinterpret_cast<const std::uint64_t*>(bytes.data());
        for (std::size_t i = 0; i + 1 < bytes.size() / sizeof(std::uint64_t); i += 2) {
          auto& slot = parent[pairs[i] - mine.begin];
          if (slot != kNoParent) continue;
          slot = static_cast<std::int64_t>(pairs[i + 1]);
          next.push_back(pairs[i]);
        }
      }
      msgs.clear();
      frontier.swap(next);
      if (comm.allreduce<std::int64_t>(ReduceOp::Sum, static_cast<std::int64_t>(frontier.size())) == 0) break;
    }
  });

  const SerialBfs ref = serial_bfs(g, root);
  std::int64_t visited = 0;
  for (auto x : parent) visited += x != kNoParent;
  const auto total_visited = comm.allreduce<std::int64_t>(ReduceOp::Sum, visited);
  out.detail = check_parents(g, root, ref, mine, parent);
  if (out.detail.empty() && static_cast<std::uint64_t>(total_visited) != ref.visited)
    out.detail = "visited " + std::to_string(total_visited) + " vertices, reference visited " +
                 std::to_string(ref.visited);
  out.valid = out.detail.empty();
  agree_on_validity(comm, out);
  if (out.valid) out.detail = "visited " + std::to_string(total_visited) + " of " + std::to_string(g.n);

  Fnv1a h;
  h.add_values<std::int64_t>(parent);
  out.checksum = h.value();
  if (spec.report_output) out.output = parent;
  return out;
}

}  // namespace shmpi::bench

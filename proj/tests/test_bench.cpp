#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "shmpi/bench/bfs.hpp"
#include "shmpi/bench/heat2d.hpp"
#include "shmpi/bench/intsort.hpp"
#include "shmpi/bench/lbm.hpp"
#include "shmpi/bench/runner.hpp"

using namespace shmpi;
using namespace shmpi::bench;

namespace {

BenchResult run(const WorkloadSpec& s, int ranks, Backend b = Backend::PointerShared) {
  JobConfig job;
  job.n_ranks = ranks;
  job.backend = b;
  job.seg_size = std::size_t{128} << 20;
  job.timeout = std::chrono::seconds(300);
  return run_workload(s, job);
}

template <class T>
std::vector<T> gathered_output(const BenchResult& r) {
  std::vector<T> all;
  for (const auto& w : r.per_rank)
    for (const auto& v : w.at("output")) all.push_back(v.get<T>());
  return all;
}

// Union-find over the edge list: size of the root's component.
std::uint64_t component_size(std::uint64_t n, const std::vector<std::pair<std::uint64_t, std::uint64_t>>& edges,
                             std::uint64_t root) {
  std::vector<std::uint64_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  auto find = [&](std::uint64_t x) {
    while (p[x] != x) x = p[x] = p[p[x]];
    return x;
  };
  for (auto [a, b] : edges) p[find(a)] = find(b);
  std::uint64_t c = 0;
  for (std::uint64_t v = 0; v < n; ++v) c += find(v) == find(root);
  return c;
}

// Straightforward 2D diffusion with reflecting borders, written against a
// clamped index rather than the row kernel used by the workload.
std::vector<double> naive_heat(std::size_t w, std::size_t h, int steps, std::vector<double> u) {
  auto at = [&](const std::vector<double>& g, long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return g[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  std::vector<double> v(u.size());
  for (int t = 0; t < steps; ++t) {
    for (long y = 0; y < static_cast<long>(h); ++y)
      for (long x = 0; x < static_cast<long>(w); ++x) {
        const double c = at(u, y, x);
        const double lap = at(u, y - 1, x) + at(u, y + 1, x) + at(u, y, x - 1) + at(u, y, x + 1) - 4 * c;
        v[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = c + 0.2 * lap;
      }
    u.swap(v);
  }
  return u;
}

// D2Q9 BGK with push streaming on a periodic lattice.
std::vector<double> naive_lbm(std::size_t w, std::size_t h, int steps, std::vector<double> f) {
  const int ex[9] = {0, 1, 0, -1, 0, 1, -1, -1, 1};
  const int ey[9] = {0, 0, 1, 0, -1, 1, 1, -1, -1};
  const double wt[9] = {4.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36};
  std::vector<double> g(f.size());
  for (int t = 0; t < steps; ++t) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double* c = &f[(y * w + x) * 9];
        double rho = 0, ux = 0, uy = 0;
        for (int i = 0; i < 9; ++i) {
          rho += c[i];
          ux += ex[i] * c[i];
          uy += ey[i] * c[i];
        }
        ux /= rho;
        uy /= rho;
        for (int i = 0; i < 9; ++i) {
          const double eu = ex[i] * ux + ey[i] * uy;
          const double feq = wt[i] * rho * (1 + 3 * eu + 4.5 * eu * eu - 1.5 * (ux * ux + uy * uy));
          const double post = c[i] - (c[i] - feq) / 0.6;
          const std::size_t xd = (x + w + static_cast<std::size_t>(ex[i] + 1) - 1) % w;
          const std::size_t yd = (y + h + static_cast<std::size_t>(ey[i] + 1) - 1) % h;
          g[(yd * w + xd) * 9 + static_cast<std::size_t>(i)] = post;
        }
      }
    f.swap(g);
  }
  return f;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// --- BFS ---------------------------------------------------------------------

TEST(Bfs, PathGraphParents) {
  WorkloadSpec s;
  s.name = Workload::Bfs;
  s.n_vertices = 4;
  s.edges = {{0, 1}, {1, 2}, {2, 3}};
  s.root = 0;
  s.report_output = true;
  for (int p : {1, 2, 4}) {
    auto r = run(s, p);
    ASSERT_TRUE(r.valid) << r.detail;
    EXPECT_EQ(gathered_output<std::int64_t>(r), (std::vector<std::int64_t>{0, 0, 1, 2})) << p << " ranks";
  }
}

TEST(Bfs, UnreachableVertexHasNoParent) {
  WorkloadSpec s;
  s.name = Workload::Bfs;
  s.n_vertices = 6;
  s.edges = {{0, 1}, {1, 2}, {0, 2}, {3, 4}};
  s.root = 1;
  s.report_output = true;
  auto r = run(s, 2);
  ASSERT_TRUE(r.valid) << r.detail;
  auto parent = gathered_output<std::int64_t>(r);
  EXPECT_EQ(parent[1], 1);
  EXPECT_EQ(parent[0], 1);
  EXPECT_EQ(parent[2], 1);
  for (int v : {3, 4, 5}) EXPECT_EQ(parent[static_cast<std::size_t>(v)], kNoParent);
}

TEST(Bfs, GeneratedGraphVisitsRootComponent) {
  WorkloadSpec s;
  s.name = Workload::Bfs;
  s.scale = 10;
  s.edgefactor = 8;
  s.report_output = true;
  const Graph g = generate_graph(s);
  const auto root = bfs_root(s, g);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  for (std::uint64_t u = 0; u < g.n; ++u)
    for (auto v : g.neighbors(u)) edges.emplace_back(u, v);
  const auto expect = component_size(g.n, edges, root);
  auto r = run(s, 4);
  ASSERT_TRUE(r.valid) << r.detail;
  auto parent = gathered_output<std::int64_t>(r);
  ASSERT_EQ(parent.size(), g.n);
  std::uint64_t reached = 0;
  for (std::uint64_t v = 0; v < g.n; ++v) {
    if (parent[v] == kNoParent) continue;
    ++reached;
    if (v != root) EXPECT_TRUE(g.has_edge(static_cast<std::uint64_t>(parent[v]), v));
  }
  EXPECT_EQ(reached, expect);
  EXPECT_EQ(parent[root], static_cast<std::int64_t>(root));
}

TEST(Bfs, GraphGeneratorIsSymmetricAndLoopFree) {
  WorkloadSpec s;
  s.name = Workload::Bfs;
  s.scale = 8;
  s.edgefactor = 4;
  const Graph g = generate_graph(s);
  EXPECT_EQ(g.n, 256u);
  for (std::uint64_t u = 0; u < g.n; ++u)
    for (auto v : g.neighbors(u)) {
      EXPECT_NE(u, v);
      EXPECT_TRUE(g.has_edge(v, u));
    }
}

// --- intsort -----------------------------------------------------------------

TEST(IntSort, SmallExplicitInput) {
  WorkloadSpec s;
  s.name = Workload::IntSort;
  s.explicit_keys = {7, 1, 5, 3, 0, 2, 6, 4};
  s.max_key = 8;
  s.report_output = true;
  for (int p : {1, 2, 4}) {
    auto r = run(s, p);
    ASSERT_TRUE(r.valid) << r.detail;
    EXPECT_EQ(gathered_output<std::uint32_t>(r), (std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  }
}

TEST(IntSort, AllEqualKeys) {
  WorkloadSpec s;
  s.name = Workload::IntSort;
  s.explicit_keys.assign(64, 5);
  s.max_key = 16;
  s.report_output = true;
  auto r = run(s, 4);
  ASSERT_TRUE(r.valid) << r.detail;
  EXPECT_EQ(gathered_output<std::uint32_t>(r), std::vector<std::uint32_t>(64, 5));
}

TEST(IntSort, MillionKeysMatchStdSort) {
  WorkloadSpec s;
  s.name = Workload::IntSort;
  s.keys = std::uint64_t{1} << 20;
  s.report_output = true;
  std::vector<std::uint32_t> expect(s.keys);
  for (std::uint64_t i = 0; i < s.keys; ++i) expect[i] = key_at(s, i);
  std::sort(expect.begin(), expect.end());
  auto r = run(s, 4, Backend::CopyBaseline);
  ASSERT_TRUE(r.valid) << r.detail;
  EXPECT_EQ(gathered_output<std::uint32_t>(r), expect);
}

TEST(IntSort, IndivisibleKeyCountRejected) {
  WorkloadSpec s;
  s.name = Workload::IntSort;
  s.explicit_keys = {3, 2, 1};
  s.max_key = 4;
  EXPECT_THROW(run(s, 2), RankError);
}

// --- heat2d ------------------------------------------------------------------

TEST(Heat2d, UniformFieldIsFixedPoint) {
  WorkloadSpec s;
  s.name = Workload::Heat2d;
  s.width = 16;
  s.height = 16;
  s.steps = 25;
  s.heat_init = HeatInit::Uniform;
  s.report_output = true;
  auto r = run(s, 4);
  ASSERT_TRUE(r.valid) << r.detail;
  for (double v : gathered_output<double>(r)) EXPECT_EQ(v, 1.0);
}

TEST(Heat2d, HotCenterMatchesNaiveOracleAndConserves) {
  WorkloadSpec s;
  s.name = Workload::Heat2d;
  s.width = 64;
  s.height = 64;
  s.steps = 100;
  s.heat_init = HeatInit::HotCenter;
  s.report_output = true;
  std::vector<double> init(64 * 64, 0.0);
  init[32 * 64 + 32] = 1.0;
  const auto expect = naive_heat(64, 64, 100, init);
  for (int p : {1, 2, 4}) {
    for (auto b : {Backend::PointerShared, Backend::CopyBaseline}) {
      auto r = run(s, p, b);
      ASSERT_TRUE(r.valid) << r.detail;
      const auto got = gathered_output<double>(r);
      EXPECT_LE(max_abs_diff(got, expect), 1e-12);
      EXPECT_NEAR(std::accumulate(got.begin(), got.end(), 0.0), 1.0, 1e-12);
    }
  }
}

TEST(Heat2d, IndivisibleHeightRejected) {
  WorkloadSpec s;
  s.name = Workload::Heat2d;
  s.width = 8;
  s.height = 9;
  s.steps = 1;
  EXPECT_THROW(run(s, 2), RankError);
}

// --- lbm ---------------------------------------------------------------------

TEST(Lbm, RestEquilibriumIsStationary) {
  WorkloadSpec s;
  s.name = Workload::Lbm;
  s.width = 8;
  s.height = 8;
  s.steps = 20;
  s.lbm_init = LbmInit::Equilibrium;
  s.report_output = true;
  auto r = run(s, 2);
  ASSERT_TRUE(r.valid) << r.detail;
  const double wt[9] = {4.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36};
  auto f = gathered_output<double>(r);
  ASSERT_EQ(f.size(), 8u * 8 * 9);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], wt[i % 9], 1e-15);
}

TEST(Lbm, PerturbedMatchesNaivePushOracle) {
  WorkloadSpec s;
  s.name = Workload::Lbm;
  s.width = 32;
  s.height = 32;
  s.steps = 50;
  s.report_output = true;
  std::vector<double> init(32 * 32 * 9);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) lbm_initial(s, y, x, &init[(y * 32 + x) * 9]);
  const auto expect = naive_lbm(32, 32, 50, init);
  for (int p : {1, 2, 4}) {
    for (auto b : {Backend::PointerShared, Backend::CopyBaseline}) {
      auto r = run(s, p, b);
      ASSERT_TRUE(r.valid) << r.detail;
      EXPECT_LE(max_abs_diff(gathered_output<double>(r), expect), 1e-12) << p << " ranks";
    }
  }
}

TEST(Lbm, MassConservedOverLongRun) {
  WorkloadSpec s;
  s.name = Workload::Lbm;
  s.width = 16;
  s.height = 16;
  s.steps = 1000;
  s.report_output = true;
  std::vector<double> init(16 * 16 * 9);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) lbm_initial(s, y, x, &init[(y * 16 + x) * 9]);
  const double m0 = std::accumulate(init.begin(), init.end(), 0.0);
  auto r = run(s, 4);
  ASSERT_TRUE(r.valid) << r.detail;
  const auto f = gathered_output<double>(r);
  const double m1 = std::accumulate(f.begin(), f.end(), 0.0);
  EXPECT_LE(std::abs(m1 - m0) / m0, 1e-10);
}

// --- runner ------------------------------------------------------------------

TEST(Runner, SameSeedSameChecksumOnBothBackends) {
  for (auto w : {Workload::Bfs, Workload::IntSort, Workload::Heat2d, Workload::Lbm}) {
    WorkloadSpec s;
    s.name = w;
    s.scale = 9;
    s.keys = 1 << 14;
    s.width = s.height = 32;
    s.steps = 10;
    auto a = run(s, 2);
    auto b = run(s, 2);
    auto c = run(s, 2, Backend::CopyBaseline);
    ASSERT_TRUE(a.valid && b.valid && c.valid) << to_string(w);
    EXPECT_EQ(a.checksum, b.checksum) << to_string(w);
    EXPECT_EQ(a.checksum, c.checksum) << to_string(w);
    s.seed = 2;
    if (w != Workload::Heat2d || s.heat_init == HeatInit::Seeded) {
      auto d = run(s, 2);
      EXPECT_NE(a.checksum, d.checksum) << to_string(w);
    }
  }
}

TEST(Runner, SpecJsonRoundTrip) {
  WorkloadSpec s;
  s.name = Workload::Bfs;
  s.seed = 99;
  s.edges = {{0, 1}, {2, 3}};
  s.n_vertices = 4;
  s.root = 2;
  s.explicit_keys = {1, 2};
  s.width = 10;
  s.heat_init = HeatInit::HotCenter;
  s.lbm_init = LbmInit::Equilibrium;
  const auto back = spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_EQ(back.edges, s.edges);
  EXPECT_EQ(back.heat_init, HeatInit::HotCenter);
  EXPECT_EQ(parse_workload("lbm"), Workload::Lbm);
  EXPECT_THROW(parse_workload("fft"), Error);
}

TEST(Runner, ComparisonCsvHasOneRowPerRep) {
  WorkloadSpec s;
  s.name = Workload::Heat2d;
  s.width = s.height = 16;
  s.steps = 5;
  JobConfig base;
  base.seg_size = std::size_t{32} << 20;
  std::ostringstream csv;
  auto rows = run_comparison({s}, {Backend::PointerShared, Backend::CopyBaseline}, {1, 2}, 3, base, &csv);
  EXPECT_EQ(rows.size(), 12u);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kCsvHeader);
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    EXPECT_NE(line.find(",pass"), std::string::npos) << line;
  }
  EXPECT_EQ(n, 12);
  for (const auto& r : rows) {
    EXPECT_GT(r.result.total_ns, 0u);
    if (r.result.ranks == 2) {
      EXPECT_EQ(r.result.msgs, 2u * 5);
      // Each rank ships one 16-double row per step. The copy backend sends
      // 128 bytes eagerly: one copy at the sender, none at the receiver.
      EXPECT_EQ(r.result.bytes_copied, r.result.backend == Backend::PointerShared ? 0u : 2u * 5 * 128);
    }
  }
  EXPECT_EQ(median({5, 1, 3}), 3u);
  EXPECT_EQ(median({4, 1, 3, 2}), 2u);
}

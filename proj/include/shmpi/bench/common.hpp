#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shmpi/comm.hpp"
#include "shmpi/error.hpp"

namespace shmpi::bench {

enum class Workload { Bfs, IntSort, Heat2d, Lbm };

constexpr std::string_view to_string(Workload w) noexcept {
  switch (w) {
    case Workload::Bfs: return "bfs";
    case Workload::IntSort: return "intsort";
    case Workload::Heat2d: return "heat2d";
    case Workload::Lbm: return "lbm";
  }
  return "?";
}

inline Workload parse_workload(std::string_view s) {
  if (s == "bfs") return Workload::Bfs;
  if (s == "intsort") return Workload::IntSort;
  if (s == "heat2d") return Workload::Heat2d;
  if (s == "lbm") return Workload::Lbm;
  raise(Errc::InvalidConfig, "unknown workload '" + std::string(s) + "' (bfs|intsort|heat2d|lbm)");
}

enum class HeatInit { Seeded, HotCenter, Uniform };
enum class LbmInit { Perturbed, Equilibrium };

/// Parameters for one workload run. Defaults are the desk-scale sizes.
struct WorkloadSpec {
  Workload name = Workload::Heat2d;
  std::uint64_t seed = 1;

  // bfs
  int scale = 14;
  int edgefactor = 16;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;  // explicit graph when non-empty
  std::uint64_t n_vertices = 0;                                // with explicit edges
  std::int64_t root = -1;                                      // -1: derived from seed

  // intsort
  std::uint64_t keys = std::uint64_t{1} << 22;
  std::uint32_t max_key = std::uint32_t{1} << 19;
  std::vector<std::uint32_t> explicit_keys;

  // heat2d / lbm
  std::size_t width = 0;   // 0: workload default
  std::size_t height = 0;
  int steps = 0;
  HeatInit heat_init = HeatInit::Seeded;
  LbmInit lbm_init = LbmInit::Perturbed;

  /// Include each rank's local output in its report (small runs only).
  bool report_output = false;

  std::size_t grid_width() const { return width != 0 ? width : (name == Workload::Lbm ? 128 : 512); }
  std::size_t grid_height() const { return height != 0 ? height : (name == Workload::Lbm ? 128 : 512); }
  int step_count() const { return steps != 0 ? steps : 200; }
};

inline nlohmann::json to_json(const WorkloadSpec& s) {
  nlohmann::json j;
  j["name"] = std::string(to_string(s.name));
  j["seed"] = s.seed;
  j["scale"] = s.scale;
  j["edgefactor"] = s.edgefactor;
  j["edges"] = s.edges;
  j["n_vertices"] = s.n_vertices;
  j["root"] = s.root;
  j["keys"] = s.keys;
  j["max_key"] = s.max_key;
  j["explicit_keys"] = s.explicit_keys;
  j["width"] = s.width;
  j["height"] = s.height;
  j["steps"] = s.steps;
  j["heat_init"] = static_cast<int>(s.heat_init);
  j["lbm_init"] = static_cast<int>(s.lbm_init);
  j["report_output"] = s.report_output;
  return j;
}

inline WorkloadSpec spec_from_json(const nlohmann::json& j) {
  WorkloadSpec s;
  s.name = parse_workload(j.at("name").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.scale = j.at("scale").get<int>();
  s.edgefactor = j.at("edgefactor").get<int>();
  s.edges = j.at("edges").get<std::vector<std::pair<std::uint64_t, std::uint64_t>>>();
  s.n_vertices = j.at("n_vertices").get<std::uint64_t>();
  s.root = j.at("root").get<std::int64_t>();
  s.keys = j.at("keys").get<std::uint64_t>();
  s.max_key = j.at("max_key").get<std::uint32_t>();
  s.explicit_keys = j.at("explicit_keys").get<std::vector<std::uint32_t>>();
  s.width = j.at("width").get<std::size_t>();
  s.height = j.at("height").get<std::size_t>();
  s.steps = j.at("steps").get<int>();
  s.heat_init = static_cast<HeatInit>(j.at("heat_init").get<int>());
  s.lbm_init = static_cast<LbmInit>(j.at("lbm_init").get<int>());
  s.report_output = j.at("report_output").get<bool>();
  return s;
}

/// Stateless counter-based generator, so every rank can reproduce any
/// element of a seeded input without communicating.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
constexpr std::uint64_t hash2(std::uint64_t seed, std::uint64_t i) noexcept {
  return splitmix64(splitmix64(seed) ^ (i * 0xD1B54A32D192ED03ULL));
}
/// Uniform double in [0, 1).
constexpr double unit_double(std::uint64_t h) noexcept { return static_cast<double>(h >> 11) * 0x1.0p-53; }

class Fnv1a {
 public:
  void add(std::span<const std::byte> bytes) noexcept {
    for (auto b : bytes) {
      h_ ^= static_cast<std::uint64_t>(b);
      h_ *= 0x100000001B3ULL;
    }
  }
  template <class T>
  void add_values(std::span<const T> v) noexcept {
    add(std::as_bytes(v));
  }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

/// Contiguous block [begin, end) of `n` items owned by `rank` of `p`.
struct Block {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::uint64_t size() const noexcept { return end - begin; }
};
constexpr Block block_of(std::uint64_t n, int p, int rank) noexcept {
  const std::uint64_t per = (n + static_cast<std::uint64_t>(p) - 1) / static_cast<std::uint64_t>(p);
  const std::uint64_t b = std::min(n, per * static_cast<std::uint64_t>(rank));
  return {b, std::min(n, b + per)};
}

/// What one rank reports for one run.
struct RankOutcome {
  bool valid = false;
  std::string detail;
  std::uint64_t checksum = 0;
  std::uint64_t total_ns = 0;
  RunMetrics window;  // counters accumulated inside the timed window
  nlohmann::json output;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["valid"] = valid;
    j["detail"] = detail;
    j["checksum"] = checksum;
    j["total_ns"] = total_ns;
    j["comm_ns"] = window.comm_time_ns;
    j["bytes_copied"] = window.payload_bytes_copied;
    j["eager_bytes"] = window.eager_bytes;
    j["rendezvous_bytes"] = window.rendezvous_bytes;
    j["msgs"] = window.messages_sent;
    if (!output.is_null()) j["output"] = output;
    return j;
  }
};

/// Times the workload phase: barrier, run, barrier. Records the counter
/// delta and wall time into `out`.
template <class Fn>
void timed_phase(Communicator& comm, RankOutcome& out, Fn&& fn) {
  comm.barrier();
  const auto m0 = comm.metrics();
  const auto t0 = Clock::now();
  fn();
  comm.barrier();
  out.total_ns = static_cast<std::uint64_t>(std::chrono::duration_cast<Nanos>(Clock::now() - t0).count());
  out.window = comm.metrics() - m0;
}

/// Every rank agrees on validity: the run is valid only if all ranks are.
inline void agree_on_validity(Communicator& comm, RankOutcome& out) {
  const std::int64_t all = comm.allreduce<std::int64_t>(ReduceOp::Min, out.valid ? 1 : 0);
  if (out.valid && all == 0) out.detail = "another rank failed validation";
  out.valid = all == 1;
}

}  // namespace shmpi::bench

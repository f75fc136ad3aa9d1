#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "shmpi/error.hpp"

namespace shmpi {

inline constexpr int kMetricsSchemaVersion = 1;

/// Per-rank counters. All monotonically non-decreasing during a run.
struct RunMetrics {
  std::uint64_t payload_bytes_copied = 0;
  std::uint64_t eager_bytes = 0;       // payload carried inline in descriptors
  std::uint64_t rendezvous_bytes = 0;  // payload carried in shared regions
  std::uint64_t messages_sent = 0;
  std::uint64_t messages_received = 0;
  std::uint64_t comm_time_ns = 0;
  std::uint64_t compute_time_ns = 0;
  std::uint64_t barrier_count = 0;

  RunMetrics operator-(const RunMetrics& o) const {
    return {payload_bytes_copied - o.payload_bytes_copied,
            eager_bytes - o.eager_bytes,
            rendezvous_bytes - o.rendezvous_bytes,
            messages_sent - o.messages_sent,
            messages_received - o.messages_received,
            comm_time_ns - o.comm_time_ns,
            compute_time_ns - o.compute_time_ns,
            barrier_count - o.barrier_count};
  }
};

inline nlohmann::json to_json(const RunMetrics& m) {
  return {{"payload_bytes_copied", m.payload_bytes_copied},
          {"eager_bytes", m.eager_bytes},
          {"rendezvous_bytes", m.rendezvous_bytes},
          {"messages_sent", m.messages_sent},
          {"messages_received", m.messages_received},
          {"comm_time_ns", m.comm_time_ns},
          {"compute_time_ns", m.compute_time_ns},
          {"barrier_count", m.barrier_count}};
}

inline RunMetrics metrics_from_json(const nlohmann::json& j) {
  RunMetrics m;
  m.payload_bytes_copied = j.at("payload_bytes_copied").get<std::uint64_t>();
  m.eager_bytes = j.value("eager_bytes", std::uint64_t{0});
  m.rendezvous_bytes = j.value("rendezvous_bytes", std::uint64_t{0});
  m.messages_sent = j.at("messages_sent").get<std::uint64_t>();
  m.messages_received = j.at("messages_received").get<std::uint64_t>();
  m.comm_time_ns = j.at("comm_time_ns").get<std::uint64_t>();
  m.compute_time_ns = j.at("compute_time_ns").get<std::uint64_t>();
  m.barrier_count = j.at("barrier_count").get<std::uint64_t>();
  return m;
}

/// One rank's finalize record. Flat top-level keys follow the documented
/// schema; `extra` carries knobs and workload results.
struct RankReport {
  int rank = 0;
  std::string backend;
  RunMetrics metrics;
  std::uint64_t wall_time_ns = 0;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json to_json(const RankReport& r) {
  nlohmann::json j = to_json(r.metrics);
  j["schema_version"] = kMetricsSchemaVersion;
  j["rank"] = r.rank;
  j["backend"] = r.backend;
  j["wall_time_ns"] = r.wall_time_ns;
  for (auto it = r.extra.begin(); it != r.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline std::string metrics_file_name(int rank) { return "rank-" + std::to_string(rank) + ".json"; }

inline void write_rank_report(const std::filesystem::path& file, const RankReport& r) {
  std::ofstream out(file);
  if (!out) raise(Errc::SystemError, "cannot write metrics file " + file.string());
  out << to_json(r).dump() << '\n';
}

struct RunSummary {
  int ranks = 0;
  std::string backend;
  RunMetrics totals;                  // counters summed over ranks
  std::uint64_t job_time_ns = 0;      // max of per-rank wall times
  std::vector<nlohmann::json> per_rank;

  nlohmann::json to_json() const {
    nlohmann::json j = shmpi::to_json(totals);
    j["schema_version"] = kMetricsSchemaVersion;
    j["ranks"] = ranks;
    j["backend"] = backend;
    j["job_time_ns"] = job_time_ns;
    j["per_rank"] = per_rank;
    return j;
  }

  static constexpr const char* csv_header() {
    return "ranks,backend,job_time_ns,comm_time_ns,compute_time_ns,payload_bytes_copied,messages_sent,"
           "messages_received,barrier_count";
  }
  std::string csv_row() const {
    return std::to_string(ranks) + "," + backend + "," + std::to_string(job_time_ns) + "," +
           std::to_string(totals.comm_time_ns) + "," + std::to_string(totals.compute_time_ns) + "," +
           std::to_string(totals.payload_bytes_copied) + "," + std::to_string(totals.messages_sent) + "," +
           std::to_string(totals.messages_received) + "," + std::to_string(totals.barrier_count);
  }
};

/// Reads rank-<r>.json for r in [0, n_ranks) from `dir` and sums them.
inline RunSummary aggregate_metrics(const std::filesystem::path& dir, int n_ranks) {
  RunSummary s;
  s.ranks = n_ranks;
  for (int r = 0; r < n_ranks; ++r) {
    const auto file = dir / metrics_file_name(r);
    std::ifstream in(file);
    if (!in) throw RankError(Errc::MissingRankMetrics, r, 0, "no metrics for rank " + std::to_string(r));
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw RankError(Errc::MissingRankMetrics, r, 0, "unparseable metrics for rank " + std::to_string(r));
    }
    if (j.value("schema_version", -1) != kMetricsSchemaVersion)
      raise(Errc::SchemaMismatch, "rank " + std::to_string(r) + " reports schema " +
                                      std::to_string(j.value("schema_version", -1)));
    RunMetrics m;
    try {
      m = metrics_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::SchemaMismatch, "rank " + std::to_string(r) + ": " + e.what());
    }
    s.totals.payload_bytes_copied += m.payload_bytes_copied;
    s.totals.eager_bytes += m.eager_bytes;
    s.totals.rendezvous_bytes += m.rendezvous_bytes;
    s.totals.messages_sent += m.messages_sent;
    s.totals.messages_received += m.messages_received;
    s.totals.comm_time_ns += m.comm_time_ns;
    s.totals.compute_time_ns += m.compute_time_ns;
    s.totals.barrier_count += m.barrier_count;
    s.job_time_ns = std::max(s.job_time_ns, j.value("wall_time_ns", std::uint64_t{0}));
    if (r == 0) s.backend = j.value("backend", "");
    s.per_rank.push_back(std::move(j));
  }
  return s;
}

}  // namespace shmpi

#pragma once

// Runs workloads as launched jobs and collects comparable results.

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "shmpi/bench/bfs.hpp"
#include "shmpi/bench/common.hpp"
#include "shmpi/bench/heat2d.hpp"
#include "shmpi/bench/intsort.hpp"
#include "shmpi/bench/lbm.hpp"
#include "shmpi/launcher.hpp"

namespace shmpi::bench {

inline constexpr const char* kWorkloadEnv = "SHMPI_WORKLOAD";

inline RankOutcome run_rank(Communicator& comm, const WorkloadSpec& spec) {
  switch (spec.name) {
    case Workload::Bfs: return run_bfs_rank(comm, spec);
    case Workload::IntSort: return run_intsort_rank(comm, spec);
    case Workload::Heat2d: return run_heat2d_rank(comm, spec);
    case Workload::Lbm: return run_lbm_rank(comm, spec);
  }
  raise(Errc::InvalidConfig, "unknown workload");
}

/// True when every size parameter of `s` is the built-in desk-scale default.
inline bool uses_default_sizes(const WorkloadSpec& s) {
  const WorkloadSpec d;
  switch (s.name) {
    case Workload::Bfs: return s.edges.empty() && s.scale == d.scale && s.edgefactor == d.edgefactor;
    case Workload::IntSort: return s.explicit_keys.empty() && s.keys == d.keys && s.max_key == d.max_key;
    case Workload::Heat2d:
    case Workload::Lbm: return s.width == 0 && s.height == 0 && s.steps == 0;
  }
  return false;
}

/// Body of one rank: attach, run, report, detach.
inline int rank_main(const WorkloadSpec& spec) {
  auto comm = Communicator::init_from_env();
  RankOutcome out = run_rank(comm, spec);
  auto j = out.to_json();
  j["name"] = std::string(to_string(spec.name));
  j["sizes"] = uses_default_sizes(spec) ? "desk-scale default" : "custom";
  comm.report_extra()["workload"] = std::move(j);
  comm.finalize();
  return 0;
}

/// Rank entry for exec mode: the workload arrives as JSON in SHMPI_WORKLOAD.
inline int rank_main_from_env() {
  const char* w = std::getenv(kWorkloadEnv);
  if (w == nullptr) raise(Errc::InvalidConfig, std::string(kWorkloadEnv) + " not set");
  return rank_main(spec_from_json(nlohmann::json::parse(w)));
}

struct BenchResult {
  WorkloadSpec spec;
  Backend backend = Backend::PointerShared;
  int ranks = 0;
  bool valid = false;
  std::string detail;
  std::uint64_t checksum = 0;      // combined over ranks in rank order
  std::uint64_t total_ns = 0;      // slowest rank's timed phase
  std::uint64_t comm_ns = 0;       // summed over ranks
  std::uint64_t bytes_copied = 0;  // summed over ranks, timed phase only
  std::uint64_t msgs = 0;          // messages sent, timed phase only
  std::vector<nlohmann::json> per_rank;
  RunSummary summary;

  void require_valid() const {
    if (!valid) raise(Errc::ValidationFailed, std::string(to_string(spec.name)) + ": " + detail);
  }

  nlohmann::json to_json() const {
    return {{"workload", std::string(to_string(spec.name))},
            {"backend", std::string(to_string(backend))},
            {"ranks", ranks},
            {"valid", valid},
            {"detail", detail},
            {"checksum", checksum},
            {"total_ns", total_ns},
            {"comm_ns", comm_ns},
            {"bytes_copied", bytes_copied},
            {"msgs", msgs},
            {"sizes", uses_default_sizes(spec) ? "desk-scale default" : "custom"},
            {"summary", summary.to_json()}};
  }
};

inline BenchResult collect(const WorkloadSpec& spec, const JobConfig& job, RunSummary summary) {
  BenchResult res;
  res.spec = spec;
  res.backend = job.backend;
  res.ranks = job.n_ranks;
  res.valid = true;
  Fnv1a h;
  for (const auto& r : summary.per_rank) {
    const auto& w = r.at("workload");
    res.per_rank.push_back(w);
    if (!w.at("valid").get<bool>() && res.valid) {
      res.valid = false;
      res.detail = "rank " + std::to_string(r.at("rank").get<int>()) + ": " + w.at("detail").get<std::string>();
    }
    const auto c = w.at("checksum").get<std::uint64_t>();
    h.add_values<std::uint64_t>(std::span<const std::uint64_t>(&c, 1));
    res.total_ns = std::max(res.total_ns, w.at("total_ns").get<std::uint64_t>());
    res.comm_ns += w.at("comm_ns").get<std::uint64_t>();
    res.bytes_copied += w.at("bytes_copied").get<std::uint64_t>();
    res.msgs += w.at("msgs").get<std::uint64_t>();
  }
  if (res.valid && !res.per_rank.empty()) res.detail = res.per_rank.front().at("detail").get<std::string>();
  res.checksum = h.value();
  res.summary = std::move(summary);
  return res;
}

/// Runs one workload as a job. With `exe` set, ranks exec that program
/// (which must call rank_main_from_env); otherwise ranks are forked.
inline BenchResult run_workload(const WorkloadSpec& spec, JobConfig job, std::optional<std::string> exe = {}) {
  job.require_metrics = true;
  ExitReport rep;
  if (exe) {
    job.extra_env[kWorkloadEnv] = to_json(spec).dump();
    rep = launch(job, Program{*exe, {}});
  } else {
    rep = launch(job, RankFn([spec](int) { return rank_main(spec); }));
  }
  return collect(spec, job, std::move(*rep.summary));
}

inline constexpr const char* kCsvHeader = "workload,backend,ranks,rep,total_ns,comm_ns,bytes_copied,msgs,validation";

inline std::string csv_row(const BenchResult& r, int rep) {
  return std::string(to_string(r.spec.name)) + "," + std::string(to_string(r.backend)) + "," +
         std::to_string(r.ranks) + "," + std::to_string(rep) + "," + std::to_string(r.total_ns) + "," +
         std::to_string(r.comm_ns) + "," + std::to_string(r.bytes_copied) + "," + std::to_string(r.msgs) + "," +
         (r.valid ? "pass" : "fail");
}

struct ComparisonRow {
  BenchResult result;
  int rep = 0;
};

/// Every (workload, backend, rank count) configuration runs one discarded
/// warm-up and then `reps` measured repetitions. Rows are streamed to `csv`
/// (header first) when given.
inline std::vector<ComparisonRow> run_comparison(const std::vector<WorkloadSpec>& specs,
                                                 const std::vector<Backend>& backends, const std::vector<int>& ranks,
                                                 int reps, const JobConfig& base, std::ostream* csv = nullptr,
                                                 std::optional<std::string> exe = {}, bool warmup = true) {
  if (reps < 1) raise(Errc::InvalidConfig, "reps must be >= 1");
  std::vector<ComparisonRow> rows;
  if (csv) *csv << kCsvHeader << '\n';
  for (const auto& spec : specs)
    for (int n : ranks)
      for (auto b : backends) {
        JobConfig job = base;
        job.n_ranks = n;
        job.backend = b;
        if (warmup) run_workload(spec, job, exe);
        for (int rep = 0; rep < reps; ++rep) {
          auto res = run_workload(spec, job, exe);
          if (csv) *csv << csv_row(res, rep) << std::endl;
          rows.push_back({std::move(res), rep});
        }
      }
  return rows;
}

inline std::uint64_t median(std::vector<std::uint64_t> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const auto m = v.size() / 2;
  return v.size() % 2 ? v[m] : (v[m - 1] + v[m]) / 2;
}

}  // namespace shmpi::bench

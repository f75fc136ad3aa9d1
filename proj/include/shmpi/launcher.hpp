#pragma once

// Job launcher: creates the segment, spawns one OS process per rank,
// supervises them, and aggregates their metrics reports. On any failure or
// timeout every rank is killed and the segment is unlinked.

#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "shmpi/comm.hpp"
#include "shmpi/error.hpp"
#include "shmpi/metrics.hpp"
#include "shmpi/segment.hpp"

namespace shmpi {

struct JobConfig {
  int n_ranks = 1;
  std::size_t seg_size = std::size_t{256} << 20;
  std::uint32_t queue_capacity = 64;
  std::uint32_t eager_threshold = 256;
  std::uint32_t region_capacity = 65536;
  Backend backend = Backend::PointerShared;
  std::chrono::milliseconds timeout = std::chrono::minutes(10);
  bool prefault = false;
  bool isend_barrier = false;
  std::uint64_t baseline_latency_ns = 0;
  std::optional<std::uint32_t> spin_limit;
  std::optional<std::uint64_t> barrier_timeout_ms;
  std::string job_id;                  // generated when empty
  std::filesystem::path metrics_dir;   // temporary when empty
  bool keep_metrics = false;
  bool require_metrics = true;
  std::map<std::string, std::string> extra_env;

  SegmentConfig segment_config() const {
    SegmentConfig c;
    c.name = std::string(kSegmentPrefix) + job_id;
    c.total_size = seg_size;
    c.n_ranks = static_cast<std::uint32_t>(n_ranks);
    c.queue_capacity = queue_capacity;
    c.eager_threshold = eager_threshold;
    c.region_capacity = region_capacity;
    return c;
  }
};

/// In-process rank body (fork mode). Its return value is the rank's exit code.
using RankFn = std::function<int(int rank)>;

/// External SPMD program (exec mode).
struct Program {
  std::string path;
  std::vector<std::string> args;
};

using RankBody = std::variant<RankFn, Program>;

struct ExitReport {
  std::string job_id;
  std::string segment_name;
  std::vector<int> exit_codes;
  std::optional<RunSummary> summary;
  Nanos elapsed{0};
};

namespace detail {

inline volatile std::sig_atomic_t g_cancel = 0;

inline std::string new_job_id() {
  static std::atomic<unsigned> counter{0};
  std::random_device rd;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%d-%u-%08x", static_cast<int>(::getpid()), counter.fetch_add(1), rd());
  return buf;
}

inline std::map<std::string, std::string> rank_env(const JobConfig& c, int rank, const std::filesystem::path& mdir) {
  std::map<std::string, std::string> env = c.extra_env;
  env["SHMPI_JOB"] = c.job_id;
  env["SHMPI_RANK"] = std::to_string(rank);
  env["SHMPI_NRANKS"] = std::to_string(c.n_ranks);
  env["SHMPI_BACKEND"] = std::string(to_string(c.backend));
  env["SHMPI_METRICS_FILE"] = (mdir / metrics_file_name(rank)).string();
  env["SHMPI_ISEND_BARRIER"] = c.isend_barrier ? "1" : "0";
  env["SHMPI_BASELINE_LATENCY_NS"] = std::to_string(c.baseline_latency_ns);
  env["SHMPI_PREFAULT"] = c.prefault ? "1" : "0";
  env["SHMPI_SEG_SIZE"] = std::to_string(c.seg_size);
  env["SHMPI_QUEUE_CAP"] = std::to_string(c.queue_capacity);
  env["SHMPI_EAGER"] = std::to_string(c.eager_threshold);
  if (c.spin_limit) env["SHMPI_SPIN_LIMIT"] = std::to_string(*c.spin_limit);
  if (c.barrier_timeout_ms) env["SHMPI_BARRIER_TIMEOUT_MS"] = std::to_string(*c.barrier_timeout_ms);
  return env;
}

[[noreturn]] inline void run_child(const RankBody& body, int rank, const std::map<std::string, std::string>& env) {
  ::setpgid(0, 0);
  for (const auto& [k, v] : env) ::setenv(k.c_str(), v.c_str(), 1);
  if (const auto* fn = std::get_if<RankFn>(&body)) {
    int code = 1;
    try {
      code = (*fn)(rank);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "rank %d: %s\n", rank, e.what());
      code = 1;
    } catch (...) {
      code = 1;
    }
    std::fflush(stdout);
    std::fflush(stderr);
    ::_exit(code);
  }
  const auto& prog = std::get<Program>(body);
  std::vector<char*> argv;
  argv.push_back(const_cast<char*>(prog.path.c_str()));
  for (const auto& a : prog.args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  ::execv(prog.path.c_str(), argv.data());
  std::fprintf(stderr, "rank %d: exec %s failed\n", rank, prog.path.c_str());
  ::_exit(127);
}

inline int decode_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return 255;
}

}  // namespace detail

/// Lets a signal handler ask a running launch() to tear the job down.
inline void request_cancel() noexcept { detail::g_cancel = 1; }

inline ExitReport launch(JobConfig config, const RankBody& body) {
  if (config.n_ranks < 1 || config.n_ranks > static_cast<int>(kMaxRanks))
    raise(Errc::InvalidConfig, "n_ranks must be in [1, " + std::to_string(kMaxRanks) + "]");
  if (config.job_id.empty()) config.job_id = detail::new_job_id();
  if (const auto* prog = std::get_if<Program>(&body); prog && ::access(prog->path.c_str(), X_OK) != 0)
    raise(Errc::SpawnFailed, "program '" + prog->path + "' is not executable");

  // Feasibility checks happen in create(), before anything is spawned.
  SharedSegment segment = SharedSegment::create(config.segment_config(), config.prefault);

  bool temp_dir = false;
  if (config.metrics_dir.empty()) {
    std::string tmpl = (std::filesystem::temp_directory_path() / ("shmpi-" + config.job_id + "-XXXXXX")).string();
    if (::mkdtemp(tmpl.data()) == nullptr) raise(Errc::SystemError, "mkdtemp failed");
    config.metrics_dir = tmpl;
    temp_dir = true;
  } else {
    std::filesystem::create_directories(config.metrics_dir);
  }
  auto cleanup_dir = [&] {
    if (temp_dir && !config.keep_metrics) {
      std::error_code ec;
      std::filesystem::remove_all(config.metrics_dir, ec);
    }
  };

  const auto t0 = Clock::now();
  std::vector<pid_t> pids(static_cast<std::size_t>(config.n_ranks), -1);
  std::vector<int> codes(pids.size(), -1);

  auto kill_all = [&] {
    for (auto pid : pids)
      if (pid > 0) {
        ::kill(-pid, SIGKILL);
        ::kill(pid, SIGKILL);
      }
    for (std::size_t r = 0; r < pids.size(); ++r)
      if (pids[r] > 0 && codes[r] < 0) {
        int st = 0;
        ::waitpid(pids[r], &st, 0);
        codes[r] = detail::decode_status(st);
      }
  };

  std::fflush(stdout);
  std::fflush(stderr);
  for (int r = 0; r < config.n_ranks; ++r) {
    auto env = detail::rank_env(config, r, config.metrics_dir);
    pid_t pid = ::fork();
    if (pid < 0) {
      kill_all();
      cleanup_dir();
      raise(Errc::SpawnFailed, "fork failed for rank " + std::to_string(r));
    }
    if (pid == 0) detail::run_child(body, r, env);
    ::setpgid(pid, pid);
    pids[static_cast<std::size_t>(r)] = pid;
  }

  const auto deadline = t0 + config.timeout;
  std::size_t running = pids.size();
  auto sleep = std::chrono::microseconds(50);
  while (running > 0) {
    bool progressed = false;
    for (std::size_t r = 0; r < pids.size(); ++r) {
      if (codes[r] >= 0) continue;
      int st = 0;
      pid_t got = ::waitpid(pids[r], &st, WNOHANG);
      if (got != pids[r]) continue;
      codes[r] = detail::decode_status(st);
      --running;
      progressed = true;
      if (codes[r] != 0) {
        kill_all();
        cleanup_dir();
        const int code = codes[r];
        if (std::holds_alternative<Program>(body) && code == 127)
          raise(Errc::SpawnFailed, "rank " + std::to_string(r) + " could not exec");
        throw RankError(Errc::RankCrashed, static_cast<int>(r), code,
                        "rank " + std::to_string(r) + " exited with code " + std::to_string(code));
      }
    }
    if (running == 0) break;
    if (detail::g_cancel) {
      kill_all();
      cleanup_dir();
      detail::g_cancel = 0;
      raise(Errc::JobTimeout, "job cancelled");
    }
    if (Clock::now() > deadline) {
      kill_all();
      cleanup_dir();
      raise(Errc::JobTimeout, "job " + config.job_id + " exceeded " + std::to_string(config.timeout.count()) + " ms");
    }
    sleep = progressed ? std::chrono::microseconds(50) : std::min(sleep * 2, std::chrono::microseconds(5000));
    std::this_thread::sleep_for(sleep);
  }

  ExitReport rep;
  rep.job_id = config.job_id;
  rep.segment_name = segment.name();
  rep.exit_codes = codes;
  rep.elapsed = std::chrono::duration_cast<Nanos>(Clock::now() - t0);
  segment.close();
  try {
    if (config.require_metrics) rep.summary = aggregate_metrics(config.metrics_dir, config.n_ranks);
  } catch (...) {
    cleanup_dir();
    throw;
  }
  cleanup_dir();
  return rep;
}

/// Removes leftover segments: one job's, or every runtime segment when job_id is empty.
inline std::vector<std::string> clean_segments(const std::string& job_id = {}) {
  std::vector<std::string> removed;
  for (const auto& name : SharedSegment::list()) {
    if (!job_id.empty() && name != std::string(kSegmentPrefix) + job_id) continue;
    if (SharedSegment::remove(name)) removed.push_back(name);
  }
  return removed;
}

}  // namespace shmpi

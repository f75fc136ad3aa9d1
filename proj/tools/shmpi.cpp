// shmpi: launch SPMD jobs over a shared-memory segment, run the benchmark
// workloads, and clean up leftover segments.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "shmpi/bench/runner.hpp"
#include "shmpi/launcher.hpp"

namespace {

using namespace shmpi;

std::size_t parse_size(const std::string& s) {
  std::size_t pos = 0;
  const unsigned long long v = std::stoull(s, &pos);
  std::size_t mul = 1;
  if (pos < s.size()) {
    switch (s[pos]) {
      case 'k': case 'K': mul = std::size_t{1} << 10; break;
      case 'm': case 'M': mul = std::size_t{1} << 20; break;
      case 'g': case 'G': mul = std::size_t{1} << 30; break;
      default: throw CLI::ValidationError("--seg-size", "unknown suffix in '" + s + "'");
    }
  }
  return static_cast<std::size_t>(v) * mul;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct JobFlags {
  std::string ranks = "4";
  std::string backend = "pointer";
  std::string seg_size = "256M";
  std::uint32_t queue_cap = 64;
  std::uint32_t eager = 256;
  double timeout_s = 600;
  std::string csv;
  std::string json;
  bool prefault = false;
  bool isend_barrier = false;
  std::uint64_t baseline_latency_ns = 0;

  void add_to(CLI::App* app) {
    app->add_option("--ranks,-n", ranks, "Rank count (bench: comma list)")->capture_default_str();
    app->add_option("--backend,-b", backend, "pointer|copy (bench: comma list or 'both')")->capture_default_str();
    app->add_option("--seg-size", seg_size, "Segment size, K/M/G suffix allowed")->capture_default_str();
    app->add_option("--queue-cap", queue_cap, "Descriptor slots per rank queue (power of two)")->capture_default_str();
    app->add_option("--eager", eager, "Eager threshold in bytes (<= 256)")->capture_default_str();
    app->add_option("--timeout-s", timeout_s, "Whole-job timeout in seconds")->capture_default_str();
    app->add_option("--csv", csv, "Write CSV results here");
    app->add_option("--json", json, "Write JSON results here");
    app->add_flag("--prefault", prefault, "Touch every segment page before spawning");
    app->add_flag("--isend-barrier", isend_barrier, "Make isend wait for delivery before returning");
    app->add_option("--baseline-latency-ns", baseline_latency_ns, "Extra latency per copy-backend send")
        ->capture_default_str();
  }

  JobConfig job() const {
    JobConfig c;
    c.seg_size = parse_size(seg_size);
    c.queue_capacity = queue_cap;
    c.eager_threshold = eager;
    c.timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000));
    c.prefault = prefault;
    c.isend_barrier = isend_barrier;
    c.baseline_latency_ns = baseline_latency_ns;
    return c;
  }
  std::vector<int> rank_list() const {
    std::vector<int> out;
    for (const auto& r : split(ranks, ',')) out.push_back(std::stoi(r));
    if (out.empty()) throw CLI::ValidationError("--ranks", "no rank count given");
    return out;
  }
  std::vector<Backend> backend_list() const {
    if (backend == "both") return {Backend::PointerShared, Backend::CopyBaseline};
    std::vector<Backend> out;
    for (const auto& b : split(backend, ',')) out.push_back(parse_backend(b));
    return out;
  }
};

std::string self_exe() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) raise(Errc::SpawnFailed, "cannot resolve own executable");
  return p.string();
}

void on_signal(int) { request_cancel(); }

int cmd_run(const JobFlags& f, const std::string& program, const std::vector<std::string>& args) {
  JobConfig job = f.job();
  job.n_ranks = f.rank_list().front();
  job.backend = parse_backend(f.backend);
  std::string path = program;
  if (path.find('/') == std::string::npos && !std::filesystem::exists(path)) {
    // Resolve through PATH like a shell would.
    if (const char* env = std::getenv("PATH"))
      for (const auto& dir : split(env, ':'))
        if (auto cand = std::filesystem::path(dir) / path; ::access(cand.c_str(), X_OK) == 0) {
          path = cand.string();
          break;
        }
  }
  auto rep = launch(job, Program{path, args});
  std::fprintf(stderr, "job %s: %d ranks exited 0 in %.3f s\n", rep.job_id.c_str(), job.n_ranks,
               std::chrono::duration<double>(rep.elapsed).count());
  if (rep.summary) {
    if (!f.csv.empty()) {
      std::ofstream out(f.csv);
      out << RunSummary::csv_header() << '\n' << rep.summary->csv_row() << '\n';
    }
    if (!f.json.empty()) std::ofstream(f.json) << rep.summary->to_json().dump(2) << '\n';
  }
  return 0;
}

int cmd_bench(const JobFlags& f, const std::string& name, bench::WorkloadSpec base, int reps,
              const std::string& grid, bool no_warmup) {
  if (!grid.empty()) {
    auto parts = split(grid, 'x');
    if (parts.size() != 2) throw CLI::ValidationError("--grid", "expected WxH");
    base.width = std::stoul(parts[0]);
    base.height = std::stoul(parts[1]);
  }
  if (name == "list") {
    std::puts("bfs intsort heat2d lbm");
    return 0;
  }
  std::vector<bench::WorkloadSpec> specs;
  const std::vector<std::string> names =
      name == "all" ? std::vector<std::string>{"bfs", "intsort", "heat2d", "lbm"} : split(name, ',');
  for (const auto& n : names) {
    auto s = base;
    s.name = bench::parse_workload(n);
    specs.push_back(s);
  }

  std::ofstream csv_file;
  if (!f.csv.empty()) {
    csv_file.open(f.csv);
    if (!csv_file) raise(Errc::SystemError, "cannot write " + f.csv);
  }
  auto rows = bench::run_comparison(specs, f.backend_list(), f.rank_list(), reps, f.job(),
                                    f.csv.empty() ? nullptr : &csv_file, self_exe(), !no_warmup);

  // Median per configuration.
  std::map<std::tuple<std::string, std::string, int>, std::vector<const bench::BenchResult*>> groups;
  bool all_valid = true;
  for (const auto& r : rows) {
    groups[{std::string(to_string(r.result.spec.name)), std::string(to_string(r.result.backend)), r.result.ranks}]
        .push_back(&r.result);
    all_valid = all_valid && r.result.valid;
  }
  std::printf("%-8s %-8s %5s %14s %14s %14s %10s  %s\n", "workload", "backend", "ranks", "median_total_ms",
              "median_comm_ms", "bytes_copied", "msgs", "validation");
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [key, results] : groups) {
    std::vector<std::uint64_t> tot, comm;
    for (const auto* r : results) {
      tot.push_back(r->total_ns);
      comm.push_back(r->comm_ns);
    }
    bool valid = true;
    for (const auto* r : results) valid = valid && r->valid;
    const auto& first = *results.front();
    std::printf("%-8s %-8s %5d %14.3f %14.3f %14llu %10llu  %s\n", std::get<0>(key).c_str(), std::get<1>(key).c_str(),
                std::get<2>(key), bench::median(tot) / 1e6, bench::median(comm) / 1e6,
                static_cast<unsigned long long>(first.bytes_copied), static_cast<unsigned long long>(first.msgs),
                valid ? "pass" : ("fail: " + first.detail).c_str());
    auto j = first.to_json();
    j["median_total_ns"] = bench::median(tot);
    j["median_comm_ns"] = bench::median(comm);
    j["reps"] = results.size();
    out.push_back(std::move(j));
  }
  if (!f.json.empty()) std::ofstream(f.json) << out.dump(2) << '\n';
  std::printf("sizes: %s\n", std::all_of(specs.begin(), specs.end(), bench::uses_default_sizes)
                                 ? "desk-scale defaults"
                                 : "custom");
  return all_valid ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  // Rank role: spawned by `shmpi bench` with the workload in the environment.
  if (std::getenv("SHMPI_RANK") != nullptr && std::getenv(bench::kWorkloadEnv) != nullptr) {
    try {
      return bench::rank_main_from_env();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "rank %s: %s\n", std::getenv("SHMPI_RANK"), e.what());
      return 1;
    }
  }

  CLI::App app{"Shared-memory message passing runtime: job launcher and benchmarks"};
  app.require_subcommand(1);

  JobFlags run_flags;
  std::string program;
  std::vector<std::string> program_args;
  auto* run = app.add_subcommand("run", "Launch an SPMD program on N ranks");
  run_flags.add_to(run);
  run->add_option("program", program, "Program to run on every rank")->required();
  run->add_option("args", program_args, "Arguments passed to the program");

  JobFlags bench_flags;
  bench::WorkloadSpec spec;
  std::string name;
  int reps = 5;
  std::string grid;
  bool no_warmup = false;
  auto* bench_cmd = app.add_subcommand("bench", "Run workloads under one or both backends");
  bench_flags.add_to(bench_cmd);
  bench_cmd->add_option("name", name, "bfs|intsort|heat2d|lbm|all|list (comma list allowed)")->required();
  bench_cmd->add_option("--seed", spec.seed, "Input seed")->capture_default_str();
  bench_cmd->add_option("--reps", reps, "Measured repetitions per configuration")->capture_default_str();
  bench_cmd->add_option("--scale", spec.scale, "bfs: log2 of vertex count")->capture_default_str();
  bench_cmd->add_option("--edgefactor", spec.edgefactor, "bfs: edges per vertex")->capture_default_str();
  bench_cmd->add_option("--keys", spec.keys, "intsort: key count")->capture_default_str();
  bench_cmd->add_option("--max-key", spec.max_key, "intsort: keys are drawn from [0, max-key)")->capture_default_str();
  bench_cmd->add_option("--grid", grid, "heat2d/lbm: WxH (defaults 512x512 and 128x128)");
  bench_cmd->add_option("--steps", spec.steps, "heat2d/lbm: time steps (default 200)");
  bench_cmd->add_flag("--no-warmup", no_warmup, "Do not run the discarded warm-up repetition");

  std::string clean_job;
  auto* clean = app.add_subcommand("clean", "Remove leftover runtime segments");
  clean->add_option("--job", clean_job, "Only this job id");

  CLI11_PARSE(app, argc, argv);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  try {
    if (*run) return cmd_run(run_flags, program, program_args);
    if (*bench_cmd) return cmd_bench(bench_flags, name, spec, reps, grid, no_warmup);
    if (*clean) {
      for (const auto& n : clean_segments(clean_job)) std::printf("removed /dev/shm/%s\n", n.c_str());
      return 0;
    }
  } catch (const RankError& e) {
    std::fprintf(stderr, "shmpi: %s: %s (rank %d, exit code %d)\n", std::string(to_string(e.code())).c_str(), e.what(),
                 e.rank(), e.exit_code());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "shmpi: %s: %s\n", std::string(to_string(e.code())).c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "shmpi: %s\n", e.what());
    return 2;
  }
  return 0;
}

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "shmpi/error.hpp"

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#endif

namespace shmpi {

using Clock = std::chrono::steady_clock;
using Nanos = std::chrono::nanoseconds;

inline void cpu_relax() noexcept {
#if defined(__x86_64__) || defined(__i386__)
  _mm_pause();
#elif defined(__aarch64__)
  asm volatile("yield" ::: "memory");
#endif
}

inline std::optional<long long> env_integer(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  char* end = nullptr;
  long long x = std::strtoll(v, &end, 10);
  if (end == v) return std::nullopt;
  return x;
}

/// Adaptive polling: spin first, then sleep with exponential backoff.
struct PollingPolicy {
  std::uint32_t spin_limit = 1000;
  Nanos backoff_initial = std::chrono::microseconds(1);
  Nanos backoff_max = std::chrono::milliseconds(1);
  double multiplier = 2.0;

  bool valid() const noexcept {
    return backoff_initial.count() > 0 && backoff_initial <= backoff_max && multiplier > 1.0;
  }

  /// Defaults, with SHMPI_SPIN_LIMIT applied when set.
  static PollingPolicy from_env() {
    PollingPolicy p;
    if (auto v = env_integer("SHMPI_SPIN_LIMIT"); v && *v >= 0) p.spin_limit = static_cast<std::uint32_t>(*v);
    return p;
  }
};

constexpr auto kDefaultBarrierTimeout = std::chrono::seconds(30);

/// Bound on every blocking wait; SHMPI_BARRIER_TIMEOUT_MS overrides.
inline Nanos barrier_timeout_from_env() {
  if (auto v = env_integer("SHMPI_BARRIER_TIMEOUT_MS"); v && *v > 0) return std::chrono::milliseconds(*v);
  return kDefaultBarrierTimeout;
}

struct PollStats {
  std::uint64_t iterations = 0;  // predicate evaluations that returned false
  std::uint64_t sleeps = 0;
  Nanos slept{0};
};

struct NoProgress {
  constexpr std::uint64_t operator()() const noexcept { return 0; }
};

/// Optional observer of the sleep schedule, used by tests.
struct SleepLog {
  struct Sleep {
    Nanos requested;
    Nanos actual;
    bool after_progress;  // first sleep after a progress reset
  };
  std::vector<Sleep> sleeps;
};

/// Waits until `ready()` holds. Spins `spin_limit` times (yielding the core
/// periodically), then sleeps with geometric backoff capped at backoff_max.
/// Whenever `progress()` returns a new value the backoff restarts at
/// backoff_initial. Throws Timeout once `deadline` passes.
template <class Ready, class Progress = NoProgress>
PollStats poll_wait(Ready&& ready, const PollingPolicy& policy,
                    std::optional<Clock::time_point> deadline = std::nullopt,
                    Progress&& progress = Progress{}, SleepLog* log = nullptr) {
  PollStats stats;
  if (ready()) return stats;

  std::uint64_t last_progress = progress();
  std::uint32_t spins = 0;
  Nanos backoff = policy.backoff_initial;
  bool reset = false;
  for (;;) {
    ++stats.iterations;
    if (spins < policy.spin_limit) {
      ++spins;
      cpu_relax();
      if ((spins & 31U) == 0) std::this_thread::yield();
    } else {
      auto t0 = Clock::now();
      std::this_thread::sleep_for(backoff);
      auto actual = std::chrono::duration_cast<Nanos>(Clock::now() - t0);
      ++stats.sleeps;
      stats.slept += actual;
      if (log != nullptr) log->sleeps.push_back({backoff, actual, reset});
      reset = false;
      auto next = Nanos(static_cast<Nanos::rep>(static_cast<double>(backoff.count()) * policy.multiplier));
      backoff = next > policy.backoff_max ? policy.backoff_max : next;
    }
    if (ready()) return stats;
    if (auto p = progress(); p != last_progress) {
      last_progress = p;
      backoff = policy.backoff_initial;
      reset = true;
    }
    if (deadline && Clock::now() > *deadline) raise(Errc::Timeout, "poll_wait deadline exceeded");
  }
}

// ---------------------------------------------------------------------------
// In-segment primitives. These structs are placed in shared memory and must
// stay standard-layout with address-free atomics.

static_assert(std::atomic<std::uint32_t>::is_always_lock_free);
static_assert(std::atomic<std::uint64_t>::is_always_lock_free);

/// Test-and-test-and-set lock. state is 0 when unlocked, owner rank + 1 otherwise.
struct MetaLock {
  std::atomic<std::uint32_t> state{0};
  std::atomic<std::uint64_t> acquisitions{0};

  bool try_lock(std::uint32_t rank) noexcept {
    std::uint32_t expected = 0;
    if (state.load(std::memory_order_relaxed) != 0) return false;
    if (state.compare_exchange_strong(expected, rank + 1, std::memory_order_acquire,
                                      std::memory_order_relaxed)) {
      acquisitions.fetch_add(1, std::memory_order_relaxed);
      return true;
    }
    return false;
  }

  void lock(std::uint32_t rank, const PollingPolicy& policy,
            std::optional<Clock::time_point> deadline = std::nullopt) {
    poll_wait([&] { return try_lock(rank); }, policy, deadline);
  }

  void unlock(std::uint32_t rank) {
    if (state.load(std::memory_order_relaxed) != rank + 1)
      raise(Errc::NotOwner, "rank " + std::to_string(rank) + " does not hold the lock");
    state.store(0, std::memory_order_release);
  }

  bool locked() const noexcept { return state.load(std::memory_order_acquire) != 0; }
  /// Owner rank, or -1.
  int owner() const noexcept { return static_cast<int>(state.load(std::memory_order_acquire)) - 1; }
};

class LockGuard {
 public:
  LockGuard(MetaLock& lock, std::uint32_t rank, const PollingPolicy& policy) : lock_(lock), rank_(rank) {
    lock_.lock(rank_, policy);
  }
  ~LockGuard() { lock_.unlock(rank_); }
  LockGuard(const LockGuard&) = delete;
  LockGuard& operator=(const LockGuard&) = delete;

 private:
  MetaLock& lock_;
  std::uint32_t rank_;
};

/// Centralized sense-reversing barrier. `generation` doubles as the segment epoch.
struct Barrier {
  std::atomic<std::uint32_t> count{0};
  std::atomic<std::uint32_t> sense{0};
  std::atomic<std::uint64_t> generation{0};
};

/// Per-process half of a barrier: the local sense flag.
class BarrierParticipant {
 public:
  BarrierParticipant() = default;
  explicit BarrierParticipant(const Barrier& b) : local_sense_(b.sense.load(std::memory_order_acquire)) {}

  /// Returns the generation reached. All writes made before entry by any
  /// participant are visible after exit.
  std::uint64_t wait(Barrier& b, std::uint32_t n_ranks, const PollingPolicy& policy, Nanos timeout) {
    local_sense_ ^= 1U;
    const std::uint32_t my_sense = local_sense_;
    if (b.count.fetch_add(1, std::memory_order_acq_rel) + 1 == n_ranks) {
      b.count.store(0, std::memory_order_relaxed);
      auto g = b.generation.fetch_add(1, std::memory_order_relaxed) + 1;
      b.sense.store(my_sense, std::memory_order_release);
      return g;
    }
    poll_wait([&] { return b.sense.load(std::memory_order_acquire) == my_sense; }, policy,
              Clock::now() + timeout);
    return b.generation.load(std::memory_order_acquire);
  }

 private:
  std::uint32_t local_sense_ = 0;
};

}  // namespace shmpi

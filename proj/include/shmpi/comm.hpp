#pragma once

// MPI-like communicator over the shared segment.
//
// Two interchangeable backends:
//   PointerShared  descriptors reference payload in shared regions; a SharedBuf
//                  send plus a by-reference receive moves no payload bytes.
//   CopyBaseline   every rendezvous payload is staged into a bounce region by
//                  the sender and copied out by the receiver (two copies).
//
// payload_bytes_copied counts every payload copy the runtime performs:
//   eager send           +len at the sender (inline write; the receiver's read
//                        of the inline area is not a separate copy)
//   local-bytes send     +len at the sender (staging into a fresh region)
//   SharedBuf send       0 (PointerShared) / +len (CopyBaseline)
//   copy-out receive     +len
//   by-reference receive 0 (PointerShared) / +len (CopyBaseline)

#include <algorithm>
#include <chrono>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shmpi/error.hpp"
#include "shmpi/metrics.hpp"
#include "shmpi/msgqueue.hpp"
#include "shmpi/segment.hpp"
#include "shmpi/shm_alloc.hpp"
#include "shmpi/sync.hpp"

namespace shmpi {

enum class Backend { PointerShared, CopyBaseline };

constexpr std::string_view to_string(Backend b) noexcept {
  return b == Backend::PointerShared ? "pointer" : "copy";
}

inline Backend parse_backend(std::string_view s) {
  if (s == "pointer" || s == "pointer_shared" || s == "POINTER_SHARED") return Backend::PointerShared;
  if (s == "copy" || s == "copy_baseline" || s == "COPY_BASELINE") return Backend::CopyBaseline;
  raise(Errc::InvalidConfig, "unknown backend '" + std::string(s) + "' (expected pointer|copy)");
}

enum class ReduceOp { Sum, Max, Min };

template <class T>
concept Reducible = std::same_as<T, std::int64_t> || std::same_as<T, double>;

struct InitOptions {
  std::string segment_name;
  int rank = 0;
  Backend backend = Backend::PointerShared;
  bool isend_barrier = false;
  std::uint64_t baseline_latency_ns = 0;
  std::filesystem::path metrics_file;  // empty: no report written
  PollingPolicy policy = PollingPolicy::from_env();
  Nanos timeout = barrier_timeout_from_env();
  nlohmann::json knobs = nlohmann::json::object();

  /// Reads SHMPI_JOB, SHMPI_RANK, SHMPI_BACKEND and the knob variables.
  static InitOptions from_env();
};

inline InitOptions InitOptions::from_env() {
  InitOptions o;
  const char* job = std::getenv("SHMPI_JOB");
  if (job == nullptr || *job == '\0') raise(Errc::InvalidConfig, "SHMPI_JOB not set");
  o.segment_name = std::string(kSegmentPrefix) + job;
  auto rank = env_integer("SHMPI_RANK");
  if (!rank) raise(Errc::InvalidConfig, "SHMPI_RANK not set");
  o.rank = static_cast<int>(*rank);
  if (const char* b = std::getenv("SHMPI_BACKEND"); b != nullptr && *b != '\0') o.backend = parse_backend(b);
  o.isend_barrier = env_integer("SHMPI_ISEND_BARRIER").value_or(0) != 0;
  o.baseline_latency_ns = static_cast<std::uint64_t>(env_integer("SHMPI_BASELINE_LATENCY_NS").value_or(0));
  if (const char* m = std::getenv("SHMPI_METRICS_FILE"); m != nullptr && *m != '\0') o.metrics_file = m;
  for (const char* k : {"SHMPI_JOB", "SHMPI_RANK", "SHMPI_NRANKS", "SHMPI_BACKEND", "SHMPI_SPIN_LIMIT",
                        "SHMPI_BARRIER_TIMEOUT_MS", "SHMPI_ISEND_BARRIER", "SHMPI_BASELINE_LATENCY_NS",
                        "SHMPI_PREFAULT", "SHMPI_SEG_SIZE", "SHMPI_QUEUE_CAP", "SHMPI_EAGER"}) {
    if (const char* v = std::getenv(k)) o.knobs[k] = v;
  }
  if (auto n = env_integer("SHMPI_NRANKS")) o.knobs["expected_ranks"] = *n;
  return o;
}

struct MessageInfo {
  int src = 0;
  int tag = 0;
  std::size_t len = 0;
  std::uint64_t seq = 0;
};

namespace detail {
struct CommState;
inline constexpr std::uint32_t kFlagGuarded = 1;
inline constexpr int kTagAlltoallv = -2;
inline bool& initialized_flag() {
  static bool flag = false;
  return flag;
}
}  // namespace detail

/// Reference to payload living in a shared region. Move-only; dropping an
/// owning handle releases its reference.
class SharedBuf {
 public:
  enum class State { Empty, Owned, InFlight };

  SharedBuf() = default;
  SharedBuf(SharedBuf&& o) noexcept { *this = std::move(o); }
  SharedBuf& operator=(SharedBuf&& o) noexcept {
    if (this != &o) {
      reset();
      heap_ = std::exchange(o.heap_, nullptr);
      id_ = std::exchange(o.id_, 0);
      off_ = std::exchange(o.off_, SegOffset{});
      len_ = std::exchange(o.len_, 0);
      state_ = std::exchange(o.state_, State::Empty);
    }
    return *this;
  }
  SharedBuf(const SharedBuf&) = delete;
  SharedBuf& operator=(const SharedBuf&) = delete;
  ~SharedBuf() {
    try {
      reset();
    } catch (...) {
    }
  }

  RegionId region_id() const noexcept { return id_; }
  SegOffset offset() const noexcept { return off_; }
  std::size_t size() const noexcept { return len_; }
  State state() const noexcept { return state_; }
  bool owned() const noexcept { return state_ == State::Owned; }

  /// Writable view. Writing a buffer that is in flight (or no longer ours)
  /// would race with a receiver, so it is refused.
  std::span<std::byte> data() {
    if (state_ != State::Owned) raise(Errc::ContractViolation, "SharedBuf is not owned by this rank");
    if (heap_->in_flight(id_) != 0) raise(Errc::ContractViolation, "SharedBuf mutated while in flight");
    return heap_->segment().resolve(off_, len_);
  }
  std::span<const std::byte> cdata() const {
    if (state_ == State::Empty) raise(Errc::ContractViolation, "empty SharedBuf");
    return heap_->segment().resolve(off_, len_);
  }
  template <class T>
  std::span<T> as() {
    auto b = data();
    return {reinterpret_cast<T*>(b.data()), b.size() / sizeof(T)};
  }
  template <class T>
  std::span<const T> as() const {
    auto b = cdata();
    return {reinterpret_cast<const T*>(b.data()), b.size() / sizeof(T)};
  }

  /// True while a by-reference send of this region has not been taken by its receiver.
  bool in_flight() const { return state_ != State::Empty && heap_->in_flight(id_) != 0; }

  void reset() {
    if (state_ == State::Owned) heap_->decref(id_);
    state_ = State::Empty;
    heap_ = nullptr;
    id_ = 0;
    off_ = {};
    len_ = 0;
  }

 private:
  friend class Communicator;
  SharedBuf(SharedHeap* heap, RegionId id, SegOffset off, std::size_t len, State st)
      : heap_(heap), id_(id), off_(off), len_(len), state_(st) {}

  SharedHeap* heap_ = nullptr;
  RegionId id_ = 0;
  SegOffset off_;
  std::size_t len_ = 0;
  State state_ = State::Empty;
};

/// A received message. Rendezvous payloads arrive as a SharedBuf; eager
/// payloads are carried in `inline_bytes`.
struct Message {
  MessageInfo info;
  SharedBuf buf;
  std::vector<std::byte> inline_bytes;

  bool by_reference() const noexcept { return buf.state() != SharedBuf::State::Empty; }
  std::span<const std::byte> bytes() const {
    if (by_reference()) return buf.cdata();
    return inline_bytes;
  }
};

struct Request {
  std::uint64_t id = 0;
};

namespace detail {

enum class ReqOp { ISend, IRecv };

struct RequestState {
  ReqOp op;
  bool complete = false;
  int peer = 0;
  int tag = 0;
  std::span<std::byte> dest{};
  std::uint64_t ticket = 0;
  bool local = false;  // self-send or already confirmed
  MessageInfo info{};
};

/// A message held outside the ring: a self-send, or an entry moved out of a
/// full queue before anyone asked for it. Rendezvous entries keep their
/// region reference.
struct LocalMessage {
  int src = 0;
  int tag = 0;
  std::uint64_t seq = 0;
  std::vector<std::byte> bytes;
  RegionId region_id = 0;
  SegOffset data_off;
  std::size_t len = 0;
  bool guarded = false;

  std::size_t size() const noexcept { return region_id != 0 ? len : bytes.size(); }
};

struct CommState {
  CommState(InitOptions o, SharedSegment s)
      : opts(std::move(o)),
        seg(std::move(s)),
        heap(seg, static_cast<std::uint32_t>(opts.rank), opts.policy),
        barrier(seg.header().barrier) {
    for (std::uint32_t q = 0; q < seg.n_ranks(); ++q) queues.emplace_back(seg, q);
  }

  InitOptions opts;
  SharedSegment seg;
  SharedHeap heap;
  std::vector<MessageQueue> queues;
  BarrierParticipant barrier;
  RunMetrics metrics;
  Clock::time_point t_init = Clock::now();
  int comm_depth = 0;
  Clock::time_point comm_start;
  std::deque<LocalMessage> local_queue;  // matched before the ring, in arrival order
  std::uint64_t self_seq = 0;
  std::uint64_t next_request = 1;
  std::map<std::uint64_t, RequestState> requests;
  std::vector<std::uint64_t> pending_recvs;  // posting order
  nlohmann::json report_extra = nlohmann::json::object();
  bool finalized = false;
};

/// Charges the enclosed time to comm_time; nested scopes count once.
class CommScope {
 public:
  explicit CommScope(CommState& s) : s_(s) {
    if (s_.comm_depth++ == 0) s_.comm_start = Clock::now();
  }
  ~CommScope() {
    if (--s_.comm_depth == 0)
      s_.metrics.comm_time_ns +=
          static_cast<std::uint64_t>(std::chrono::duration_cast<Nanos>(Clock::now() - s_.comm_start).count());
  }
  CommScope(const CommScope&) = delete;
  CommScope& operator=(const CommScope&) = delete;

 private:
  CommState& s_;
};

}  // namespace detail

class Communicator {
 public:
  Communicator() = default;
  Communicator(Communicator&&) noexcept = default;
  Communicator& operator=(Communicator&&) noexcept = default;
  ~Communicator() {
    if (st_ && !st_->finalized) detail::initialized_flag() = false;
  }

  /// Attaches to the job segment as `opts.rank` and runs the startup barrier.
  static Communicator init(InitOptions opts) {
    if (detail::initialized_flag()) raise(Errc::AlreadyInitialized, "communicator already initialized in this process");
    auto t0 = Clock::now();
    auto seg = SharedSegment::attach(opts.segment_name, opts.rank);
    if (auto expected = opts.knobs.find("expected_ranks");
        expected != opts.knobs.end() && expected->get<long long>() != seg.n_ranks())
      raise(Errc::InvalidConfig, "SHMPI_NRANKS disagrees with segment");
    Communicator c;
    c.st_ = std::make_unique<detail::CommState>(std::move(opts), std::move(seg));
    c.st_->t_init = t0;
    detail::initialized_flag() = true;
    c.barrier();
    return c;
  }
  static Communicator init_from_env() { return init(InitOptions::from_env()); }

  int rank() const noexcept { return st_->opts.rank; }
  int size() const noexcept { return static_cast<int>(st_->seg.n_ranks()); }
  Backend backend() const noexcept { return st_->opts.backend; }
  std::size_t eager_threshold() const noexcept { return st_->seg.header().eager_threshold; }
  bool finalized() const noexcept { return !st_ || st_->finalized; }

  /// Counters so far; compute_time is wall time since init minus comm time.
  RunMetrics metrics() const {
    RunMetrics m = st_->metrics;
    const auto wall = static_cast<std::uint64_t>(
        std::chrono::duration_cast<Nanos>(Clock::now() - st_->t_init).count());
    m.compute_time_ns = wall > m.comm_time_ns ? wall - m.comm_time_ns : 0;
    return m;
  }
  std::uint64_t wall_time_ns() const {
    return static_cast<std::uint64_t>(std::chrono::duration_cast<Nanos>(Clock::now() - st_->t_init).count());
  }

  SharedHeap& heap() noexcept { return st_->heap; }
  const SharedSegment& segment() const noexcept { return st_->seg; }
  MessageQueue& queue(int r) { return st_->queues.at(static_cast<std::size_t>(r)); }

  /// Extra fields merged into this rank's finalize report.
  nlohmann::json& report_extra() noexcept { return st_->report_extra; }

  /// A fresh shared region owned by this rank.
  SharedBuf alloc(std::size_t len) {
    auto a = alloc_region(len, static_cast<std::uint32_t>(rank()));
    return SharedBuf(&st_->heap, a.region_id, a.offset, len, SharedBuf::State::Owned);
  }

  // --- point to point -----------------------------------------------------

  void send(int dst, int tag, std::span<const std::byte> data) {
    detail::CommScope scope(*st_);
    send_bytes(dst, tag, data);
  }

  /// PointerShared: zero-copy; the reference moves to the receiver and `buf`
  /// becomes IN_FLIGHT. CopyBaseline: staged copy; `buf` stays owned.
  void send(int dst, int tag, SharedBuf& buf) {
    detail::CommScope scope(*st_);
    send_shared(dst, tag, buf);
  }

  MessageInfo recv(int src, int tag, std::span<std::byte> dest) {
    detail::CommScope scope(*st_);
    check_source(src);
    progress_pending();
    return consume_into(wait_match(Match{src, tag}), dest);
  }

  Message recv_ref(int src, int tag) {
    detail::CommScope scope(*st_);
    check_source(src);
    progress_pending();
    return consume_ref(wait_match(Match{src, tag}));
  }

  /// Non-blocking probe for a matching message.
  std::optional<MessageInfo> iprobe(int src, int tag) {
    detail::CommScope scope(*st_);
    check_source(src);
    progress_pending();
    auto f = find(Match{src, tag});
    if (!f) return std::nullopt;
    if (f->self) {
      const auto& m = st_->local_queue[f->self_index];
      return MessageInfo{m.src, m.tag, m.size(), m.seq};
    }
    const auto& e = st_->queues[rank()].entry(f->handle);
    return MessageInfo{static_cast<int>(e.src), e.tag, e.payload_len, e.seq};
  }

  // --- nonblocking ----------------------------------------------------------

  Request isend(int dst, int tag, std::span<const std::byte> data) {
    detail::CommScope scope(*st_);
    auto ticket = send_bytes(dst, tag, data);
    return register_isend(dst, tag, data.size(), ticket);
  }

  Request isend(int dst, int tag, SharedBuf& buf) {
    detail::CommScope scope(*st_);
    const auto len = buf.size();
    auto ticket = send_shared(dst, tag, buf);
    return register_isend(dst, tag, len, ticket);
  }

  Request irecv(int src, int tag, std::span<std::byte> dest) {
    detail::CommScope scope(*st_);
    check_source(src);
    const auto id = st_->next_request++;
    detail::RequestState r{detail::ReqOp::IRecv};
    r.peer = src;
    r.tag = tag;
    r.dest = dest;
    st_->requests.emplace(id, r);
    st_->pending_recvs.push_back(id);
    return Request{id};
  }

  /// isend: blocks until the receiver has consumed the entry.
  /// irecv: blocks until a matching message has been delivered.
  MessageInfo wait(const Request& req) {
    detail::CommScope scope(*st_);
    auto& r = request(req);
    if (r.complete) return r.info;
    const auto deadline = Clock::now() + st_->opts.timeout;
    poll_wait(
        [&] {
          progress_pending();
          if (r.op == detail::ReqOp::ISend && !r.complete && st_->queues[r.peer].consumed(r.ticket)) r.complete = true;
          return r.complete;
        },
        st_->opts.policy, deadline, [&] { return st_->queues[rank()].tail(); });
    return r.info;
  }

  bool test(const Request& req) {
    detail::CommScope scope(*st_);
    auto& r = request(req);
    progress_pending();
    if (r.op == detail::ReqOp::ISend && !r.complete && st_->queues[r.peer].consumed(r.ticket)) r.complete = true;
    return r.complete;
  }

  void wait_all(std::span<const Request> reqs) {
    for (const auto& r : reqs) wait(r);
  }

  // --- collectives ------------------------------------------------------------

  void barrier() {
    detail::CommScope scope(*st_);
    barrier_internal();
  }

  /// Copy semantics: the root stages once, every other rank copies out.
  void bcast(int root, std::span<std::byte> buf) {
    detail::CommScope scope(*st_);
    check_root(root);
    auto& slot = st_->seg.header().board[root];
    std::optional<Allocation> staged;
    if (rank() == root) {
      staged = publish(slot, buf);
    }
    barrier_internal();
    bool mismatch = false;
    if (rank() != root && slot.length > 0) {
      if (slot.length > buf.size()) {
        mismatch = true;
      } else {
        copy_counted(buf.data(), st_->seg.base() + slot.offset, slot.length);
      }
    }
    barrier_internal();
    if (staged) st_->heap.decref(staged->region_id);
    if (mismatch) raise(Errc::MismatchedCounts, "bcast buffer smaller than root payload");
  }

  /// Reference semantics: the root stages once and every rank gets a SharedBuf
  /// on that one region (CopyBaseline: non-roots get a private copy).
  SharedBuf bcast_ref(int root, std::span<const std::byte> root_data) {
    detail::CommScope scope(*st_);
    check_root(root);
    auto& slot = st_->seg.header().board[root];
    SharedBuf out;
    if (rank() == root) {
      if (root_data.empty()) raise(Errc::MismatchedCounts, "bcast_ref of an empty payload");
      auto a = publish(slot, root_data);
      out = SharedBuf(&st_->heap, a->region_id, a->offset, root_data.size(), SharedBuf::State::Owned);
    }
    barrier_internal();
    if (rank() != root) {
      const SegOffset off{slot.offset};
      const std::size_t len = slot.length;
      if (backend() == Backend::PointerShared) {
        st_->heap.incref(slot.region_id);
        out = SharedBuf(&st_->heap, slot.region_id, off, len, SharedBuf::State::Owned);
      } else {
        out = alloc(len);
        copy_counted(out.data().data(), st_->seg.base() + off.value, len);
      }
    }
    barrier_internal();
    return out;
  }

  /// Flat gather into shared scratch; the root combines in rank order so
  /// floating-point results are reproducible.
  template <Reducible T>
  void reduce(ReduceOp op, std::span<T> data, int root) {
    detail::CommScope scope(*st_);
    reduce_impl(op, data, root, false);
  }

  template <Reducible T>
  void allreduce(ReduceOp op, std::span<T> data) {
    detail::CommScope scope(*st_);
    reduce_impl(op, data, 0, true);
  }

  template <Reducible T>
  T allreduce(ReduceOp op, T value) {
    allreduce(op, std::span<T>(&value, 1));
    return value;
  }

  /// Pairwise exchange rounds; counts and displacements in elements.
  template <class T>
  void alltoallv(std::span<const T> send, std::span<const std::size_t> scounts,
                 std::span<const std::size_t> sdispls, std::span<T> recv, std::span<const std::size_t> rcounts,
                 std::span<const std::size_t> rdispls) {
    static_assert(std::is_trivially_copyable_v<T>);
    detail::CommScope scope(*st_);
    const auto n = static_cast<std::size_t>(size());
    check_counts(scounts, sdispls, send.size(), n);
    check_counts(rcounts, rdispls, recv.size(), n);
    const auto me = static_cast<std::size_t>(rank());
    if (scounts[me] != rcounts[me]) raise(Errc::MismatchedCounts, "self send/recv counts differ");
    if (scounts[me] > 0) copy_counted(recv.data() + rdispls[me], send.data() + sdispls[me], scounts[me] * sizeof(T));
    for (std::size_t r = 1; r < n; ++r) {
      const auto dst = (me + r) % n;
      const auto src = (me + n - r) % n;
      send_bytes(static_cast<int>(dst), detail::kTagAlltoallv,
                 std::as_bytes(send.subspan(sdispls[dst], scounts[dst])));
      auto f = wait_match(Match{static_cast<int>(src), detail::kTagAlltoallv});
      const auto got = found_length(f);
      if (got != rcounts[src] * sizeof(T))
        raise(Errc::MismatchedCounts, "rank " + std::to_string(src) + " sent " + std::to_string(got) +
                                          " bytes, expected " + std::to_string(rcounts[src] * sizeof(T)));
      consume_into(f, std::as_writable_bytes(recv.subspan(rdispls[src], rcounts[src])));
    }
  }

  /// Every rank sends one element to every rank.
  template <class T>
  std::vector<T> alltoall(std::span<const T> send) {
    const auto n = static_cast<std::size_t>(size());
    if (send.size() != n) raise(Errc::MismatchedCounts, "alltoall needs one element per rank");
    std::vector<T> recv(n);
    std::vector<std::size_t> counts(n, 1), displs(n);
    for (std::size_t i = 0; i < n; ++i) displs[i] = i;
    alltoallv<T>(send, counts, displs, recv, counts, displs);
    return recv;
  }

  /// By-reference alltoallv: each peer receives a view of its slice of `send`
  /// (byte counts/displacements). Result is indexed by source rank.
  std::vector<Message> alltoallv_ref(const SharedBuf& send, std::span<const std::size_t> scounts,
                                     std::span<const std::size_t> sdispls) {
    detail::CommScope scope(*st_);
    const auto n = static_cast<std::size_t>(size());
    check_counts(scounts, sdispls, send.size(), n);
    if (send.state() != SharedBuf::State::Owned) raise(Errc::ContractViolation, "alltoallv_ref of an unowned buffer");
    const auto me = static_cast<std::size_t>(rank());
    std::vector<Message> out(n);
    out[me] = slice_message(send, sdispls[me], scounts[me]);
    for (std::size_t r = 1; r < n; ++r) {
      const auto dst = (me + r) % n;
      const auto src = (me + n - r) % n;
      send_slice(static_cast<int>(dst), detail::kTagAlltoallv, send, sdispls[dst], scounts[dst]);
      out[src] = consume_ref(wait_match(Match{static_cast<int>(src), detail::kTagAlltoallv}));
    }
    return out;
  }

  // --- lifecycle --------------------------------------------------------------

  /// Teardown barrier, metrics report, detach.
  void finalize() {
    if (!st_ || st_->finalized) raise(Errc::NotInitialized, "finalize without init");
    for (const auto& [id, r] : st_->requests)
      if (!r.complete) raise(Errc::FinalizeWithPending, "request " + std::to_string(id) + " still pending");
    {
      detail::CommScope scope(*st_);
      barrier_internal();
    }
    if (!st_->opts.metrics_file.empty()) {
      RankReport rep;
      rep.rank = rank();
      rep.backend = std::string(to_string(backend()));
      rep.metrics = metrics();
      rep.wall_time_ns = wall_time_ns();
      rep.extra = st_->report_extra;
      rep.extra["knobs"] = st_->opts.knobs;
      const auto& h = st_->seg.header();
      rep.extra["segment"] = {{"name", st_->seg.name()},
                              {"total_size", h.total_size},
                              {"queue_capacity", h.queue_capacity},
                              {"eager_threshold", h.eager_threshold}};
      write_rank_report(st_->opts.metrics_file, rep);
    }
    for (auto& m : st_->local_queue)
      if (m.region_id != 0) st_->heap.decref(m.region_id);
    st_->local_queue.clear();
    st_->finalized = true;
    st_->seg.close();
    detail::initialized_flag() = false;
  }

 private:
  struct Found {
    bool self = false;
    std::size_t self_index = 0;
    EntryHandle handle;
  };

  detail::RequestState& request(const Request& req) {
    auto it = st_->requests.find(req.id);
    if (it == st_->requests.end()) raise(Errc::InvalidRequest, "unknown request " + std::to_string(req.id));
    return it->second;
  }

  void check_peer(int dst) const {
    if (dst < 0 || dst >= size()) raise(Errc::PeerOutOfRange, "peer " + std::to_string(dst) + " out of range");
  }
  void check_source(int src) const {
    if (src != kAnySource) check_peer(src);
  }
  void check_root(int root) const { check_peer(root); }

  static void check_counts(std::span<const std::size_t> counts, std::span<const std::size_t> displs,
                           std::size_t extent, std::size_t n) {
    if (counts.size() != n || displs.size() != n) raise(Errc::MismatchedCounts, "counts/displs need one entry per rank");
    for (std::size_t i = 0; i < n; ++i)
      if (displs[i] > extent || counts[i] > extent - displs[i])
        raise(Errc::MismatchedCounts, "slice " + std::to_string(i) + " outside buffer");
  }

  void copy_counted(void* dst, const void* src, std::size_t len) {
    if (len == 0) return;
    std::memcpy(dst, src, len);
    st_->metrics.payload_bytes_copied += len;
  }

  void inject_latency() const {
    if (backend() != Backend::CopyBaseline || st_->opts.baseline_latency_ns == 0) return;
    const auto until = Clock::now() + Nanos(st_->opts.baseline_latency_ns);
    while (Clock::now() < until) cpu_relax();
  }

  Allocation alloc_region(std::size_t len, std::uint32_t owner) {
    if (len == 0) raise(Errc::InvalidConfig, "zero-length shared allocation");
    if (round_up(len, kBlockGranularity) > st_->seg.header().heap_size)
      raise(Errc::OutOfSharedMemory, "payload of " + std::to_string(len) + " bytes exceeds the shared heap");
    // Exhaustion is usually transient (receivers still hold regions).
    const auto deadline = Clock::now() + st_->opts.timeout;
    std::optional<Allocation> got;
    try {
      poll_wait(
          [&] {
            try {
              got = st_->heap.malloc(len, owner);
              return true;
            } catch (const Error& e) {
              if (e.code() != Errc::OutOfSharedMemory) throw;
              progress_pending();
              return false;
            }
          },
          st_->opts.policy, deadline, [&] { return st_->seg.header().alloc.bytes_reserved.load(); });
    } catch (const Error& e) {
      if (e.code() == Errc::Timeout) raise(Errc::OutOfSharedMemory, "shared heap exhausted");
      throw;
    }
    return *got;
  }

  std::optional<Allocation> publish(BoardSlot& slot, std::span<const std::byte> data) {
    slot = BoardSlot{};
    if (data.empty()) return std::nullopt;
    auto a = alloc_region(data.size(), static_cast<std::uint32_t>(rank()));
    copy_counted(st_->seg.base() + a.offset.value, data.data(), data.size());
    slot.region_id = a.region_id;
    slot.offset = a.offset.value;
    slot.length = data.size();
    return a;
  }

  void barrier_internal() {
    ++st_->metrics.barrier_count;
    st_->barrier.wait(st_->seg.header().barrier, st_->seg.n_ranks(), st_->opts.policy, st_->opts.timeout);
  }

  /// Enqueue with backpressure: on QueueFull keep delivering our own pending
  /// receives and back off until the consumer frees a slot.
  std::uint64_t enqueue(int dst, const EntryFields& f) {
    auto& q = st_->queues[static_cast<std::size_t>(dst)];
    if (auto r = q.try_enqueue(f)) return r->ticket;
    std::optional<EnqueueResult> res;
    try {
      poll_wait(
          [&] {
            progress_pending();
            res = q.try_enqueue(f);
            return res.has_value();
          },
          st_->opts.policy, Clock::now() + st_->opts.timeout, [&] { return q.head(); });
    } catch (const Error& e) {
      if (e.code() == Errc::Timeout)
        raise(Errc::Timeout, "queue of rank " + std::to_string(dst) + " stayed full (QueueFull)");
      throw;
    }
    return res->ticket;
  }

  /// Returns the ticket, or UINT64_MAX for self-sends (complete immediately).
  std::uint64_t send_bytes(int dst, int tag, std::span<const std::byte> data) {
    check_peer(dst);
    inject_latency();
    ++st_->metrics.messages_sent;
    if (dst == rank()) return send_self(tag, data);
    EntryFields f;
    f.src = static_cast<std::uint32_t>(rank());
    f.tag = tag;
    f.payload_len = data.size();
    if (data.size() <= eager_threshold()) {
      f.kind = PayloadKind::Eager;
      f.inline_data = data;
      st_->metrics.payload_bytes_copied += data.size();
      st_->metrics.eager_bytes += data.size();
      return enqueue(dst, f);
    }
    auto a = alloc_region(data.size(), static_cast<std::uint32_t>(dst));
    copy_counted(st_->seg.base() + a.offset.value, data.data(), data.size());
    st_->metrics.rendezvous_bytes += data.size();
    f.kind = PayloadKind::Rendezvous;
    f.region_id = a.region_id;
    f.data_off = a.offset;
    try {
      return enqueue(dst, f);
    } catch (...) {
      st_->heap.decref(a.region_id);
      throw;
    }
  }

  std::uint64_t send_self(int tag, std::span<const std::byte> data) {
    detail::LocalMessage m;
    m.src = rank();
    m.tag = tag;
    m.seq = st_->self_seq++;
    m.bytes.assign(data.begin(), data.end());
    st_->local_queue.push_back(std::move(m));
    st_->metrics.payload_bytes_copied += data.size();
    st_->metrics.eager_bytes += data.size();
    return UINT64_MAX;
  }

  std::uint64_t send_shared(int dst, int tag, SharedBuf& buf) {
    if (buf.state() != SharedBuf::State::Owned) raise(Errc::ContractViolation, "sending a SharedBuf this rank does not own");
    check_peer(dst);
    if (dst == rank() || backend() == Backend::CopyBaseline) return send_bytes(dst, tag, buf.cdata());
    ++st_->metrics.messages_sent;
    st_->metrics.rendezvous_bytes += buf.size();
    EntryFields f;
    f.src = static_cast<std::uint32_t>(rank());
    f.tag = tag;
    f.kind = PayloadKind::Rendezvous;
    f.payload_len = buf.size();
    f.region_id = buf.region_id();
    f.data_off = buf.offset();
    f.flags = detail::kFlagGuarded;
    st_->heap.mark_in_flight(buf.region_id());
    std::uint64_t ticket;
    try {
      ticket = enqueue(dst, f);
    } catch (...) {
      st_->heap.clear_in_flight(buf.region_id());
      throw;
    }
    buf.state_ = SharedBuf::State::InFlight;  // reference now belongs to the receiver
    return ticket;
  }

  /// Sends bytes [off, off+len) of `buf` to dst. PointerShared shares the
  /// region (one extra reference per slice); CopyBaseline stages a copy.
  void send_slice(int dst, int tag, const SharedBuf& buf, std::size_t off, std::size_t len) {
    if (len == 0 || backend() == Backend::CopyBaseline || dst == rank()) {
      send_bytes(dst, tag, buf.cdata().subspan(off, len));
      return;
    }
    ++st_->metrics.messages_sent;
    st_->metrics.rendezvous_bytes += len;
    EntryFields f;
    f.src = static_cast<std::uint32_t>(rank());
    f.tag = tag;
    f.kind = PayloadKind::Rendezvous;
    f.payload_len = len;
    f.region_id = buf.region_id();
    f.data_off = SegOffset{buf.offset().value + off};
    f.flags = detail::kFlagGuarded;
    st_->heap.incref(buf.region_id());
    st_->heap.mark_in_flight(buf.region_id());
    try {
      enqueue(dst, f);
    } catch (...) {
      st_->heap.clear_in_flight(buf.region_id());
      st_->heap.decref(buf.region_id());
      throw;
    }
  }

  Message slice_message(const SharedBuf& buf, std::size_t off, std::size_t len) {
    Message m;
    m.info = MessageInfo{rank(), detail::kTagAlltoallv, len, 0};
    if (len == 0) return m;
    if (backend() == Backend::PointerShared) {
      st_->heap.incref(buf.region_id());
      m.buf = SharedBuf(&st_->heap, buf.region_id(), SegOffset{buf.offset().value + off}, len, SharedBuf::State::Owned);
    } else {
      m.buf = alloc(len);
      copy_counted(m.buf.data().data(), buf.cdata().data() + off, len);
    }
    return m;
  }

  Request register_isend(int dst, int tag, std::size_t len, std::uint64_t ticket) {
    const auto id = st_->next_request++;
    detail::RequestState r{detail::ReqOp::ISend};
    r.peer = dst;
    r.tag = tag;
    r.ticket = ticket;
    r.info = MessageInfo{dst, tag, len, 0};
    r.local = ticket == UINT64_MAX;
    r.complete = r.local;
    auto& stored = st_->requests.emplace(id, r).first->second;
    if (st_->opts.isend_barrier && !stored.complete) {
      // Synchronous wrapping: confirm delivery before isend returns.
      auto& q = st_->queues[static_cast<std::size_t>(dst)];
      poll_wait(
          [&] {
            progress_pending();
            return q.consumed(ticket);
          },
          st_->opts.policy, Clock::now() + st_->opts.timeout);
      stored.complete = true;
    }
    return Request{id};
  }

  std::optional<Found> find(Match m) {
    for (std::size_t i = 0; i < st_->local_queue.size(); ++i) {
      const auto& l = st_->local_queue[i];
      if (m.accepts(static_cast<std::uint32_t>(l.src), l.tag)) return Found{true, i, {}};
    }
    if (auto h = st_->queues[static_cast<std::size_t>(rank())].poll(m)) return Found{false, 0, *h};
    return std::nullopt;
  }

  std::size_t found_length(const Found& f) const {
    if (f.self) return st_->local_queue[f.self_index].size();
    return st_->queues[static_cast<std::size_t>(rank())].entry(f.handle).payload_len;
  }

  static bool overlaps(Match a, Match b) noexcept {
    const bool src = a.src == kAnySource || b.src == kAnySource || a.src == b.src;
    const bool tag = (a.tag == kAnyTag && b.tag >= 0) || (b.tag == kAnyTag && a.tag >= 0) || a.tag == b.tag;
    return src && tag;
  }

  std::pair<int, int> found_envelope(const Found& f) const {
    if (f.self) return {st_->local_queue[f.self_index].src, st_->local_queue[f.self_index].tag};
    const auto& e = st_->queues[static_cast<std::size_t>(rank())].entry(f.handle);
    return {static_cast<int>(e.src), e.tag};
  }

  /// A match for a blocking receive, leaving alone messages that an
  /// earlier-posted irecv is entitled to.
  std::optional<Found> find_unclaimed(Match m) {
    progress_pending();
    auto f = find(m);
    if (!f) return std::nullopt;
    const auto [src, tag] = found_envelope(*f);
    for (auto id : st_->pending_recvs) {
      const auto& r = st_->requests.at(id);
      if (Match{r.peer, r.tag}.accepts(static_cast<std::uint32_t>(src), tag)) return std::nullopt;
    }
    return f;
  }

  Found wait_match(Match m) {
    if (auto f = find_unclaimed(m)) return *f;
    std::optional<Found> got;
    auto& q = st_->queues[static_cast<std::size_t>(rank())];
    poll_wait(
        [&] {
          got = find_unclaimed(m);
          return got.has_value();
        },
        st_->opts.policy, Clock::now() + st_->opts.timeout, [&] { return q.tail(); });
    return *got;
  }

  /// When our own ring is full, moves its READY entries (in ticket order) to
  /// the local queue so senders blocked on us can proceed. Per-source order
  /// is kept: a source's later entry can only be READY once its earlier ones are.
  void drain_if_full() {
    auto& q = st_->queues[static_cast<std::size_t>(rank())];
    const std::uint64_t h = q.head(), t = q.tail();
    if (t - h < q.capacity()) return;
    for (std::uint64_t i = h; i != t; ++i) {
      const auto& e = q.slot(i);
      if (e.word.load(std::memory_order_acquire) != status_word(i, EntryStatus::Ready)) continue;
      detail::LocalMessage m;
      m.src = static_cast<int>(e.src);
      m.tag = e.tag;
      m.seq = e.seq;
      if (static_cast<PayloadKind>(e.kind) == PayloadKind::Eager) {
        m.bytes.assign(e.inline_data, e.inline_data + e.payload_len);
      } else {
        m.region_id = e.region_id;
        m.data_off = SegOffset{e.data_off};
        m.len = e.payload_len;
        m.guarded = (e.flags & detail::kFlagGuarded) != 0;
      }
      st_->local_queue.push_back(std::move(m));
      q.complete(EntryHandle{i});
    }
  }

  /// Completes pending irecvs, in posting order, whose message has arrived.
  void progress_pending() {
    drain_if_full();
    auto& pend = st_->pending_recvs;
    if (pend.empty()) return;
    // Messages keep arriving during the scan, so once a request finds
    // nothing, later requests that could match the same message wait for
    // the next pass; otherwise they could overtake it.
    std::vector<Match> blocked;
    for (std::size_t i = 0; i < pend.size();) {
      auto& r = st_->requests.at(pend[i]);
      const Match m{r.peer, r.tag};
      const bool shadowed = std::any_of(blocked.begin(), blocked.end(), [&](Match b) { return overlaps(b, m); });
      auto f = shadowed ? std::nullopt : find(m);
      if (!f) {
        blocked.push_back(m);
        ++i;
        continue;
      }
      r.info = consume_into(*f, r.dest);
      r.complete = true;
      pend.erase(pend.begin() + static_cast<std::ptrdiff_t>(i));
    }
  }

  MessageInfo consume_into(const Found& f, std::span<std::byte> dest) {
    if (f.self) {
      auto& m = st_->local_queue[f.self_index];
      if (m.size() > dest.size())
        raise(Errc::TruncationError, "message of " + std::to_string(m.size()) + " bytes, buffer of " +
                                         std::to_string(dest.size()));
      MessageInfo info{m.src, m.tag, m.size(), m.seq};
      if (m.region_id != 0) {
        copy_counted(dest.data(), st_->seg.base() + m.data_off.value, m.len);
        if (m.guarded) st_->heap.clear_in_flight(m.region_id);
        st_->heap.decref(m.region_id);
      } else {
        std::copy(m.bytes.begin(), m.bytes.end(), dest.begin());
      }
      st_->local_queue.erase(st_->local_queue.begin() + static_cast<std::ptrdiff_t>(f.self_index));
      ++st_->metrics.messages_received;
      return info;
    }
    auto& q = st_->queues[static_cast<std::size_t>(rank())];
    const auto& e = q.entry(f.handle);
    MessageInfo info{static_cast<int>(e.src), e.tag, e.payload_len, e.seq};
    if (e.payload_len > dest.size())
      raise(Errc::TruncationError, "message of " + std::to_string(e.payload_len) + " bytes, buffer of " +
                                       std::to_string(dest.size()));
    if (static_cast<PayloadKind>(e.kind) == PayloadKind::Eager) {
      if (e.payload_len > 0) std::memcpy(dest.data(), e.inline_data, e.payload_len);
      q.complete(f.handle);
    } else {
      const RegionId id = e.region_id;
      const bool guarded = (e.flags & detail::kFlagGuarded) != 0;
      copy_counted(dest.data(), st_->seg.base() + e.data_off, e.payload_len);
      q.complete(f.handle);
      if (guarded) st_->heap.clear_in_flight(id);
      st_->heap.decref(id);
    }
    ++st_->metrics.messages_received;
    return info;
  }

  Message consume_ref(const Found& f) {
    Message m;
    if (f.self) {
      auto& s = st_->local_queue[f.self_index];
      m.info = MessageInfo{s.src, s.tag, s.size(), s.seq};
      if (s.region_id != 0)
        m.buf = take_region(s.region_id, s.data_off, s.len, s.guarded);
      else
        m.inline_bytes = std::move(s.bytes);
      st_->local_queue.erase(st_->local_queue.begin() + static_cast<std::ptrdiff_t>(f.self_index));
      ++st_->metrics.messages_received;
      return m;
    }
    auto& q = st_->queues[static_cast<std::size_t>(rank())];
    const auto& e = q.entry(f.handle);
    m.info = MessageInfo{static_cast<int>(e.src), e.tag, e.payload_len, e.seq};
    if (static_cast<PayloadKind>(e.kind) == PayloadKind::Eager) {
      m.inline_bytes.assign(e.inline_data, e.inline_data + e.payload_len);
      q.complete(f.handle);
    } else {
      const RegionId id = e.region_id;
      const SegOffset off{e.data_off};
      const std::size_t len = e.payload_len;
      const bool guarded = (e.flags & detail::kFlagGuarded) != 0;
      q.complete(f.handle);
      m.buf = take_region(id, off, len, guarded);
    }
    ++st_->metrics.messages_received;
    return m;
  }

  /// Takes the receiver's reference to a rendezvous region: shared as is on
  /// PointerShared, copied into a fresh region on CopyBaseline.
  SharedBuf take_region(RegionId id, SegOffset off, std::size_t len, bool guarded) {
    if (guarded) st_->heap.clear_in_flight(id);
    if (backend() == Backend::PointerShared) return SharedBuf(&st_->heap, id, off, len, SharedBuf::State::Owned);
    SharedBuf b;
    try {
      b = alloc(len);
      copy_counted(b.data().data(), st_->seg.base() + off.value, len);
    } catch (...) {
      st_->heap.decref(id);
      throw;
    }
    st_->heap.decref(id);
    return b;
  }

  template <Reducible T>
  void reduce_impl(ReduceOp op, std::span<T> data, int root, bool all) {
    check_root(root);
    auto& h = st_->seg.header();
    const auto n = static_cast<std::size_t>(size());
    const std::size_t bytes = data.size_bytes();
    auto mine = publish(h.board[rank()], std::as_bytes(data));
    barrier_internal();

    std::optional<Allocation> result;
    bool mismatch = false;
    if (rank() == root) {
      for (std::size_t r = 0; r < n; ++r)
        if (h.board[r].length != bytes) mismatch = true;
      if (!mismatch && bytes > 0) {
        result = alloc_region(bytes, static_cast<std::uint32_t>(root));
        T* acc = reinterpret_cast<T*>(st_->seg.base() + result->offset.value);
        const T* first = reinterpret_cast<const T*>(st_->seg.base() + h.board[0].offset);
        std::copy(first, first + data.size(), acc);
        for (std::size_t r = 1; r < n; ++r) {
          const T* c = reinterpret_cast<const T*>(st_->seg.base() + h.board[r].offset);
          for (std::size_t i = 0; i < data.size(); ++i) acc[i] = combine(op, acc[i], c[i]);
        }
        h.board[root].aux = result->offset.value;
      }
    }
    barrier_internal();
    const std::uint64_t result_off = h.board[root].aux;
    if (result_off == 0 && bytes > 0) mismatch = true;
    if (!mismatch && bytes > 0 && (all || rank() == root))
      copy_counted(data.data(), st_->seg.base() + result_off, bytes);
    barrier_internal();
    if (mine) st_->heap.decref(mine->region_id);
    if (result) st_->heap.decref(result->region_id);
    if (mismatch) raise(Errc::MismatchedCounts, "reduce contributions differ in length");
  }

  template <class T>
  static T combine(ReduceOp op, T a, T b) {
    switch (op) {
      case ReduceOp::Sum: return a + b;
      case ReduceOp::Max: return std::max(a, b);
      case ReduceOp::Min: return std::min(a, b);
    }
    return a;
  }

  std::unique_ptr<detail::CommState> st_;
};

}  // namespace shmpi

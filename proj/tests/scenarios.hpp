#pragma once

// Multi-process scenarios shared by the unit suites and the acceptance run.
// Each returns an Outcome instead of asserting so both harnesses can report.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "shmpi/bench/common.hpp"
#include "shmpi/comm.hpp"
#include "shmpi/launcher.hpp"
#include "shmpi/msgqueue.hpp"
#include "shmpi/shm_alloc.hpp"
#include "test_util.hpp"

namespace shmpi::testing {

struct Outcome {
  bool ok = true;
  std::string detail;

  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
};

inline Outcome run_guarded(const std::function<void(Outcome&)>& fn) {
  Outcome o;
  try {
    fn(o);
  } catch (const RankError& e) {
    o.fail(std::string(e.what()) + " [" + std::string(to_string(e.code())) + "]");
  } catch (const std::exception& e) {
    o.fail(e.what());
  }
  return o;
}

// ---------------------------------------------------------------------------
// Seeded traffic traces

struct TraceMsg {
  int src = 0;
  int dst = 0;
  int tag = 0;
  std::size_t len = 0;
  bool shared_send = false;  // send from a SharedBuf instead of local bytes
  bool by_ref_recv = false;  // receive with recv_ref instead of copy-out
};

/// Rounds of messages; within a round every rank sends its messages, then
/// receives its own in a seeded order over (src, tag) keys.
struct Trace {
  int ranks = 4;
  std::vector<std::vector<TraceMsg>> rounds;
};

inline std::byte payload_byte(std::uint64_t seed, std::size_t msg, std::size_t i) {
  return static_cast<std::byte>(bench::hash2(seed ^ (msg * 0x9E37), i / 8) >> (8 * (i % 8)));
}

inline Trace make_trace(std::uint64_t seed, int ranks, int n_rounds, int per_rank_per_round,
                        std::size_t max_len = std::size_t{1} << 20) {
  std::mt19937_64 rng(seed);
  Trace t;
  t.ranks = ranks;
  const double log_max = std::log2(static_cast<double>(max_len));
  for (int r = 0; r < n_rounds; ++r) {
    std::vector<TraceMsg> round;
    for (int src = 0; src < ranks; ++src)
      for (int k = 0; k < per_rank_per_round; ++k) {
        TraceMsg m;
        m.src = src;
        m.dst = static_cast<int>(rng() % static_cast<std::uint64_t>(ranks - 1));
        if (m.dst >= src) ++m.dst;
        m.tag = static_cast<int>(rng() % 4);
        const double e = std::uniform_real_distribution<double>(0, log_max)(rng);
        m.len = std::max<std::size_t>(1, std::min<std::size_t>(max_len, static_cast<std::size_t>(std::exp2(e))));
        m.shared_send = rng() % 2 == 0;
        m.by_ref_recv = rng() % 2 == 0;
        round.push_back(m);
      }
    t.rounds.push_back(std::move(round));
  }
  return t;
}

/// Rank body: plays the trace and returns the receive log as
/// [src, tag, len, seq, fnv(bytes)] records in matched order, plus a flag
/// telling whether every payload equalled the generated bytes.
inline nlohmann::json play_trace(Communicator& comm, const Trace& t, std::uint64_t seed) {
  const int me = comm.rank();
  nlohmann::json log = nlohmann::json::array();
  bool content_ok = true;
  std::size_t global_index = 0;
  std::mt19937_64 order_rng(seed * 31 + static_cast<std::uint64_t>(me));
  for (const auto& round : t.rounds) {
    std::map<std::pair<int, int>, std::vector<std::size_t>> incoming;  // (src, tag) -> global ids
    for (std::size_t i = 0; i < round.size(); ++i) {
      const auto& m = round[i];
      const std::size_t id = global_index + i;
      if (m.dst == me) incoming[{m.src, m.tag}].push_back(id);
      if (m.src != me) continue;
      if (m.shared_send) {
        SharedBuf b = comm.alloc(m.len);
        auto d = b.data();
        for (std::size_t k = 0; k < m.len; ++k) d[k] = payload_byte(seed, id, k);
        comm.send(m.dst, m.tag, b);
      } else {
        std::vector<std::byte> d(m.len);
        for (std::size_t k = 0; k < m.len; ++k) d[k] = payload_byte(seed, id, k);
        comm.send(m.dst, m.tag, d);
      }
    }
    // Receive in a seeded interleaving of the (src, tag) streams.
    std::vector<std::pair<int, int>> order;
    for (const auto& [key, ids] : incoming) order.insert(order.end(), ids.size(), key);
    std::shuffle(order.begin(), order.end(), order_rng);
    std::map<std::pair<int, int>, std::size_t> next;
    for (const auto& key : order) {
      const std::size_t id = incoming[key][next[key]++];
      const auto& m = round[id - global_index];
      std::vector<std::byte> got;
      MessageInfo info;
      if (m.by_ref_recv) {
        Message msg = comm.recv_ref(key.first, key.second);
        info = msg.info;
        auto b = msg.bytes();
        got.assign(b.begin(), b.end());
      } else {
        got.resize(m.len);
        info = comm.recv(key.first, key.second, got);
        got.resize(info.len);
      }
      if (got.size() != m.len) content_ok = false;
      for (std::size_t k = 0; k < got.size() && content_ok; ++k)
        if (got[k] != payload_byte(seed, id, k)) content_ok = false;
      bench::Fnv1a h;
      h.add(got);
      log.push_back({info.src, info.tag, info.len, info.seq, h.value()});
    }
    global_index += round.size();
    comm.barrier();
  }
  return {{"log", log}, {"content_ok", content_ok}};
}

/// Runs one trace under `backend` and returns each rank's receive report.
inline std::vector<nlohmann::json> run_trace(const Trace& t, std::uint64_t seed, Backend backend) {
  JobConfig c;
  c.n_ranks = t.ranks;
  c.backend = backend;
  c.seg_size = std::size_t{128} << 20;
  c.timeout = std::chrono::seconds(120);
  auto rep = launch(c, RankFn([&t, seed](int) {
                      auto comm = Communicator::init_from_env();
                      comm.report_extra()["trace"] = play_trace(comm, t, seed);
                      comm.finalize();
                      return 0;
                    }));
  std::vector<nlohmann::json> out;
  for (const auto& r : rep.summary->per_rank) out.push_back(r.at("trace"));
  return out;
}

/// Both backends must deliver identical logs and correct bytes.
inline Outcome trace_equivalence(std::uint64_t seed, int ranks, int rounds, int per_round) {
  return run_guarded([&](Outcome& o) {
    const Trace t = make_trace(seed, ranks, rounds, per_round);
    auto a = run_trace(t, seed, Backend::PointerShared);
    auto b = run_trace(t, seed, Backend::CopyBaseline);
    for (int r = 0; r < ranks; ++r) {
      if (!a[r].at("content_ok").get<bool>()) o.fail("pointer backend corrupted a payload at rank " + std::to_string(r));
      if (!b[r].at("content_ok").get<bool>()) o.fail("copy backend corrupted a payload at rank " + std::to_string(r));
      if (a[r].at("log") != b[r].at("log")) o.fail("receive logs differ at rank " + std::to_string(r));
    }
  });
}

// ---------------------------------------------------------------------------
// Copy accounting

struct CopyCounts {
  std::uint64_t pointer = 0;
  std::uint64_t copy = 0;
};

/// Rank 0 sends `count` messages of `len` bytes to rank 1; returns the
/// payload_bytes_copied delta summed over both ranks for each backend.
/// Rendezvous messages go SharedBuf -> recv_ref; eager ones bytes -> recv.
inline CopyCounts copy_accounting(int count, std::size_t len, bool shared) {
  CopyCounts out;
  for (auto backend : {Backend::PointerShared, Backend::CopyBaseline}) {
    JobConfig c;
    c.n_ranks = 2;
    c.backend = backend;
    c.seg_size = std::size_t{256} << 20;
    auto rep = launch(c, RankFn([=](int) {
                        auto comm = Communicator::init_from_env();
                        const auto before = comm.metrics().payload_bytes_copied;
                        std::vector<std::byte> bytes(len, std::byte{7});
                        for (int i = 0; i < count; ++i) {
                          if (comm.rank() == 0) {
                            if (shared) {
                              SharedBuf b = comm.alloc(len);
                              std::fill(b.data().begin(), b.data().end(), std::byte{7});
                              comm.send(1, 0, b);
                            } else {
                              comm.send(1, 0, bytes);
                            }
                          } else if (shared) {
                            Message m = comm.recv_ref(0, 0);
                            RANK_CHECK(m.bytes().size() == len);
                          } else {
                            comm.recv(0, 0, bytes);
                          }
                        }
                        comm.barrier();
                        comm.report_extra()["delta"] = comm.metrics().payload_bytes_copied - before;
                        comm.finalize();
                        return 0;
                      }));
    std::uint64_t total = 0;
    for (const auto& r : rep.summary->per_rank) total += r.at("delta").get<std::uint64_t>();
    (backend == Backend::PointerShared ? out.pointer : out.copy) = total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Queue scenarios (raw MessageQueue over a segment, no Communicator)

/// `producers` ranks enqueue `per_producer` entries each into rank 0's
/// queue; rank 0 drains. Checks reservation uniqueness (every (src, i)
/// exactly once), per-producer seq order, and, from a sampler thread, that
/// every slot's status word only moves forward through the phase cycle.
inline Outcome mpsc_stress(int producers, int per_producer, std::uint32_t capacity) {
  return run_guarded([&](Outcome&) {
    run_ranks(
        producers + 1,
        [=](int rank) {
          auto seg = SharedSegment::attach(job_segment_name(), rank);
          MessageQueue q(seg, 0);
          if (rank != 0) {
            for (int i = 0; i < per_producer; ++i) {
              std::uint64_t payload[2] = {static_cast<std::uint64_t>(rank), static_cast<std::uint64_t>(i)};
              EntryFields f;
              f.src = static_cast<std::uint32_t>(rank);
              f.tag = 0;
              f.payload_len = sizeof payload;
              f.inline_data = std::as_bytes(std::span(payload));
              while (!q.try_enqueue(f)) std::this_thread::yield();
            }
            return;
          }
          std::atomic<bool> stop{false};
          std::atomic<bool> status_ok{true};
          std::thread sampler([&] {
            std::vector<std::uint64_t> last(q.capacity());
            for (std::uint32_t s = 0; s < q.capacity(); ++s) last[s] = status_word(s, EntryStatus::Empty);
            while (!stop.load(std::memory_order_relaxed)) {
              for (std::uint32_t s = 0; s < q.capacity(); ++s) {
                const auto w = q.slot(s).word.load(std::memory_order_acquire);
                // Word must stay on this slot's ticket lattice and never go back.
                if (w < last[s] || (ticket_of(w) % q.capacity()) != s) status_ok = false;
                last[s] = w;
              }
            }
          });
          std::vector<std::vector<std::uint64_t>> seen(static_cast<std::size_t>(producers + 1));
          std::vector<std::int64_t> last_seq(static_cast<std::size_t>(producers + 1), -1);
          const int total = producers * per_producer;
          bool order_ok = true;
          for (int got = 0; got < total;) {
            auto h = q.poll(Match{});
            if (!h) {
              std::this_thread::yield();
              continue;
            }
            const auto& e = q.entry(*h);
            std::uint64_t payload[2];
            std::memcpy(payload, e.inline_data, sizeof payload);
            if (payload[0] != e.src) order_ok = false;
            if (static_cast<std::int64_t>(e.seq) <= last_seq[e.src]) order_ok = false;
            last_seq[e.src] = static_cast<std::int64_t>(e.seq);
            seen[e.src].push_back(payload[1]);
            q.complete(*h);
            ++got;
          }
          stop = true;
          sampler.join();
          RANK_CHECK(order_ok);
          RANK_CHECK(status_ok.load());
          for (int p = 1; p <= producers; ++p) {
            const auto& v = seen[static_cast<std::size_t>(p)];
            RANK_CHECK(v.size() == static_cast<std::size_t>(per_producer));
            for (int i = 0; i < per_producer; ++i) RANK_CHECK(v[static_cast<std::size_t>(i)] == static_cast<std::uint64_t>(i));
          }
          RANK_CHECK(q.head() == q.tail());
        },
        [=](JobConfig& c) { c.queue_capacity = capacity; });
  });
}

/// Per-(src, tag) FIFO through the Communicator with several tags
/// interleaved: the receiver polls tags in a seeded order and must see
/// strictly increasing seq and payload indices on each stream.
inline Outcome per_pair_fifo(int senders, int per_tag, int tags) {
  return run_guarded([&](Outcome&) {
    run_comm(senders + 1, [=](Communicator& comm) {
      if (comm.rank() != 0) {
        for (int i = 0; i < per_tag; ++i)
          for (int t = 0; t < tags; ++t) {
            const std::int64_t v = i;
            comm.send(0, t, std::as_bytes(std::span(&v, 1)));
          }
        return;
      }
      std::vector<std::pair<int, int>> order;
      for (int s = 1; s <= senders; ++s)
        for (int t = 0; t < tags; ++t) order.insert(order.end(), static_cast<std::size_t>(per_tag), {s, t});
      std::mt19937 rng(5);
      std::shuffle(order.begin(), order.end(), rng);
      std::map<std::pair<int, int>, std::int64_t> last_v;
      std::map<std::pair<int, int>, std::int64_t> last_seq;
      for (const auto& [s, t] : order) {
        std::int64_t v = -1;
        auto info = comm.recv(s, t, std::as_writable_bytes(std::span(&v, 1)));
        auto key = std::make_pair(s, t);
        RANK_CHECK(!last_v.count(key) || v == last_v[key] + 1);
        RANK_CHECK(!last_seq.count(key) || static_cast<std::int64_t>(info.seq) > last_seq[key]);
        last_v[key] = v;
        last_seq[key] = static_cast<std::int64_t>(info.seq);
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Sync scenarios

/// Scratch bytes at the far end of the heap; the allocator keeps its first
/// free-block header at the start, and these scenarios never allocate.
inline std::byte* scratch(const SharedSegment& seg) {
  const auto& h = seg.header();
  return seg.base() + h.heap_offset + h.heap_size - 65536;
}

/// Each rank publishes the generation it is entering; after exiting
/// generation g no peer may be behind g or ahead of g + 1.
inline Outcome barrier_lockstep(int ranks, int generations) {
  return run_guarded([&](Outcome&) {
    run_ranks(ranks, [=](int rank) {
      auto seg = SharedSegment::attach(job_segment_name(), rank);
      auto& h = seg.header();
      auto* entered = reinterpret_cast<std::atomic<std::int64_t>*>(scratch(seg));
      BarrierParticipant bp(h.barrier);
      const std::uint64_t g0 = h.barrier.generation.load();
      for (int g = 0; g < generations; ++g) {
        entered[rank].store(g, std::memory_order_release);
        const auto reached = bp.wait(h.barrier, static_cast<std::uint32_t>(ranks), PollingPolicy{}, std::chrono::seconds(30));
        RANK_CHECK(reached == g0 + static_cast<std::uint64_t>(g) + 1);
        for (int p = 0; p < ranks; ++p) {
          const auto e = entered[p].load(std::memory_order_acquire);
          RANK_CHECK(e >= g && e <= g + 1);
        }
      }
    });
  });
}

/// Every rank writes its id into a shared array before one barrier; after
/// it every rank must read all ids.
inline Outcome barrier_fencing(int ranks) {
  return run_guarded([&](Outcome&) {
    run_ranks(ranks, [=](int rank) {
      auto seg = SharedSegment::attach(job_segment_name(), rank);
      auto& h = seg.header();
      auto* ids = reinterpret_cast<std::int64_t*>(scratch(seg) + 4096);
      BarrierParticipant bp(h.barrier);
      ids[rank] = rank + 100;
      bp.wait(h.barrier, static_cast<std::uint32_t>(ranks), PollingPolicy{}, std::chrono::seconds(30));
      for (int p = 0; p < ranks; ++p) RANK_CHECK(ids[p] == p + 100);
    });
  });
}

/// `ranks` processes each add 1 to a plain shared counter `increments`
/// times under the metadata lock; a canary detects overlapping sections.
inline Outcome lock_counting(int ranks, int increments) {
  return run_guarded([&](Outcome&) {
    run_ranks(ranks, [=](int rank) {
      auto seg = SharedSegment::attach(job_segment_name(), rank);
      auto& h = seg.header();
      auto* counter = reinterpret_cast<volatile std::uint64_t*>(scratch(seg));
      auto* canary = reinterpret_cast<volatile std::int64_t*>(scratch(seg) + 64);
      BarrierParticipant bp(h.barrier);
      const auto total = static_cast<std::uint64_t>(ranks) * static_cast<std::uint64_t>(increments);
      const auto before = h.metalock.acquisitions.load();
      bp.wait(h.barrier, static_cast<std::uint32_t>(ranks), PollingPolicy{}, std::chrono::seconds(30));
      const auto me = static_cast<std::uint32_t>(rank);
      for (int i = 0; i < increments; ++i) {
        h.metalock.lock(me, PollingPolicy{});
        RANK_CHECK(*canary == 0);
        *canary = rank + 1;
        *counter = *counter + 1;
        RANK_CHECK(*canary == rank + 1);
        *canary = 0;
        h.metalock.unlock(me);
      }
      bp.wait(h.barrier, static_cast<std::uint32_t>(ranks), PollingPolicy{}, std::chrono::seconds(30));
      if (rank == 0) {
        if (*counter != total) throw std::runtime_error("counter " + std::to_string(*counter) + " expected " + std::to_string(total));
        RANK_CHECK(h.metalock.acquisitions.load() - before >= total);
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Allocator stress

/// `ranks` processes run `ops_per_rank` random operations against a shared
/// table of region ids: allocate-and-publish, acquire (incref) a published
/// region, release a held reference. Every region carries its own id as a
/// canary, checked on acquire and on release; a region freed while someone
/// still holds it would be reused and fail the check. Ends with all
/// references dropped; bytes_in_use must be 0.
inline Outcome alloc_stress(int ranks, int ops_per_rank, std::uint64_t seed) {
  return run_guarded([&](Outcome&) {
    run_ranks(
        ranks,
        [=](int rank) {
          auto seg = SharedSegment::attach(job_segment_name(), rank);
          auto& h = seg.header();
          SharedHeap heap(seg, static_cast<std::uint32_t>(rank));
          BarrierParticipant bp(h.barrier);
          auto sync = [&] { bp.wait(h.barrier, static_cast<std::uint32_t>(ranks), PollingPolicy{}, std::chrono::seconds(60)); };
          constexpr std::size_t kSlots = 256;
          if (rank == 0) {
            auto t = heap.malloc(kSlots * sizeof(std::uint64_t));
            std::memset(seg.base() + t.offset.value, 0, kSlots * sizeof(std::uint64_t));
            h.board[0].region_id = t.region_id;
            h.board[0].offset = t.offset.value;
          }
          sync();
          auto* table = reinterpret_cast<std::atomic<std::uint64_t>*>(seg.base() + h.board[0].offset);
          auto canary_ok = [&](RegionId id) {
            std::uint64_t v;
            std::memcpy(&v, heap.bytes(id).data(), sizeof v);
            return v == id;
          };
          std::mt19937_64 rng(seed + static_cast<std::uint64_t>(rank));
          std::vector<RegionId> held;
          for (int op = 0; op < ops_per_rank; ++op) {
            const auto kind = rng() % 3;
            if (kind == 0) {
              const std::size_t len = 8 + rng() % 8192;
              Allocation a;
              try {
                a = heap.malloc(len);
              } catch (const Error& e) {
                RANK_CHECK(e.code() == Errc::OutOfSharedMemory);
                continue;
              }
              std::memcpy(seg.base() + a.offset.value, &a.region_id, sizeof a.region_id);
              // The table owns this reference now; drop the one it displaced.
              const auto old = table[rng() % kSlots].exchange(a.region_id, std::memory_order_acq_rel);
              if (old != 0) heap.decref(old);
            } else if (kind == 1) {
              const RegionId id = table[rng() % kSlots].load(std::memory_order_acquire);
              if (id == 0) continue;
              try {
                heap.incref(id);
              } catch (const Error& e) {
                // Lost a race with the displacing rank: the region is gone.
                RANK_CHECK(e.code() == Errc::RegionFreed || e.code() == Errc::NoSuchRegion);
                continue;
              }
              RANK_CHECK(canary_ok(id));
              held.push_back(id);
            } else if (!held.empty()) {
              const auto i = rng() % held.size();
              RANK_CHECK(canary_ok(held[i]));
              heap.decref(held[i]);
              held.erase(held.begin() + static_cast<std::ptrdiff_t>(i));
            }
          }
          for (auto id : held) {
            RANK_CHECK(canary_ok(id));
            heap.decref(id);
          }
          sync();
          if (rank == 0) {
            for (std::size_t s = 0; s < kSlots; ++s)
              if (auto id = table[s].exchange(0); id != 0) heap.decref(id);
            heap.decref(h.board[0].region_id);
            const auto st = heap.stats();
            RANK_CHECK(st.bytes_in_use == 0);
            RANK_CHECK(st.live_regions == 0);
            RANK_CHECK(st.free_bytes == st.heap_size);
            RANK_CHECK(heap.free_list_well_formed());
          }
        },
        [](JobConfig& c) { c.seg_size = std::size_t{64} << 20; });
  });
}

// ---------------------------------------------------------------------------
// Deadlock freedom

/// Two ranks each post `count` blocking sends of `len` bytes to the other
/// before receiving anything.
inline Outcome mutual_send(Backend backend, int count, std::size_t len, std::uint32_t queue_cap) {
  return run_guarded([&](Outcome&) {
    run_comm(
        2,
        [=](Communicator& comm) {
          const int peer = 1 - comm.rank();
          std::vector<std::byte> out(len, static_cast<std::byte>(comm.rank() + 1)), in(len);
          for (int i = 0; i < count; ++i) comm.send(peer, 0, out);
          for (int i = 0; i < count; ++i) {
            comm.recv(peer, 0, in);
            RANK_CHECK(in.empty() || in[0] == static_cast<std::byte>(peer + 1));
          }
        },
        [=](JobConfig& c) {
          c.backend = backend;
          c.queue_capacity = queue_cap;
          c.seg_size = std::size_t{256} << 20;
          c.barrier_timeout_ms = 20000;
          c.timeout = std::chrono::seconds(60);
        });
  });
}

}  // namespace shmpi::testing

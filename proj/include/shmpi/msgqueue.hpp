#pragma once

// Per-rank descriptor rings. Any rank may enqueue into any queue (MPSC); only
// the owning rank polls and completes. A slot's status word only increases
// (see status_word), so producers, the consumer and observers can all reason
// about a slot's lap without extra fields.

#include <atomic>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>

#include "shmpi/error.hpp"
#include "shmpi/layout.hpp"
#include "shmpi/segment.hpp"

namespace shmpi {

inline constexpr int kAnySource = -1;
inline constexpr int kAnyTag = -1;

/// What a producer writes into a slot.
struct EntryFields {
  std::uint32_t src = 0;
  std::int32_t tag = 0;
  PayloadKind kind = PayloadKind::Eager;
  std::uint64_t payload_len = 0;
  std::span<const std::byte> inline_data;  // Eager
  std::uint64_t region_id = 0;             // Rendezvous
  SegOffset data_off;                      // Rendezvous
  std::uint32_t flags = 0;
};

struct EnqueueResult {
  std::uint64_t ticket = 0;
  std::uint64_t seq = 0;
};

struct Match {
  int src = kAnySource;
  int tag = kAnyTag;

  /// ANY tag matches user tags only; negative tags are runtime-internal.
  bool accepts(std::uint32_t s, std::int32_t t) const noexcept {
    if (src != kAnySource && static_cast<std::uint32_t>(src) != s) return false;
    if (tag == kAnyTag) return t >= 0;
    return tag == t;
  }
};

/// Handle on a READY entry returned by poll(): its ticket.
struct EntryHandle {
  std::uint64_t ticket = 0;
};

class MessageQueue {
 public:
  MessageQueue() = default;
  MessageQueue(const SharedSegment& seg, std::uint32_t owner)
      : hdr_(seg.at<QueueHeader>(queue_offset(owner, seg.header().queue_capacity))),
        ring_(reinterpret_cast<std::byte*>(hdr_) + kQueueHeaderSize),
        mask_(hdr_->capacity - 1),
        eager_threshold_(seg.header().eager_threshold) {}

  std::uint32_t capacity() const noexcept { return hdr_->capacity; }
  std::uint32_t owner() const noexcept { return hdr_->owner; }
  std::uint64_t head() const noexcept { return hdr_->head.load(std::memory_order_acquire); }
  std::uint64_t tail() const noexcept { return hdr_->tail.load(std::memory_order_acquire); }

  QueueEntry& slot(std::uint64_t ticket) const noexcept {
    return *reinterpret_cast<QueueEntry*>(ring_ + (ticket & mask_) * kEntrySize);
  }

  /// Reserves a slot and publishes the entry, READY last. nullopt when full.
  std::optional<EnqueueResult> try_enqueue(const EntryFields& f) {
    check_fields(f);
    std::uint64_t t = hdr_->tail.load(std::memory_order_relaxed);
    for (;;) {
      const std::uint64_t h = hdr_->head.load(std::memory_order_acquire);
      if (t - h >= capacity()) return std::nullopt;
      if (hdr_->tail.compare_exchange_weak(t, t + 1, std::memory_order_acq_rel, std::memory_order_relaxed)) break;
    }
    auto& e = slot(t);
    // The consumer stores EMPTY for lap t before moving head past t - capacity,
    // and we observed that head, so the slot is ours.
    std::uint64_t expected = status_word(t, EntryStatus::Empty);
    if (!e.word.compare_exchange_strong(expected, status_word(t, EntryStatus::Writing), std::memory_order_acq_rel))
      raise(Errc::InvalidHandle, "slot for ticket " + std::to_string(t) + " not EMPTY");

    const std::uint64_t seq = hdr_->next_seq[f.src].fetch_add(1, std::memory_order_relaxed);
    e.src = f.src;
    e.tag = f.tag;
    e.seq = seq;
    e.kind = static_cast<std::uint32_t>(f.kind);
    e.flags = f.flags;
    e.payload_len = f.payload_len;
    if (f.kind == PayloadKind::Eager) {
      e.region_id = 0;
      e.data_off = 0;
      if (!f.inline_data.empty()) std::memcpy(e.inline_data, f.inline_data.data(), f.inline_data.size());
    } else {
      e.region_id = f.region_id;
      e.data_off = f.data_off.value;
    }
    e.word.store(status_word(t, EntryStatus::Ready), std::memory_order_release);
    return EnqueueResult{t, seq};
  }

  EnqueueResult enqueue(const EntryFields& f) {
    if (auto r = try_enqueue(f)) return *r;
    raise(Errc::QueueFull, "queue of rank " + std::to_string(owner()) + " is full");
  }

  /// Lowest-index READY entry accepted by `m`; does not consume.
  std::optional<EntryHandle> poll(Match m) const {
    const std::uint64_t h = hdr_->head.load(std::memory_order_relaxed);
    const std::uint64_t t = hdr_->tail.load(std::memory_order_acquire);
    for (std::uint64_t i = h; i != t; ++i) {
      const auto& e = slot(i);
      if (e.word.load(std::memory_order_acquire) != status_word(i, EntryStatus::Ready)) continue;
      if (m.accepts(e.src, e.tag)) return EntryHandle{i};
    }
    return std::nullopt;
  }

  const QueueEntry& entry(EntryHandle hd) const {
    const auto& e = slot(hd.ticket);
    if (e.word.load(std::memory_order_acquire) != status_word(hd.ticket, EntryStatus::Ready))
      raise(Errc::InvalidHandle, "ticket " + std::to_string(hd.ticket) + " is not READY");
    return e;
  }

  /// Marks the entry CONSUMED and retires the CONSUMED prefix at head.
  void complete(EntryHandle hd) {
    auto& e = slot(hd.ticket);
    std::uint64_t expected = status_word(hd.ticket, EntryStatus::Ready);
    if (!e.word.compare_exchange_strong(expected, status_word(hd.ticket, EntryStatus::Consumed),
                                        std::memory_order_acq_rel))
      raise(Errc::InvalidHandle, "ticket " + std::to_string(hd.ticket) + " is not READY");
    std::uint64_t h = hdr_->head.load(std::memory_order_relaxed);
    const std::uint64_t t = hdr_->tail.load(std::memory_order_acquire);
    while (h != t) {
      auto& s = slot(h);
      if (s.word.load(std::memory_order_acquire) != status_word(h, EntryStatus::Consumed)) break;
      s.word.store(status_word(h + capacity(), EntryStatus::Empty), std::memory_order_release);
      ++h;
      hdr_->head.store(h, std::memory_order_release);
    }
  }

  /// True once the entry for `ticket` has been CONSUMED (producer-side check).
  bool consumed(std::uint64_t ticket) const noexcept {
    return slot(ticket).word.load(std::memory_order_acquire) >= status_word(ticket, EntryStatus::Consumed);
  }

  std::uint64_t sequence_counter(std::uint32_t src) const noexcept {
    return hdr_->next_seq[src].load(std::memory_order_acquire);
  }

 private:
  void check_fields(const EntryFields& f) const {
    if (f.src >= kMaxRanks) raise(Errc::RankOutOfRange, "source rank out of range");
    if (f.kind == PayloadKind::Eager) {
      if (f.payload_len > eager_threshold_ || f.inline_data.size() != f.payload_len)
        raise(Errc::InvalidConfig, "eager payload exceeds threshold");
    } else if (f.data_off.is_null()) {
      raise(Errc::NullOffset, "rendezvous entry without data offset");
    }
  }

  QueueHeader* hdr_ = nullptr;
  std::byte* ring_ = nullptr;
  std::uint64_t mask_ = 0;
  std::uint32_t eager_threshold_ = 0;
};

}  // namespace shmpi

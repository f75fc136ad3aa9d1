#pragma once

// In-segment data layout. Every struct here lives inside the shared segment
// and is addressed by segment-relative offsets; see LAYOUT.md for the byte
// map. Field order is part of the on-segment format.

#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <string>

#include "shmpi/sync.hpp"

namespace shmpi {

inline constexpr std::uint32_t kSegmentMagic = 0x43584C4D;  // "CXLM"
inline constexpr std::uint32_t kLayoutVersion = 1;
inline constexpr std::uint32_t kMaxRanks = 64;
inline constexpr std::size_t kCacheLine = 64;
inline constexpr std::size_t kHeaderSize = 16384;
inline constexpr std::size_t kInlineCapacity = 256;
inline constexpr std::size_t kEntrySize = 512;
inline constexpr std::size_t kQueueHeaderSize = 1024;
inline constexpr std::size_t kRegionRowSize = 64;
inline constexpr std::size_t kMinHeap = std::size_t{1} << 20;
inline constexpr std::size_t kBlockGranularity = 64;
inline constexpr std::size_t kNameCapacity = 64;

static_assert(std::endian::native == std::endian::little, "segment layout is little-endian");

constexpr std::size_t round_up(std::size_t v, std::size_t a) noexcept { return (v + a - 1) / a * a; }

/// Segment-relative byte offset. 0 is the null offset.
struct SegOffset {
  std::uint64_t value = 0;

  constexpr bool is_null() const noexcept { return value == 0; }
  friend constexpr bool operator==(SegOffset, SegOffset) = default;
  friend constexpr auto operator<=>(SegOffset, SegOffset) = default;
};

struct SegmentConfig {
  std::string name;
  std::size_t total_size = std::size_t{256} << 20;
  std::uint32_t n_ranks = 1;
  std::uint32_t queue_capacity = 64;
  std::uint32_t eager_threshold = 256;
  /// Rows in the region metadata table; a power of two.
  std::uint32_t region_capacity = 65536;
};

// Pure layout arithmetic: [header | queues | region table | heap].

constexpr std::size_t queue_footprint(std::uint32_t capacity) noexcept {
  return kQueueHeaderSize + std::size_t{capacity} * kEntrySize;
}
constexpr std::size_t queues_offset() noexcept { return kHeaderSize; }
constexpr std::size_t queue_offset(std::uint32_t i, std::uint32_t capacity) noexcept {
  return queues_offset() + std::size_t{i} * queue_footprint(capacity);
}
constexpr std::size_t regions_offset(std::uint32_t n_ranks, std::uint32_t capacity) noexcept {
  return queue_offset(n_ranks, capacity);
}
constexpr std::size_t heap_offset(std::uint32_t n_ranks, std::uint32_t capacity, std::uint32_t rows) noexcept {
  return round_up(regions_offset(n_ranks, capacity) + std::size_t{rows} * kRegionRowSize, 4096);
}
constexpr std::size_t min_total_size(std::uint32_t n_ranks, std::uint32_t capacity, std::uint32_t rows) noexcept {
  return heap_offset(n_ranks, capacity, rows) + kMinHeap;
}
inline std::size_t min_total_size(const SegmentConfig& c) noexcept {
  return min_total_size(c.n_ranks, c.queue_capacity, c.region_capacity);
}

// ---------------------------------------------------------------------------

enum class RegionState : std::uint32_t { Free = 0, Live = 1 };

/// One row of the device-resident region metadata table.
/// ref_word packs (generation tag << 32 | count) so a recycled row can never
/// be confused with the region that previously used it.
struct alignas(kRegionRowSize) RegionRow {
  std::atomic<std::uint64_t> region_id{0};
  std::atomic<std::uint64_t> ref_word{0};
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t reserved = 0;  // block bytes actually taken from the heap
  std::uint32_t owner_rank = 0;
  std::atomic<std::uint32_t> state{0};
  std::atomic<std::uint32_t> in_flight{0};  // by-reference sends not yet taken
};
static_assert(sizeof(RegionRow) == kRegionRowSize);

struct AllocatorState {
  std::uint64_t free_head = 0;  // SegOffset of the first free block, address ordered
  std::uint64_t next_seq = 1;   // region id generator
  std::uint32_t row_cursor = 0;
  std::uint32_t row_bits = 0;
  std::atomic<std::uint64_t> bytes_in_use{0};
  std::atomic<std::uint64_t> bytes_reserved{0};
  std::atomic<std::uint64_t> high_water{0};
  std::atomic<std::uint64_t> live_regions{0};
};

/// Free heap block header, stored in the first bytes of the block.
struct FreeBlock {
  std::uint64_t size;
  std::uint64_t next;
};

/// Published descriptor for collectives: one slot per rank.
struct alignas(kCacheLine) BoardSlot {
  std::uint64_t region_id = 0;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t aux = 0;
};

struct alignas(kCacheLine) SegmentHeader {
  std::uint32_t magic;
  std::uint32_t layout_version;
  char name[kNameCapacity];
  std::uint64_t total_size;
  std::uint32_t n_ranks;
  std::uint32_t queue_capacity;
  std::uint32_t eager_threshold;
  std::uint32_t region_capacity;
  std::uint64_t queues_offset;
  std::uint64_t regions_offset;
  std::uint64_t heap_offset;
  std::uint64_t heap_size;

  alignas(kCacheLine) std::atomic<std::uint32_t> ready_flag;
  std::atomic<std::uint32_t> attach_count;
  std::atomic<std::uint8_t> attached[kMaxRanks];

  alignas(kCacheLine) Barrier barrier;  // barrier.generation is the epoch
  alignas(kCacheLine) MetaLock metalock;
  alignas(kCacheLine) AllocatorState alloc;
  alignas(kCacheLine) BoardSlot board[kMaxRanks];
};
static_assert(sizeof(SegmentHeader) <= kHeaderSize);

// ---------------------------------------------------------------------------

enum class EntryStatus : std::uint32_t { Empty = 0, Writing = 1, Ready = 2, Consumed = 3 };
enum class PayloadKind : std::uint32_t { Eager = 0, Rendezvous = 1 };

/// Status word: ticket * 4 + phase. For the slot serving ticket t it moves
/// t*4 (EMPTY) -> t*4+1 (WRITING) -> t*4+2 (READY) -> t*4+3 (CONSUMED) ->
/// (t+capacity)*4 (EMPTY for the next lap), so it only ever increases.
constexpr std::uint64_t status_word(std::uint64_t ticket, EntryStatus s) noexcept {
  return ticket * 4 + static_cast<std::uint64_t>(s);
}
constexpr EntryStatus status_of(std::uint64_t word) noexcept { return static_cast<EntryStatus>(word & 3U); }
constexpr std::uint64_t ticket_of(std::uint64_t word) noexcept { return word >> 2; }

struct alignas(kCacheLine) QueueEntry {
  std::atomic<std::uint64_t> word;
  std::uint32_t src;
  std::int32_t tag;
  std::uint64_t seq;
  std::uint32_t kind;
  std::uint32_t flags;
  std::uint64_t payload_len;
  std::uint64_t region_id;
  std::uint64_t data_off;
  std::uint64_t reserved_;
  std::byte inline_data[kInlineCapacity];
};
static_assert(sizeof(QueueEntry) <= kEntrySize);
static_assert(std::has_single_bit(kEntrySize) && kEntrySize % kCacheLine == 0);

struct QueueHeader {
  alignas(kCacheLine) std::atomic<std::uint64_t> head;  // consumer-advanced
  alignas(kCacheLine) std::atomic<std::uint64_t> tail;  // producer-reserved
  alignas(kCacheLine) std::uint32_t capacity;
  std::uint32_t owner;
  alignas(kCacheLine) std::atomic<std::uint64_t> next_seq[kMaxRanks];  // per source rank
};
static_assert(sizeof(QueueHeader) <= kQueueHeaderSize);

}  // namespace shmpi

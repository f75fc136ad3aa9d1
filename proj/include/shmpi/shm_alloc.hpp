#pragma once

// Shared heap inside the segment plus the region metadata table.
//
// Blocks are handed out first-fit from an address-ordered free list in 64-byte
// units. Every allocation occupies one row of the metadata table; the row
// carries the region id, its extent, an atomic reference count, and the owner
// rank. Metadata mutation happens under the segment MetaLock; reference counts
// are lock-free.

#include <atomic>
#include <cstdint>
#include <string>

#include "shmpi/error.hpp"
#include "shmpi/layout.hpp"
#include "shmpi/segment.hpp"
#include "shmpi/sync.hpp"

namespace shmpi {

using RegionId = std::uint64_t;

struct RegionMetadata {
  RegionId region_id = 0;
  SegOffset offset;
  std::uint64_t length = 0;
  std::uint64_t refcount = 0;
  std::uint32_t owner_rank = 0;
  RegionState state = RegionState::Free;
  std::uint32_t in_flight = 0;
};

struct Allocation {
  RegionId region_id = 0;
  SegOffset offset;
};

struct HeapStats {
  std::uint64_t heap_size = 0;
  std::uint64_t bytes_in_use = 0;    // sum of requested lengths of live regions
  std::uint64_t bytes_reserved = 0;  // sum of block sizes of live regions
  std::uint64_t free_bytes = 0;
  std::uint64_t free_blocks = 0;
  std::uint64_t high_water = 0;
  std::uint64_t live_regions = 0;

  /// heap = reserved + free; padding is reserved - in_use.
  bool conserved() const noexcept { return bytes_reserved + free_bytes == heap_size; }
};

class SharedHeap {
 public:
  SharedHeap(const SharedSegment& seg, std::uint32_t rank, PollingPolicy policy = PollingPolicy::from_env())
      : seg_(&seg), rank_(rank), policy_(policy) {}

  Allocation malloc(std::size_t size) { return malloc(size, rank_); }

  /// Allocates a LIVE region with refcount 1 owned by `owner`.
  Allocation malloc(std::size_t size, std::uint32_t owner) {
    if (size == 0) raise(Errc::InvalidConfig, "shm_malloc of zero bytes");
    auto& h = seg_->header();
    auto& a = h.alloc;
    const std::uint64_t need = round_up(size, kBlockGranularity);

    LockGuard guard(h.metalock, rank_, policy_);
    if (need > h.heap_size) raise(Errc::OutOfSharedMemory, "request of " + std::to_string(size) + " bytes exceeds heap");

    std::uint64_t prev = 0;
    std::uint64_t cur = a.free_head;
    while (cur != 0) {
      auto* b = seg_->at<FreeBlock>(cur);
      if (b->size >= need) break;
      prev = cur;
      cur = b->next;
    }
    if (cur == 0) raise(Errc::OutOfSharedMemory, "no free block of " + std::to_string(need) + " bytes");

    const std::uint32_t row_index = find_free_row();
    auto* b = seg_->at<FreeBlock>(cur);
    std::uint64_t replacement = b->next;
    if (b->size - need >= kBlockGranularity) {
      const std::uint64_t rest = cur + need;
      auto* r = seg_->at<FreeBlock>(rest);
      r->size = b->size - need;
      r->next = b->next;
      replacement = rest;
    }
    link(prev, replacement);

    const std::uint64_t seq = a.next_seq++;
    const RegionId id = (seq << a.row_bits) | row_index;
    auto& row = this->row(row_index);
    row.offset = cur;
    row.length = size;
    row.reserved = need;
    row.owner_rank = owner;
    row.in_flight.store(0, std::memory_order_relaxed);
    row.ref_word.store(pack(tag_of(id), 1), std::memory_order_relaxed);
    row.region_id.store(id, std::memory_order_relaxed);
    row.state.store(static_cast<std::uint32_t>(RegionState::Live), std::memory_order_release);

    a.live_regions.fetch_add(1, std::memory_order_relaxed);
    a.bytes_reserved.fetch_add(need, std::memory_order_relaxed);
    const auto in_use = a.bytes_in_use.fetch_add(size, std::memory_order_relaxed) + size;
    if (in_use > a.high_water.load(std::memory_order_relaxed)) a.high_water.store(in_use, std::memory_order_relaxed);
    return {id, SegOffset{cur}};
  }

  /// Returns the post-increment count.
  std::uint64_t incref(RegionId id) {
    auto& row = checked_row(id);
    std::uint64_t w = row.ref_word.load(std::memory_order_acquire);
    for (;;) {
      if (tag_word(w) != tag_of(id) || row.region_id.load(std::memory_order_acquire) != id)
        raise(Errc::NoSuchRegion, "region " + std::to_string(id) + " was recycled");
      if (count(w) == 0) raise(Errc::RegionFreed, "incref on freed region " + std::to_string(id));
      if (row.ref_word.compare_exchange_weak(w, w + 1, std::memory_order_acq_rel, std::memory_order_acquire))
        return count(w) + 1;
    }
  }

  /// Returns the post-decrement count; at zero the region's bytes go back to the heap.
  std::uint64_t decref(RegionId id) {
    auto& row = checked_row(id);
    std::uint64_t w = row.ref_word.load(std::memory_order_acquire);
    for (;;) {
      if (tag_word(w) != tag_of(id) || row.region_id.load(std::memory_order_acquire) != id)
        raise(Errc::NoSuchRegion, "region " + std::to_string(id) + " was recycled");
      if (count(w) == 0) raise(Errc::UnderflowDetected, "decref below zero on region " + std::to_string(id));
      if (row.ref_word.compare_exchange_weak(w, w - 1, std::memory_order_acq_rel, std::memory_order_acquire)) break;
    }
    const std::uint64_t remaining = count(w) - 1;
    if (remaining == 0) release(row);
    return remaining;
  }

  /// Snapshot of a row. A freed row keeps reporting FREE/refcount 0 until it
  /// is recycled for another region, after which the old id is NoSuchRegion.
  RegionMetadata lookup(RegionId id) const {
    const auto& row = checked_row(id);
    RegionMetadata m;
    m.region_id = id;
    const auto w = row.ref_word.load(std::memory_order_acquire);
    m.state = static_cast<RegionState>(row.state.load(std::memory_order_acquire));
    m.offset = SegOffset{row.offset};
    m.length = row.length;
    m.owner_rank = row.owner_rank;
    m.in_flight = row.in_flight.load(std::memory_order_acquire);
    m.refcount = tag_word(w) == tag_of(id) ? count(w) : 0;
    if (m.state == RegionState::Free) m.refcount = 0;
    return m;
  }

  /// The in-flight guard counts by-reference sends of this region that no
  /// receiver has taken yet.
  void mark_in_flight(RegionId id) { checked_row(id).in_flight.fetch_add(1, std::memory_order_acq_rel); }
  void clear_in_flight(RegionId id) { checked_row(id).in_flight.fetch_sub(1, std::memory_order_acq_rel); }
  std::uint32_t in_flight(RegionId id) const {
    const auto& row = this->row(row_of(id));
    if (row.region_id.load(std::memory_order_acquire) != id) return 0;
    return row.in_flight.load(std::memory_order_acquire);
  }

  /// Walks the free list under the lock. Quiescent callers get exact figures.
  HeapStats stats() const {
    auto& h = seg_->header();
    LockGuard guard(h.metalock, rank_, policy_);
    HeapStats s;
    s.heap_size = h.heap_size;
    s.bytes_in_use = h.alloc.bytes_in_use.load();
    s.bytes_reserved = h.alloc.bytes_reserved.load();
    s.high_water = h.alloc.high_water.load();
    s.live_regions = h.alloc.live_regions.load();
    for (std::uint64_t cur = h.alloc.free_head; cur != 0; cur = seg_->at<FreeBlock>(cur)->next) {
      s.free_bytes += seg_->at<FreeBlock>(cur)->size;
      ++s.free_blocks;
    }
    return s;
  }

  /// True when free blocks are ordered, non-overlapping, non-adjacent and inside the heap.
  bool free_list_well_formed() const {
    auto& h = seg_->header();
    LockGuard guard(h.metalock, rank_, policy_);
    std::uint64_t end_prev = 0;
    for (std::uint64_t cur = h.alloc.free_head; cur != 0; cur = seg_->at<FreeBlock>(cur)->next) {
      const auto* b = seg_->at<FreeBlock>(cur);
      if (cur < h.heap_offset || cur + b->size > h.heap_offset + h.heap_size) return false;
      if (b->size == 0 || b->size % kBlockGranularity != 0) return false;
      if (end_prev != 0 && cur <= end_prev) return false;
      end_prev = cur + b->size;
    }
    return true;
  }

  std::span<std::byte> bytes(RegionId id) const {
    const auto& row = checked_row(id);
    return seg_->resolve(SegOffset{row.offset}, row.length);
  }

  const SharedSegment& segment() const noexcept { return *seg_; }
  std::uint32_t rank() const noexcept { return rank_; }

 private:
  static constexpr std::uint64_t pack(std::uint32_t tag, std::uint32_t n) noexcept {
    return (std::uint64_t{tag} << 32) | n;
  }
  static constexpr std::uint32_t tag_word(std::uint64_t w) noexcept { return static_cast<std::uint32_t>(w >> 32); }
  static constexpr std::uint64_t count(std::uint64_t w) noexcept { return w & 0xFFFFFFFFULL; }
  std::uint32_t tag_of(RegionId id) const noexcept {
    return static_cast<std::uint32_t>(id >> seg_->header().alloc.row_bits);
  }
  std::uint32_t row_of(RegionId id) const noexcept {
    return static_cast<std::uint32_t>(id & (seg_->header().region_capacity - 1));
  }

  RegionRow& row(std::uint32_t i) const noexcept {
    return *seg_->at<RegionRow>(seg_->header().regions_offset + std::size_t{i} * kRegionRowSize);
  }

  RegionRow& checked_row(RegionId id) const {
    if (id == 0) raise(Errc::NoSuchRegion, "region id 0");
    auto& r = row(row_of(id));
    if (r.region_id.load(std::memory_order_acquire) != id)
      raise(Errc::NoSuchRegion, "no region " + std::to_string(id));
    return r;
  }

  // Caller holds the lock.
  std::uint32_t find_free_row() {
    auto& h = seg_->header();
    const std::uint32_t n = h.region_capacity;
    for (std::uint32_t k = 0; k < n; ++k) {
      const std::uint32_t i = (h.alloc.row_cursor + k) & (n - 1);
      if (row(i).state.load(std::memory_order_acquire) == static_cast<std::uint32_t>(RegionState::Free)) {
        h.alloc.row_cursor = (i + 1) & (n - 1);
        return i;
      }
    }
    raise(Errc::OutOfSharedMemory, "region metadata table full");
  }

  void link(std::uint64_t prev, std::uint64_t next) {
    if (prev == 0)
      seg_->header().alloc.free_head = next;
    else
      seg_->at<FreeBlock>(prev)->next = next;
  }

  void release(RegionRow& row) {
    auto& h = seg_->header();
    auto& a = h.alloc;
    LockGuard guard(h.metalock, rank_, policy_);
    const std::uint64_t off = row.offset;
    const std::uint64_t size = row.reserved;

    // Insert in address order, coalescing with neighbours.
    std::uint64_t prev = 0;
    std::uint64_t cur = a.free_head;
    while (cur != 0 && cur < off) {
      prev = cur;
      cur = seg_->at<FreeBlock>(cur)->next;
    }
    auto* blk = seg_->at<FreeBlock>(off);
    blk->size = size;
    blk->next = cur;
    if (cur != 0 && off + size == cur) {
      auto* nb = seg_->at<FreeBlock>(cur);
      blk->size += nb->size;
      blk->next = nb->next;
    }
    if (prev != 0) {
      auto* pb = seg_->at<FreeBlock>(prev);
      if (prev + pb->size == off) {
        pb->size += blk->size;
        pb->next = blk->next;
      } else {
        pb->next = off;
      }
    } else {
      a.free_head = off;
    }

    a.bytes_in_use.fetch_sub(row.length, std::memory_order_relaxed);
    a.bytes_reserved.fetch_sub(size, std::memory_order_relaxed);
    a.live_regions.fetch_sub(1, std::memory_order_relaxed);
    row.state.store(static_cast<std::uint32_t>(RegionState::Free), std::memory_order_release);
  }

  const SharedSegment* seg_;
  std::uint32_t rank_;
  PollingPolicy policy_;
};

}  // namespace shmpi

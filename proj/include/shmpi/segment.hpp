#pragma once

// The shared segment standing in for a pooled CXL memory expander: one named
// POSIX shared-memory object mapped by every rank. Cross-process references
// are SegOffsets resolved against each process's own mapping base.

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <new>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "shmpi/error.hpp"
#include "shmpi/layout.hpp"

namespace shmpi {

inline constexpr auto kAttachTimeout = std::chrono::seconds(5);
inline constexpr std::string_view kSegmentPrefix = "shmpi.";

namespace detail {

inline std::string shm_path(const std::string& name) { return "/" + name; }

[[noreturn]] inline void raise_errno(const std::string& what) {
  raise(Errc::SystemError, what + ": " + std::strerror(errno));
}

inline void validate(const SegmentConfig& c) {
  if (c.name.empty() || c.name.size() >= kNameCapacity || c.name.find('/') != std::string::npos)
    raise(Errc::InvalidConfig, "segment name must be 1-63 characters without '/'");
  if (c.n_ranks < 1 || c.n_ranks > kMaxRanks)
    raise(Errc::InvalidConfig, "n_ranks must be in [1, " + std::to_string(kMaxRanks) + "]");
  if (c.queue_capacity == 0 || !std::has_single_bit(c.queue_capacity))
    raise(Errc::InvalidConfig, "queue_capacity must be a power of two");
  if (c.eager_threshold > kInlineCapacity)
    raise(Errc::InvalidConfig, "eager_threshold exceeds inline payload capacity");
  if (c.region_capacity < 2 || !std::has_single_bit(c.region_capacity))
    raise(Errc::InvalidConfig, "region_capacity must be a power of two >= 2");
  if (c.total_size < min_total_size(c))
    raise(Errc::SizeTooSmall, "total_size " + std::to_string(c.total_size) + " below minimum layout " +
                                  std::to_string(min_total_size(c)));
}

}  // namespace detail

/// A process's mapping of the segment. Move-only; unmaps on destruction.
/// The creating view also unlinks the OS object when destroyed.
class SharedSegment {
 public:
  SharedSegment() = default;
  SharedSegment(SharedSegment&& o) noexcept { *this = std::move(o); }
  SharedSegment& operator=(SharedSegment&& o) noexcept {
    if (this != &o) {
      close();
      base_ = std::exchange(o.base_, nullptr);
      size_ = std::exchange(o.size_, 0);
      name_ = std::move(o.name_);
      rank_ = std::exchange(o.rank_, -1);
      owner_ = std::exchange(o.owner_, false);
    }
    return *this;
  }
  SharedSegment(const SharedSegment&) = delete;
  SharedSegment& operator=(const SharedSegment&) = delete;
  ~SharedSegment() { close(); }

  static SharedSegment create(const SegmentConfig& config, bool prefault = false);
  static SharedSegment attach(const std::string& name, int rank,
                              std::chrono::milliseconds timeout = kAttachTimeout);
  /// Maps an existing segment without claiming a rank (launcher, tools).
  static SharedSegment observe(const std::string& name,
                               std::chrono::milliseconds timeout = kAttachTimeout);
  static bool remove(const std::string& name) noexcept { return ::shm_unlink(detail::shm_path(name).c_str()) == 0; }
  static bool exists(const std::string& name) {
    return std::filesystem::exists(std::filesystem::path("/dev/shm") / name);
  }
  /// Names of every segment object carrying the runtime prefix.
  static std::vector<std::string> list();

  /// Unmaps, releasing the rank claim. The owner view also unlinks.
  void close() noexcept;
  /// Hands the unlink duty to the caller (after fork, only one process should unlink).
  void release_ownership() noexcept { owner_ = false; }

  bool valid() const noexcept { return base_ != nullptr; }
  const std::string& name() const noexcept { return name_; }
  int rank() const noexcept { return rank_; }
  std::size_t size() const noexcept { return size_; }
  std::byte* base() const noexcept { return base_; }

  SegmentHeader& header() const noexcept { return *reinterpret_cast<SegmentHeader*>(base_); }
  std::uint32_t n_ranks() const noexcept { return header().n_ranks; }
  SegmentConfig config() const;

  /// Checked resolution of [off, off+len) to a span aliasing segment storage.
  std::span<std::byte> resolve(SegOffset off, std::size_t len) const {
    if (off.is_null()) raise(Errc::NullOffset, "null segment offset");
    if (off.value > size_ || len > size_ - off.value)
      raise(Errc::OutOfBounds, "[" + std::to_string(off.value) + ", +" + std::to_string(len) + ") outside segment of " +
                                   std::to_string(size_) + " bytes");
    return {base_ + off.value, len};
  }

  /// Unchecked typed access for runtime internals.
  template <class T>
  T* at(std::uint64_t off) const noexcept {
    return reinterpret_cast<T*>(base_ + off);
  }

  SegOffset offset_of(const void* p) const noexcept {
    return {static_cast<std::uint64_t>(static_cast<const std::byte*>(p) - base_)};
  }

 private:
  static std::pair<std::byte*, std::size_t> map_existing(const std::string& name,
                                                         std::chrono::milliseconds timeout);

  std::byte* base_ = nullptr;
  std::size_t size_ = 0;
  std::string name_;
  int rank_ = -1;
  bool owner_ = false;
};

inline SegmentConfig SharedSegment::config() const {
  const auto& h = header();
  SegmentConfig c;
  c.name = h.name;
  c.total_size = h.total_size;
  c.n_ranks = h.n_ranks;
  c.queue_capacity = h.queue_capacity;
  c.eager_threshold = h.eager_threshold;
  c.region_capacity = h.region_capacity;
  return c;
}

inline SharedSegment SharedSegment::create(const SegmentConfig& config, bool prefault) {
  detail::validate(config);
  const auto path = detail::shm_path(config.name);
  int fd = ::shm_open(path.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
  if (fd < 0) {
    if (errno == EEXIST) raise(Errc::NameInUse, "segment '" + config.name + "' already exists");
    detail::raise_errno("shm_open " + config.name);
  }
  auto fail = [&](const std::string& what) {
    int saved = errno;
    ::close(fd);
    ::shm_unlink(path.c_str());
    errno = saved;
    detail::raise_errno(what);
  };
  if (::ftruncate(fd, static_cast<off_t>(config.total_size)) != 0) fail("ftruncate");
  void* p = ::mmap(nullptr, config.total_size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  if (p == MAP_FAILED) fail("mmap");
  ::close(fd);

  SharedSegment seg;
  seg.base_ = static_cast<std::byte*>(p);
  seg.size_ = config.total_size;
  seg.name_ = config.name;
  seg.owner_ = true;

  auto* h = new (seg.base_) SegmentHeader{};
  h->layout_version = kLayoutVersion;
  std::memset(h->name, 0, sizeof h->name);
  std::memcpy(h->name, config.name.data(), config.name.size());
  h->total_size = config.total_size;
  h->n_ranks = config.n_ranks;
  h->queue_capacity = config.queue_capacity;
  h->eager_threshold = config.eager_threshold;
  h->region_capacity = config.region_capacity;
  h->queues_offset = queues_offset();
  h->regions_offset = regions_offset(config.n_ranks, config.queue_capacity);
  h->heap_offset = heap_offset(config.n_ranks, config.queue_capacity, config.region_capacity);
  h->heap_size = (config.total_size - h->heap_offset) / kBlockGranularity * kBlockGranularity;
  h->alloc.row_bits = static_cast<std::uint32_t>(std::countr_zero(config.region_capacity));

  for (std::uint32_t q = 0; q < config.n_ranks; ++q) {
    auto* qh = new (seg.base_ + queue_offset(q, config.queue_capacity)) QueueHeader{};
    qh->capacity = config.queue_capacity;
    qh->owner = q;
    auto* ring = reinterpret_cast<std::byte*>(qh) + kQueueHeaderSize;
    for (std::uint32_t i = 0; i < config.queue_capacity; ++i) {
      auto* e = new (ring + std::size_t{i} * kEntrySize) QueueEntry{};
      e->word.store(status_word(i, EntryStatus::Empty), std::memory_order_relaxed);
    }
  }
  for (std::uint32_t r = 0; r < config.region_capacity; ++r)
    new (seg.base_ + h->regions_offset + std::size_t{r} * kRegionRowSize) RegionRow{};

  auto* block = reinterpret_cast<FreeBlock*>(seg.base_ + h->heap_offset);
  block->size = h->heap_size;
  block->next = 0;
  h->alloc.free_head = h->heap_offset;

  if (prefault) {
    const long page = ::sysconf(_SC_PAGESIZE);
    for (std::size_t off = h->heap_offset + kBlockGranularity; off < config.total_size;
         off += static_cast<std::size_t>(page))
      seg.base_[off] = std::byte{0};
  }

  h->magic = kSegmentMagic;
  h->ready_flag.store(1, std::memory_order_release);
  return seg;
}

inline std::pair<std::byte*, std::size_t> SharedSegment::map_existing(const std::string& name,
                                                                       std::chrono::milliseconds timeout) {
  const auto path = detail::shm_path(name);
  int fd = ::shm_open(path.c_str(), O_RDWR, 0600);
  if (fd < 0) {
    if (errno == ENOENT) raise(Errc::NoSuchSegment, "no segment named '" + name + "'");
    detail::raise_errno("shm_open " + name);
  }
  const auto deadline = Clock::now() + timeout;
  struct stat st {};
  for (;;) {
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      detail::raise_errno("fstat");
    }
    if (static_cast<std::size_t>(st.st_size) >= kHeaderSize) break;
    if (Clock::now() > deadline) {
      ::close(fd);
      raise(Errc::NotReady, "segment '" + name + "' never sized");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  const auto size = static_cast<std::size_t>(st.st_size);
  void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  ::close(fd);
  if (p == MAP_FAILED) detail::raise_errno("mmap");
  auto* base = static_cast<std::byte*>(p);
  auto* h = reinterpret_cast<SegmentHeader*>(base);
  while (h->ready_flag.load(std::memory_order_acquire) == 0) {
    if (Clock::now() > deadline) {
      ::munmap(p, size);
      raise(Errc::NotReady, "segment '" + name + "' not ready after attach timeout");
    }
    std::this_thread::sleep_for(std::chrono::microseconds(200));
  }
  if (h->magic != kSegmentMagic || h->layout_version != kLayoutVersion || h->total_size != size) {
    ::munmap(p, size);
    raise(Errc::InvalidConfig, "segment '" + name + "' has an incompatible header");
  }
  return {base, size};
}

inline SharedSegment SharedSegment::attach(const std::string& name, int rank, std::chrono::milliseconds timeout) {
  auto [base, size] = map_existing(name, timeout);
  auto* h = reinterpret_cast<SegmentHeader*>(base);
  if (const std::uint32_t n = h->n_ranks; rank < 0 || static_cast<std::uint32_t>(rank) >= n) {
    ::munmap(base, size);
    raise(Errc::RankOutOfRange, "rank " + std::to_string(rank) + " not in [0, " + std::to_string(n) + ")");
  }
  if (h->attached[rank].exchange(1, std::memory_order_acq_rel) != 0) {
    ::munmap(base, size);
    raise(Errc::AlreadyAttached, "rank " + std::to_string(rank) + " already attached");
  }
  h->attach_count.fetch_add(1, std::memory_order_acq_rel);
  SharedSegment seg;
  seg.base_ = base;
  seg.size_ = size;
  seg.name_ = name;
  seg.rank_ = rank;
  return seg;
}

inline SharedSegment SharedSegment::observe(const std::string& name, std::chrono::milliseconds timeout) {
  auto [base, size] = map_existing(name, timeout);
  SharedSegment seg;
  seg.base_ = base;
  seg.size_ = size;
  seg.name_ = name;
  return seg;
}

inline void SharedSegment::close() noexcept {
  if (base_ == nullptr) return;
  if (rank_ >= 0) {
    auto& h = header();
    h.attached[rank_].store(0, std::memory_order_release);
    h.attach_count.fetch_sub(1, std::memory_order_acq_rel);
  }
  ::munmap(base_, size_);
  if (owner_) ::shm_unlink(detail::shm_path(name_).c_str());
  base_ = nullptr;
  size_ = 0;
  rank_ = -1;
  owner_ = false;
}

inline std::vector<std::string> SharedSegment::list() {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator("/dev/shm", ec)) {
    auto fn = e.path().filename().string();
    if (fn.starts_with(kSegmentPrefix)) out.push_back(fn);
  }
  return out;
}

}  // namespace shmpi

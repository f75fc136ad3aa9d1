#pragma once

// Bucket sort of seeded integer keys: local histogram, allreduce of the
// histogram, bucket-to-rank assignment by prefix count, alltoallv of the
// buckets, local sort.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

#include "shmpi/bench/common.hpp"

namespace shmpi::bench {

inline std::uint64_t key_count(const WorkloadSpec& s) {
  return s.explicit_keys.empty() ? s.keys : s.explicit_keys.size();
}

inline std::uint32_t key_at(const WorkloadSpec& s, std::uint64_t i) {
  if (!s.explicit_keys.empty()) return s.explicit_keys[i];
  return static_cast<std::uint32_t>(hash2(s.seed, i) % s.max_key);
}

inline std::vector<std::uint32_t> generate_keys(const WorkloadSpec& s, std::uint64_t begin, std::uint64_t end) {
  std::vector<std::uint32_t> k(end - begin);
  for (std::uint64_t i = begin; i < end; ++i) k[i - begin] = key_at(s, i);
  return k;
}

inline std::uint32_t bucket_count(const WorkloadSpec& s) { return std::min<std::uint32_t>(s.max_key, 1024); }

inline std::uint32_t bucket_of(std::uint32_t key, std::uint32_t buckets, std::uint32_t max_key) {
  return static_cast<std::uint32_t>(static_cast<std::uint64_t>(key) * buckets / max_key);
}

/// Bucket b goes to the rank whose share of the key count contains the
/// bucket's first key.
inline std::vector<int> assign_buckets(std::span<const std::int64_t> hist, std::uint64_t total, int p) {
  std::vector<int> dest(hist.size());
  std::uint64_t prefix = 0;
  for (std::size_t b = 0; b < hist.size(); ++b) {
    dest[b] = total == 0 ? 0 : static_cast<int>(std::min<std::uint64_t>(prefix * static_cast<std::uint64_t>(p) / total,
                                                                         static_cast<std::uint64_t>(p - 1)));
    prefix += static_cast<std::uint64_t>(hist[b]);
  }
  return dest;
}

inline RankOutcome run_intsort_rank(Communicator& comm, const WorkloadSpec& spec) {
  const int p = comm.size();
  const int me = comm.rank();
  const std::uint64_t n = key_count(spec);
  if (n % static_cast<std::uint64_t>(p) != 0)
    raise(Errc::InvalidConfig, "key count " + std::to_string(n) + " not divisible by " + std::to_string(p) + " ranks");
  for (auto k : spec.explicit_keys)
    if (k >= spec.max_key) raise(Errc::InvalidConfig, "explicit key exceeds max_key");
  const Block mine = block_of(n, p, me);
  const std::vector<std::uint32_t> keys = generate_keys(spec, mine.begin, mine.end);
  const std::uint32_t buckets = bucket_count(spec);
  std::vector<std::uint32_t> sorted;

  RankOutcome out;
  timed_phase(comm, out, [&] {
    std::vector<std::int64_t> hist(buckets, 0);
    for (auto k : keys) ++hist[bucket_of(k, buckets, spec.max_key)];
    comm.allreduce<std::int64_t>(ReduceOp::Sum, hist);
    const auto dest = assign_buckets(hist, n, p);

    std::vector<std::size_t> counts(static_cast<std::size_t>(p), 0), displs(static_cast<std::size_t>(p), 0);
    for (auto k : keys) ++counts[static_cast<std::size_t>(dest[bucket_of(k, buckets, spec.max_key)])];
    for (std::size_t r = 1; r < counts.size(); ++r) displs[r] = displs[r - 1] + counts[r - 1];

    SharedBuf buf = comm.alloc(std::max<std::size_t>(keys.size(), 1) * sizeof(std::uint32_t));
    {
      auto slots = buf.as<std::uint32_t>();
      std::vector<std::size_t> pos(displs);
      for (auto k : keys) slots[pos[static_cast<std::size_t>(dest[bucket_of(k, buckets, spec.max_key)])]++] = k;
    }
    for (std::size_t r = 0; r < counts.size(); ++r) {
      counts[r] *= sizeof(std::uint32_t);
      displs[r] *= sizeof(std::uint32_t);
    }
    auto msgs = comm.alltoallv_ref(buf, counts, displs);
    buf.reset();

    std::size_t total = 0;
    for (const auto& m : msgs) total += m.info.len / sizeof(std::uint32_t);
    sorted.resize(total);
    std::size_t at = 0;
    for (const auto& m : msgs) {
      auto b = m.bytes();
      std::memcpy(sorted.data() + at, b.data(), b.size());
      at += b.size() / sizeof(std::uint32_t);
    }
    msgs.clear();
    std::sort(sorted.begin(), sorted.end());
  });

  // Oracle: counting sort of the whole input; this rank must hold the
  // slice of it starting at the total length held by lower ranks.
  std::vector<std::int64_t> lens(static_cast<std::size_t>(p), 0);
  lens[static_cast<std::size_t>(me)] = static_cast<std::int64_t>(sorted.size());
  comm.allreduce<std::int64_t>(ReduceOp::Sum, lens);
  std::uint64_t offset = 0, held = 0;
  for (int r = 0; r < p; ++r) {
    if (r < me) offset += static_cast<std::uint64_t>(lens[static_cast<std::size_t>(r)]);
    held += static_cast<std::uint64_t>(lens[static_cast<std::size_t>(r)]);
  }
  if (held != n) {
    out.detail = "ranks hold " + std::to_string(held) + " keys, input has " + std::to_string(n);
  } else {
    std::vector<std::uint64_t> count(spec.max_key, 0);
    for (std::uint64_t i = 0; i < n; ++i) ++count[key_at(spec, i)];
    std::uint64_t skip = offset;
    std::uint32_t key = 0;
    for (std::size_t i = 0; i < sorted.size() && out.detail.empty(); ++i) {
      while (count[key] <= skip) skip -= count[key++];
      if (sorted[i] != key)
        out.detail = "position " + std::to_string(offset + i) + " holds " + std::to_string(sorted[i]) +
                     ", sorted input has " + std::to_string(key);
      ++skip;
    }
  }
  out.valid = out.detail.empty();
  agree_on_validity(comm, out);
  if (out.valid) out.detail = std::to_string(sorted.size()) + " keys at offset " + std::to_string(offset);

  Fnv1a h;
  h.add_values<std::uint32_t>(sorted);
  out.checksum = h.value();
  if (spec.report_output) out.output = sorted;
  return out;
}

}  // namespace shmpi::bench

#pragma once

// Explicit 5-point Jacobi heat conduction on a row-decomposed grid with
// insulated (reflecting) boundaries. Each step exchanges one boundary row
// with each neighbor; the received row is read in place.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "shmpi/bench/common.hpp"

namespace shmpi::bench {

inline constexpr double kHeatAlpha = 0.2;
inline constexpr int kTagRowDown = 11;  // row travelling to rank + 1
inline constexpr int kTagRowUp = 12;    // row travelling to rank - 1

inline double heat_initial(const WorkloadSpec& s, std::size_t y, std::size_t x) {
  const std::size_t w = s.grid_width(), h = s.grid_height();
  switch (s.heat_init) {
    case HeatInit::Uniform: return 1.0;
    case HeatInit::HotCenter: return (y == h / 2 && x == w / 2) ? 1.0 : 0.0;
    case HeatInit::Seeded: break;
  }
  return unit_double(hash2(s.seed, y * w + x));
}

/// One output row. Out-of-grid neighbors are the cell itself, so no heat
/// crosses the boundary.
inline void heat_row(const double* up, const double* row, const double* down, double* out, std::size_t w) {
  for (std::size_t x = 0; x < w; ++x) {
    const double c = row[x];
    const double l = x == 0 ? c : row[x - 1];
    const double r = x + 1 == w ? c : row[x + 1];
    out[x] = c + kHeatAlpha * ((up[x] + down[x]) + (l + r) - 4.0 * c);
  }
}

/// Single-process reference: row-major h x w grid after `steps` steps.
inline std::vector<double> serial_heat2d(const WorkloadSpec& s) {
  const std::size_t w = s.grid_width(), h = s.grid_height();
  std::vector<double> u(w * h), v(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) u[y * w + x] = heat_initial(s, y, x);
  for (int t = 0; t < s.step_count(); ++t) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* row = &u[y * w];
      const double* up = y == 0 ? row : row - w;
      const double* down = y + 1 == h ? row : row + w;
      heat_row(up, row, down, &v[y * w], w);
    }
    u.swap(v);
  }
  return u;
}

inline RankOutcome run_heat2d_rank(Communicator& comm, const WorkloadSpec& spec) {
  const std::size_t w = spec.grid_width(), h = spec.grid_height();
  const int p = comm.size(), me = comm.rank();
  if (w == 0 || h % static_cast<std::size_t>(p) != 0)
    raise(Errc::InvalidConfig, "grid height " + std::to_string(h) + " not divisible by " + std::to_string(p));
  const std::size_t rows = h / static_cast<std::size_t>(p);
  const std::size_t y0 = rows * static_cast<std::size_t>(me);
  std::vector<double> u(rows * w), v(rows * w);
  for (std::size_t y = 0; y < rows; ++y)
    for (std::size_t x = 0; x < w; ++x) u[y * w + x] = heat_initial(spec, y0 + y, x);

  const bool has_up = me > 0, has_down = me + 1 < p;
  RankOutcome out;
  timed_phase(comm, out, [&] {
    for (int t = 0; t < spec.step_count(); ++t) {
      auto send_row = [&](int dst, int tag, const double* row) {
        SharedBuf b = comm.alloc(w * sizeof(double));
        std::copy(row, row + w, b.as<double>().begin());
        comm.send(dst, tag, b);
      };
      if (has_up) send_row(me - 1, kTagRowUp, u.data());
      if (has_down) send_row(me + 1, kTagRowDown, u.data() + (rows - 1) * w);
      Message from_up, from_down;
      if (has_up) from_up = comm.recv_ref(me - 1, kTagRowDown);
      if (has_down) from_down = comm.recv_ref(me + 1, kTagRowUp);
      const double* ghost_up = has_up ? reinterpret_cast<const double*>(from_up.bytes().data()) : u.data();
      const double* ghost_down =
          has_down ? reinterpret_cast<const double*>(from_down.bytes().data()) : u.data() + (rows - 1) * w;
      for (std::size_t y = 0; y < rows; ++y) {
        const double* row = &u[y * w];
        const double* up = y == 0 ? ghost_up : row - w;
        const double* down = y + 1 == rows ? ghost_down : row + w;
        heat_row(up, row, down, &v[y * w], w);
      }
      u.swap(v);
    }
  });

  const std::vector<double> ref = serial_heat2d(spec);
  double max_diff = 0;
  for (std::size_t i = 0; i < u.size(); ++i) max_diff = std::max(max_diff, std::abs(u[i] - ref[y0 * w + i]));
  const double global_diff = comm.allreduce<double>(ReduceOp::Max, max_diff);
  out.valid = max_diff <= 1e-12;
  if (!out.valid) out.detail = "max abs diff " + std::to_string(max_diff) + " exceeds 1e-12";
  agree_on_validity(comm, out);
  if (out.valid) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "max abs diff %.3g", global_diff);
    out.detail = buf;
  }

  Fnv1a hsh;
  hsh.add_values<double>(u);
  out.checksum = hsh.value();
  if (spec.report_output) out.output = u;
  return out;
}

}  // namespace shmpi::bench

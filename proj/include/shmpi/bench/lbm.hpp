#pragma once

// D2Q9 BGK lattice Boltzmann on a fully periodic lattice, decomposed by rows.
// Each step: collide locally, ship the post-collision populations that cross
// a rank boundary (3 per cell of the edge row), then pull-stream.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <vector>

#include "shmpi/bench/common.hpp"

namespace shmpi::bench {

inline constexpr int kQ = 9;
inline constexpr std::array<int, kQ> kEx{0, 1, 0, -1, 0, 1, -1, -1, 1};
inline constexpr std::array<int, kQ> kEy{0, 0, 1, 0, -1, 1, 1, -1, -1};
inline constexpr std::array<double, kQ> kW{4.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 9, 1.0 / 9,
                                          1.0 / 36, 1.0 / 36, 1.0 / 36, 1.0 / 36};
inline constexpr double kTau = 0.6;
inline constexpr std::array<int, 3> kUpward{2, 5, 6};    // ey = +1
inline constexpr std::array<int, 3> kDownward{4, 7, 8};  // ey = -1
inline constexpr int kTagLbmUp = 21;    // edge populations moving to higher rows
inline constexpr int kTagLbmDown = 22;  // edge populations moving to lower rows

inline void lbm_equilibrium(double rho, double ux, double uy, double* f) {
  const double usq = ux * ux + uy * uy;
  for (int i = 0; i < kQ; ++i) {
    const double eu = kEx[i] * ux + kEy[i] * uy;
    f[i] = kW[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq);
  }
}

inline void lbm_collide(double* f) {
  double rho = 0, mx = 0, my = 0;
  for (int i = 0; i < kQ; ++i) {
    rho += f[i];
    mx += kEx[i] * f[i];
    my += kEy[i] * f[i];
  }
  double feq[kQ];
  lbm_equilibrium(rho, mx / rho, my / rho, feq);
  for (int i = 0; i < kQ; ++i) f[i] -= (f[i] - feq[i]) / kTau;
}

inline void lbm_initial(const WorkloadSpec& s, std::size_t y, std::size_t x, double* f) {
  if (s.lbm_init == LbmInit::Equilibrium) {
    lbm_equilibrium(1.0, 0.0, 0.0, f);
    return;
  }
  const std::uint64_t c = 3 * (y * s.grid_width() + x);
  const double rho = 1.0 + 0.01 * (unit_double(hash2(s.seed, c)) - 0.5);
  const double ux = 0.02 * (unit_double(hash2(s.seed, c + 1)) - 0.5);
  const double uy = 0.02 * (unit_double(hash2(s.seed, c + 2)) - 0.5);
  lbm_equilibrium(rho, ux, uy, f);
}

/// Pull streaming of one row. `src(dy)` gives the post-collision row at
/// offset dy in {-1, 0, +1}.
template <class RowAt>
inline void lbm_stream_row(RowAt&& src, double* out, std::size_t w) {
  for (std::size_t x = 0; x < w; ++x)
    for (int i = 0; i < kQ; ++i) {
      const std::size_t xs = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x + w) - kEx[i]) % w;
      out[x * kQ + i] = src(-kEy[i])[xs * kQ + i];
    }
}

/// Single-process reference: row-major h x w x 9 populations after `steps` steps.
inline std::vector<double> serial_lbm(const WorkloadSpec& s) {
  const std::size_t w = s.grid_width(), h = s.grid_height();
  std::vector<double> f(w * h * kQ), g(f.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) lbm_initial(s, y, x, &f[(y * w + x) * kQ]);
  for (int t = 0; t < s.step_count(); ++t) {
    for (std::size_t c = 0; c < w * h; ++c) lbm_collide(&f[c * kQ]);
    for (std::size_t y = 0; y < h; ++y)
      lbm_stream_row([&](int dy) { return &f[(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y + h) + dy) % h) * w * kQ]; },
                     &g[y * w * kQ], w);
    f.swap(g);
  }
  return f;
}

inline double lbm_mass(std::span<const double> f) {
  double m = 0;
  for (double v : f) m += v;
  return m;
}

inline RankOutcome run_lbm_rank(Communicator& comm, const WorkloadSpec& spec) {
  const std::size_t w = spec.grid_width(), h = spec.grid_height();
  const int p = comm.size(), me = comm.rank();
  if (w == 0 || h % static_cast<std::size_t>(p) != 0)
    raise(Errc::InvalidConfig, "lattice height " + std::to_string(h) + " not divisible by " + std::to_string(p));
  const std::size_t rows = h / static_cast<std::size_t>(p);
  const std::size_t y0 = rows * static_cast<std::size_t>(me);
  const std::size_t row_len = w * kQ;
  std::vector<double> f(rows * row_len), g(f.size());
  for (std::size_t y = 0; y < rows; ++y)
    for (std::size_t x = 0; x < w; ++x) lbm_initial(spec, y0 + y, x, &f[(y * w + x) * kQ]);
  const double mass0 = comm.allreduce<double>(ReduceOp::Sum, lbm_mass(f));

  const int up = (me + 1) % p, down = (me + p - 1) % p;
  // Ghost rows hold only the 3 populations that stream across the edge;
  // other entries are never read.
  std::vector<double> ghost_below(row_len), ghost_above(row_len);
  RankOutcome out;
  timed_phase(comm, out, [&] {
    for (int t = 0; t < spec.step_count(); ++t) {
      for (std::size_t c = 0; c < rows * w; ++c) lbm_collide(&f[c * kQ]);
      const double* below;  // row y0 - 1
      const double* above;  // row y0 + rows
      Message from_below, from_above;
      if (p == 1) {
        below = &f[(rows - 1) * row_len];
        above = f.data();
      } else {
        auto pack = [&](int dst, int tag, const double* row, const std::array<int, 3>& dirs) {
          SharedBuf b = comm.alloc(3 * w * sizeof(double));
          auto o = b.as<double>();
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < 3; ++k) o[x * 3 + k] = row[x * kQ + static_cast<std::size_t>(dirs[k])];
          comm.send(dst, tag, b);
        };
        pack(up, kTagLbmUp, &f[(rows - 1) * row_len], kUpward);
        pack(down, kTagLbmDown, f.data(), kDownward);
        from_below = comm.recv_ref(down, kTagLbmUp);
        from_above = comm.recv_ref(up, kTagLbmDown);
        auto unpack = [&](const Message& m, std::vector<double>& ghost, const std::array<int, 3>& dirs) {
          const auto* in = reinterpret_cast<const double*>(m.bytes().data());
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < 3; ++k) ghost[x * kQ + static_cast<std::size_t>(dirs[k])] = in[x * 3 + k];
        };
        unpack(from_below, ghost_below, kUpward);
        unpack(from_above, ghost_above, kDownward);
        below = ghost_below.data();
        above = ghost_above.data();
      }
      for (std::size_t y = 0; y < rows; ++y)
        lbm_stream_row(
            [&](int dy) -> const double* {
              if (dy < 0) return y == 0 ? below : &f[(y - 1) * row_len];
              if (dy > 0) return y + 1 == rows ? above : &f[(y + 1) * row_len];
              return &f[y * row_len];
            },
            &g[y * row_len], w);
      f.swap(g);
    }
  });

  const std::vector<double> ref = serial_lbm(spec);
  double max_diff = 0;
  for (std::size_t i = 0; i < f.size(); ++i) max_diff = std::max(max_diff, std::abs(f[i] - ref[y0 * row_len + i]));
  const double global_diff = comm.allreduce<double>(ReduceOp::Max, max_diff);
  const double mass1 = comm.allreduce<double>(ReduceOp::Sum, lbm_mass(f));
  const double drift = std::abs(mass1 - mass0) / std::abs(mass0);
  char buf[128];
  if (max_diff > 1e-10) {
    std::snprintf(buf, sizeof buf, "max abs diff %.3g exceeds 1e-10", max_diff);
    out.detail = buf;
  } else if (drift > 1e-10) {
    std::snprintf(buf, sizeof buf, "relative mass drift %.3g exceeds 1e-10", drift);
    out.detail = buf;
  }
  out.valid = out.detail.empty();
  agree_on_validity(comm, out);
  if (out.valid) {
    std::snprintf(buf, sizeof buf, "max abs diff %.3g, mass drift %.3g", global_diff, drift);
    out.detail = buf;
  }

  Fnv1a hsh;
  hsh.add_values<double>(f);
  out.checksum = hsh.value();
  if (spec.report_output) out.output = f;
  return out;
}

}  // namespace shmpi::bench

// Two-rank ping-pong over by-reference SharedBuf messages.
//   shmpi run --ranks 2 -- ./ping_pong [bytes] [iterations]
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "shmpi/comm.hpp"

int main(int argc, char** argv) {
  const std::size_t bytes = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 65536;
  const int iters = argc > 2 ? std::atoi(argv[2]) : 1000;
  auto comm = shmpi::Communicator::init_from_env();
  if (comm.size() != 2) {
    if (comm.rank() == 0) std::fprintf(stderr, "ping_pong needs exactly 2 ranks\n");
    comm.finalize();
    return 2;
  }
  const int peer = 1 - comm.rank();
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) {
    if (comm.rank() == 0) {
      auto buf = comm.alloc(bytes);
      std::memset(buf.data().data(), i & 0xff, bytes);
      comm.send(peer, 0, buf);
      auto reply = comm.recv_ref(peer, 0);
    } else {
      auto msg = comm.recv_ref(peer, 0);
      auto buf = comm.alloc(bytes);
      std::memcpy(buf.data().data(), msg.bytes().data(), bytes);
      comm.send(peer, 0, buf);
    }
  }
  auto dt = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
  if (comm.rank() == 0)
    std::printf("%s backend: %zu bytes, %d round trips, %.2f us/round trip, %llu payload bytes copied\n",
                std::string(shmpi::to_string(comm.backend())).c_str(), bytes, iters, dt / iters,
                static_cast<unsigned long long>(comm.metrics().payload_bytes_copied));
  comm.finalize();
  return 0;
}

// Minimal SPMD program: run with `shmpi run --ranks 4 -- ./hello_ranks`.
#include <cstdio>

#include "shmpi/comm.hpp"

int main() {
  auto comm = shmpi::Communicator::init_from_env();
  std::printf("hello from rank %d of %d\n", comm.rank(), comm.size());
  std::fflush(stdout);
  comm.finalize();
  return 0;
}

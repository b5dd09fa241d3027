#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "commands.hpp"

int main(int argc, char** argv) {
  // Keep large activation buffers in the heap instead of mapping and
  // unmapping them on every training step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const std::vector<std::string> args(argv, argv + argc);
  return cycledm::cli::run_cli(args, std::cout, std::cerr);
}

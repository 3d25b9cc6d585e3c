#include <iostream>
#include <string>
#include <vector>

#include "protogap/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return protogap::run_command(args, std::cout, std::cerr);
}

#include <iostream>
#include <string>
#include <vector>

#include "cmkt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cmkt::cli::run_command(args, std::cout, std::cerr);
}

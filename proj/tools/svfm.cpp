#include <iostream>
#include <string>
#include <vector>

#include "svfm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return svfm::cli::run(args, std::cout, std::cerr);
}

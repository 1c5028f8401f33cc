#include <iostream>
#include <string>
#include <vector>

#include "dm1/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return dm1::cli::run(args, std::cout, std::cerr);
}

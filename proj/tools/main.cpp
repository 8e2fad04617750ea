#include <iostream>
#include <string>
#include <vector>

#include "covsearch/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return covsearch::cli::run(args, std::cout, std::cerr);
}

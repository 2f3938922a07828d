#include <iostream>
#include <string>
#include <vector>

#include "infobfr/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return infobfr::run_cli(args, std::cout, std::cerr);
}

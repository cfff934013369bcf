#include <iostream>
#include <string>
#include <vector>

#include "ctxrnnt/cli.h"

int main(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ctxrnnt::RunCli(args, std::cout, std::cerr);
}

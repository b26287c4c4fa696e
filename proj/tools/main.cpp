#include <string>
#include <vector>

#include "tsd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tsd::run_cli(std::move(args));
}

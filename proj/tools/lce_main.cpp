#include <vector>

#include "lce/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lce::cli::run(args);
}

#include <string>
#include <vector>

#include "decaypo/config.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return decaypo::run_command(args);
}

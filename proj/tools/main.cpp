#include "mfdet/cli.hpp"

int main(int argc, char** argv) {
  return mfdet::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

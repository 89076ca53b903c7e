#include "mdpg/cli.hpp"

int main(int argc, char** argv) {
  return mdpg::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

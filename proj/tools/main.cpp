#include <iostream>

#include "tapir/cli.hpp"

int main(int argc, char** argv) {
  return tapir::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

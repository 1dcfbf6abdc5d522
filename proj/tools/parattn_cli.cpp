#include "parattn/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return parattn::run_cli(argc, argv, std::cin, std::cout, std::cerr);
}

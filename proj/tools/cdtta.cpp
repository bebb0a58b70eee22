#include <iostream>

#include "cdtta/cli.hpp"

int main(int argc, char** argv) {
  return cdtta::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

#include <iostream>
#include <string>
#include <vector>

#include "dcrn/cli/app.hpp"

int main(int argc, char** argv) {
  return dcrn::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

#include "cli.hpp"

int main(int argc, char** argv) {
  return femtk::cli::main(std::vector<std::string>(argv + 1, argv + argc));
}

#include <string>
#include <vector>

#include "insta/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return insta::cli::run(args);
}

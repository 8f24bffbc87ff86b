#include "lesionsynth/cli.hpp"

int main(int argc, char **argv) {
  return lesionsynth::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}

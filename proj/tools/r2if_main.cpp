#include <vector>

#include "r2if/cli.hpp"

int main(int argc, char** argv) {
    return r2if::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

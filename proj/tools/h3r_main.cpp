#include <string>
#include <vector>

#include "h3r/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return h3r::cli::dispatch(args);
}

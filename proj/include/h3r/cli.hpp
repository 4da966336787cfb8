#pragma once

#include <string>
#include <vector>

namespace h3r::cli {

// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
int dispatch(const std::vector<std::string>& args);

}  // namespace h3r::cli

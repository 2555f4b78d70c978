#pragma once

#include <ostream>

namespace rit {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace rit

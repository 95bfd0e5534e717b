#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace medvit::cli {

// Runs one subcommand. `args` excludes the program name. Returns 0 on success,
// 2 on usage or configuration errors and 1 on runtime failures.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace medvit::cli

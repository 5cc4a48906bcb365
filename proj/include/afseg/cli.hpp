#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace afseg {

/// Subcommands synth, decompose, prototype, train-toy, infer, eval.
/// Returns 0 on success, 1 on invalid input or usage errors, 2 on numerical failure.
int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);
int cli_main(int argc, char** argv);

}  // namespace afseg

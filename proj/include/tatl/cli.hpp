#pragma once

#include <string>
#include <vector>

namespace tatl {

// Runs the command-line interface and returns the process exit code:
// 0 success, 2 usage error, 3 data/runtime error.  `args` excludes the
// program name.  All output artifacts land under --out-dir; every command
// writes a run_manifest.json echoing its fully resolved configuration.
int run_cli(std::vector<std::string> args);

// Convenience wrapper for main(); drops argv[0].
int run_cli(int argc, const char* const* argv);

}  // namespace tatl

#pragma once

namespace voxdiff {

// Full command-line entry point; returns the process exit code
// (0 success, 1 input error, 2 runtime failure).
int cli_main(int argc, const char* const* argv);

}  // namespace voxdiff

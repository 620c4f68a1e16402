#pragma once

namespace stealth {

// Full command dispatch: argv[0] is the program name. Returns the process
// exit code; failures print a diagnostic to stderr instead of throwing.
int run_cli(int argc, const char* const* argv);

}  // namespace stealth

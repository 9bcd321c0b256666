#pragma once

namespace pf {

// Entry point for the command-line tool; linked by the binary and by tests.
// Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 validation
// failure (1 for a failed gradcheck).
int cli_main(int argc, const char* const* argv);

}  // namespace pf

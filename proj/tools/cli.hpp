#pragma once

#include <iosfwd>

namespace p2i::cli {

/// Parses `argv` and runs one subcommand. Progress goes to `out`, errors to
/// `err` as `p2i: error[<code>]: <message>`. Returns the process exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace p2i::cli

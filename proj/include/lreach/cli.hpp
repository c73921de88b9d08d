#pragma once

#include <iosfwd>

namespace lreach {

/// Exit codes: 0 success, 1 validation error, 2 numerical failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lreach

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dcrn::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
/// Failures print one line `error[<category>]: <message>` to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dcrn::cli

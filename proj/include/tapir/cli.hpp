#pragma once

// The `tapir` command line: generate, validate, train, eval, reproduce-all.
// Exit codes: 0 success, 1 usage, 2 validation failure, 3 numeric failure.

#include <ostream>
#include <string>
#include <vector>

namespace tapir {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kValidation = 2;
inline constexpr int kNumeric = 3;
}  // namespace exit_code

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tapir

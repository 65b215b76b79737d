// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace damex {

/// Exit codes shared by every verb.
enum ExitCode : int {
  kExitOk = 0,
  kExitVerificationFailed = 1,
  kExitUsage = 2,
  kExitNumerical = 3,
};

/// Entry point for `damex <verb> [flags]`; verbs are train, eval, analyze,
/// gradcheck and gen-data.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace damex

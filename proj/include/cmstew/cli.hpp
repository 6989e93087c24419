// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cmstew::cli {

// Entry point shared by the binary and in-process tests.  `args` excludes
// the program name.  Exit codes: 0 success, 1 failed verification checks,
// 2 configuration or usage errors, 3 training divergence, 4 IO failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmstew::cli

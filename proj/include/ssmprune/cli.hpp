#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ssmprune {

/// Runs the command-line tool. args excludes the program name. Returns 0 on
/// success, 1 on usage errors, 2 on data or contract errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssmprune

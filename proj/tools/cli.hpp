// Command-line entry points, callable in-process for tests.
#ifndef TSHAMO_TOOLS_CLI_HPP
#define TSHAMO_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace tshamo::cli {

// args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Full configuration with every default filled in.
nlohmann::json default_config();
// Applies "a.b.c=value"; the value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

}  // namespace tshamo::cli

#endif

#pragma once

#include <json.hpp>
#include <string>
#include <vector>

namespace debiaslens {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Entry point of the `debiaslens` binary. args[0] is the program name.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

/// Markdown rendering of a JSON report; the metadata block is left out.
std::string markdown_summary(const std::string& title, const nlohmann::json& report);

/// Copy of a report without its metadata field, for determinism checks.
nlohmann::json strip_metadata(nlohmann::json report);

}  // namespace debiaslens

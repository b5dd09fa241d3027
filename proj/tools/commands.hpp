#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "config.hpp"
#include "json.hpp"

namespace cycledm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;

// Subcommand-specific arguments (paths, flags) as recorded in manifests.
using Args = nlohmann::json;

// Runs one subcommand with a fully resolved configuration. Writes the outputs
// and manifest.json into cfg.out_dir, which it holds locked for the duration.
void run_subcommand(const std::string& name, const RunConfig& cfg, const Args& args);

// Re-runs the subcommand recorded in `manifest` into `out_dir` and compares
// every output file hash. Returns the names of differing outputs.
std::vector<std::string> replay(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                                std::ostream& log);

// Full command line entry point; returns the process exit code.
int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace cycledm::cli

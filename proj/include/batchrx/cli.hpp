#pragma once

// Command implementations behind the `batchrx` executable. Kept in the
// library so tests can drive whole pipelines in-process.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace batchrx::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kIoError = 2,
  kDataError = 3,
  kCheckpointError = 4,
  kBadRequest = 5,
};

/// Runs `batchrx <args...>` (args exclude the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Hex SHA-256 of a file's bytes or of a string.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_string(const std::string& bytes);

/// Worker threads allowed for parallel sections: BATCHRX_THREADS when set to a
/// positive integer, otherwise the hardware concurrency (at least 1).
unsigned worker_count();

/// Writes the tidy plot CSVs derived from a metrics document into `dir` and
/// returns the file names written.
std::vector<std::string> export_plot_csvs(const nlohmann::json& metrics, const std::filesystem::path& dir);

}  // namespace batchrx::cli

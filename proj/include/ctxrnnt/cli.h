// ctxrnnt/cli.h
//
// Command-line front end. Exit codes: 0 success, 1 a verification command
// found a mismatch, 2 usage or configuration error.

#ifndef CTXRNNT_CLI_H_
#define CTXRNNT_CLI_H_

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace ctxrnnt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerifyFailed = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int RunCli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

// Lowercase hex SHA-256 of a file's bytes.
std::string FileSha256(const std::filesystem::path &path);

// Writes `manifest` to `path` through a temporary file and a rename.
void WriteManifestAtomically(const nlohmann::json &manifest,
                             const std::filesystem::path &path);

}  // namespace ctxrnnt

#endif  // CTXRNNT_CLI_H_

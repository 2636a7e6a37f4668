#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cdvito::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitUsage = 2;

// Worker threads for `ablate` and multi-episode `eval` when --workers is not
// given. Never affects results.
inline constexpr const char* kWorkersEnv = "CDVITO_WORKERS";

inline constexpr const char* kArtifactVersion = "0.1.0";

// Hex SHA-256 of a file's bytes.
std::string file_sha256(const std::string& path);

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cdvito::cli

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace circuitscope {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 1;
inline constexpr int kExitRuntimeError = 2;

// Git blob id of a byte string: sha1("blob <size>\0" + bytes), lowercase hex.
std::string git_blob_hash(const std::string& bytes);

// Entry point of the command-line tool; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace circuitscope

#pragma once

#include <map>
#include <string>
#include <vector>

namespace abpe::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// SHA-256 of a file's bytes, lowercase hex with a "sha256:" prefix.
std::string file_sha256(const std::string& path);

/// Reproducibility record written next to every subcommand's outputs:
/// command, effective config, seed, threads, input content hashes and output
/// names. Deliberately contains no timestamps.
struct Manifest {
    std::string command;
    std::map<std::string, std::string> effective_config;
    std::uint64_t seed = 0;
    int threads = 0;
    std::vector<std::string> inputs;   // paths, hashed on write
    std::vector<std::string> outputs;  // paths, names recorded
};

/// Writes "<base_path>.manifest.json".
void write_manifest(const Manifest& m, const std::string& base_path);

}  // namespace abpe::cli

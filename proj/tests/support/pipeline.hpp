#pragma once

// Runs the command chain gen-corpus -> pretrain -> trace -> steer -> generate
// in one directory and collects the digest of every artifact it wrote.

#include <filesystem>
#include <map>
#include <string>

namespace costom::support {

/// Small enough to finish in seconds; every command still runs for real.
extern const char* const kTinyPipeline;

/// Runs each command of `ini` into root/<dir> with paths.root set to root;
/// gen-corpus writes to root/corpus, the others to a directory named after
/// the command. `overrides` replaces config values. Throws when a command
/// fails. Keys are "<dir>/<file>".
std::map<std::string, std::string> run_pipeline(const std::filesystem::path& root, const std::string& ini,
                                                const std::map<std::string, std::string>& overrides = {});

}  // namespace costom::support

#pragma once

// Command implementations behind the CLI. Each command reads an INI config,
// writes its artifacts plus a manifest into one output directory, and is a
// pure function of the config and its input files apart from wall time.

#include "costom/steering.hpp"

#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace costom {

inline constexpr const char* kArtifactVersion = "1.0.0";

/// Flat key-value configuration with [sections]. Relative paths resolve
/// against paths.root when set, else against the directory of the config file.
class Config {
public:
    static Config load(const std::filesystem::path& path);
    static Config parse(const std::string& text, std::filesystem::path base_dir = ".");

    bool has(const std::string& key) const;
    /// Throws ConfigError naming the key when absent or malformed.
    std::string str(const std::string& key) const;
    std::string str(const std::string& key, const std::string& fallback) const;
    long long integer(const std::string& key) const;
    long long integer(const std::string& key, long long fallback) const;
    double real(const std::string& key) const;
    double real(const std::string& key, double fallback) const;
    bool flag(const std::string& key, bool fallback) const;
    std::vector<int> int_list(const std::string& key) const;
    std::filesystem::path path(const std::string& key) const;

    void set(const std::string& key, const std::string& value);
    /// Every key, "section.key" -> value.
    nlohmann::json echo() const;

private:
    boost::property_tree::ptree tree_;
    std::filesystem::path base_dir_;
};

struct RunOptions {
    std::filesystem::path out;
    std::optional<std::uint64_t> seed;       // overrides run.seed
    std::optional<std::vector<int>> layers;  // overrides the swept layers
};

/// Exclusive use of an output directory for the lifetime of the object.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path file_;
};

struct RunManifest {
    std::string command;
    nlohmann::json config;
    nlohmann::json seeds = nlohmann::json::object();
    std::map<std::string, std::string> inputs;   // path -> sha256
    std::map<std::string, std::string> outputs;  // file name -> sha256
    double wall_seconds = 0.0;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json json() const;
};

// ---- generation heuristics ---------------------------------------------------

struct GenerationScores {
    double tom = 0.0;
    double coherence = 0.0;
    double strategy = 0.0;
};

/// Scores one response against the dialogue state after `turns` turns.
///  tom: 1 when the offer hands the partner its true top item (negotiation)
///       or the persuasion move answers the persuadee's actual belief.
///  coherence: share of response tokens that are lexicon words and do not
///       repeat an offer the partner already rejected.
///  strategy: 1 for the move that reaches agreement, 0.5 for another offer,
///       0.25 for any other recognizable dialogue act, 0 otherwise.
GenerationScores score_response(const DialogueSample& sample, int turns, std::span<const int> response);

/// Dialogue act of a response under the template grammar, if it parses.
std::optional<Act> parse_response_act(Scenario scenario, const std::vector<std::string>& words);

// ---- commands -----------------------------------------------------------------

RunManifest cmd_gen_corpus(const Config& config, const RunOptions& options);
RunManifest cmd_pretrain(const Config& config, const RunOptions& options);
RunManifest cmd_trace(const Config& config, const RunOptions& options);
RunManifest cmd_steer(const Config& config, const RunOptions& options);
RunManifest cmd_generate(const Config& config, const RunOptions& options);
RunManifest cmd_probe(const Config& config, const RunOptions& options);

/// Dispatches by name; maps ConfigError to exit code 2 and ContractError to 3.
int run_command(const std::string& name, const std::filesystem::path& config_path, const RunOptions& options);

}  // namespace costom

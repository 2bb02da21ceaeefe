#pragma once

// Scripted two-agent dialogues with ground-truth mental-state labels.
//
// Every turn is rendered from a small template grammar, so the whole corpus
// lives inside a closed lexicon and a word-level vocabulary of fixed ids.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace costom {

enum class Scenario { negotiation, persuasion };
enum class Act { propose, accept, reject, ask, inform };
enum class StateKind { belief, desire, intention };
enum class Stage { beginning, middle, final };

inline constexpr std::array<Act, 5> kAllActs{Act::propose, Act::accept, Act::reject, Act::ask, Act::inform};
inline constexpr std::array<StateKind, 3> kAllStates{StateKind::belief, StateKind::desire, StateKind::intention};
inline constexpr std::array<std::string_view, 3> kItems{"food", "water", "firewood"};
inline constexpr std::array<std::string_view, 4> kDrinks{"tea", "coffee", "juice", "soda"};

std::string_view to_string(Scenario s);
std::string_view to_string(Act a);
std::string_view to_string(StateKind k);
std::string_view to_string(Stage s);
Scenario parse_scenario(std::string_view s);
Act parse_act(std::string_view s);
StateKind parse_state(std::string_view s);
Stage parse_stage(std::string_view s);

/// Word-level vocabulary over the template lexicon. Ids 0..2 are reserved.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kPlaceholder = 2;

    explicit Vocab(std::vector<std::string> words);

    int size() const { return static_cast<int>(words_.size()); }
    int id(std::string_view word) const;  // kUnk when absent
    const std::string& word(int id) const;
    const std::vector<std::string>& words() const { return words_; }

    std::vector<int> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const int> ids) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

/// The fixed vocabulary shared by every scenario.
const Vocab& vocab();

/// Labels of one agent. Desire lists items from most to least wanted
/// (negotiation) or the wanted drink first (persuasion).
struct MentalStateLabel {
    int agent = 1;
    std::vector<std::string> desire;
    std::string belief = "unknown";
    Act intention = Act::inform;
    bool operator==(const MentalStateLabel&) const = default;
};

struct Turn {
    int speaker = 1;  // 1 or 2
    Act act = Act::inform;
    std::string text;
    bool operator==(const Turn&) const = default;
};

struct DialogueSample {
    int id = 0;
    Scenario scenario = Scenario::negotiation;
    std::vector<Turn> turns;
    /// snapshots[t]: labels of agents 1 and 2 once turns 0..t are visible.
    std::vector<std::array<MentalStateLabel, 2>> snapshots;
    Stage stage = Stage::final;
    int opening_turns = 2;  // turns until both agents have stated their position

    const std::array<MentalStateLabel, 2>& final_labels() const { return snapshots.back(); }
    /// Number of visible turns at a stage.
    int cut(Stage s) const;
    int cut() const { return cut(stage); }
    bool operator==(const DialogueSample&) const = default;
};

std::string speaker_name(Scenario s, int agent);

/// Dialogue text of the first `turns` turns, "speaker : text" per turn.
std::string dialogue_text(const DialogueSample& s, int turns);
std::vector<int> dialogue_tokens(const DialogueSample& s, int turns);

std::vector<DialogueSample> gen_negotiation(std::uint64_t seed, int n);
std::vector<DialogueSample> gen_persuasion(std::uint64_t seed, int n);
std::vector<DialogueSample> generate_corpus(Scenario scenario, std::uint64_t seed, int n);

struct ProbeQuery {
    StateKind kind = StateKind::desire;
    int agent = 1;
    std::vector<int> question;
    std::vector<std::vector<int>> candidates;
    int gold = 0;

    /// Rejects empty or repeated candidates and an out-of-range gold index.
    void validate() const;
};

/// One query per (state kind, agent), gold taken from the snapshot after
/// `turns` visible turns.
std::vector<ProbeQuery> make_queries(const DialogueSample& s, int turns);
std::vector<ProbeQuery> make_queries(const DialogueSample& s, Stage stage);

/// Next-move instruction for the agent who makes offers, with the response
/// that would move the dialogue to agreement.
struct TaskInstruction {
    int agent = 1;
    std::vector<int> prompt;
    std::vector<int> gold_response;
};

TaskInstruction make_task(const DialogueSample& s, int turns);

/// Plain-text documents for language-model pretraining: each dialogue cut
/// once per stage, followed by all of its questions with answers and the
/// task instruction with its response, in a seeded random order.
std::vector<std::vector<int>> pretraining_documents(const std::vector<DialogueSample>& samples);

struct CorpusSplit {
    std::vector<DialogueSample> train, val, eval;
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
};

/// Seeded shuffle, then val and eval sizes are floor(ratio * n) with the
/// remainder going to train; eval is filled by stage quotas 1:2:1.
CorpusSplit split(const std::vector<DialogueSample>& corpus, std::array<double, 3> ratios, std::uint64_t seed);

void to_json(nlohmann::json& j, const DialogueSample& s);
void from_json(const nlohmann::json& j, DialogueSample& s);

void write_jsonl(const std::filesystem::path& path, const std::vector<DialogueSample>& samples);
std::vector<DialogueSample> read_jsonl(const std::filesystem::path& path);
void write_vocab(const std::filesystem::path& path, const Vocab& v);

/// SHA-256 of the canonical JSONL serialization.
std::string corpus_digest(const std::vector<DialogueSample>& samples);

}  // namespace costom

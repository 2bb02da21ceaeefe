#include "costom/taskgen.hpp"

#include "costom/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace costom {

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& all, const char* what) {
    for (E e : all) {
        if (to_string(e) == s) return e;
    }
    throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr std::array<Scenario, 2> kScenarios{Scenario::negotiation, Scenario::persuasion};
constexpr std::array<Stage, 3> kStages{Stage::beginning, Stage::middle, Stage::final};

// Order is part of the on-disk format: ids are positions in this list.
const std::vector<std::string> kLexicon{
    "<pad>", "<unk>", "<ph>",
    ".", ",", "?", ":",
    "agent1", "agent2", "persuader", "persuadee",
    "food", "water", "firewood", "tea", "coffee", "juice", "soda",
    "hello", "hi", "i", "need", "most", "and", "least", "what", "do", "you", "take", "no", "deal", "thank", "yes",
    "should", "try", "like", "more", "than", "think", "is", "cheap", "costly", "today", "ok", "now", "will",
    "question", "answer", "how", "does", "rank", "the", "items", "high", "medium", "low", "needs", "next", "want",
    "of", "likes", "unknown", "propose", "accept", "reject", "ask", "inform",
    "task", "are", "give", "offer", "argument", "response",
};

std::string join(const std::vector<std::string>& words, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += sep;
        out += words[i];
    }
    return out;
}

std::vector<std::string> others(std::string_view first, std::string_view skip = {}) {
    std::vector<std::string> out;
    for (std::string_view item : kItems) {
        if (item != first && item != skip) out.emplace_back(item);
    }
    return out;
}

std::string propose_text(const std::string& give) {
    const auto keep = others(give);
    return "you take " + give + " and i take " + keep[0] + " and " + keep[1] + " .";
}

// Intention of each agent after turn t: its next act, or its last act when
// it does not speak again.
Act intention_after(const std::vector<Turn>& turns, std::size_t t, int agent) {
    for (std::size_t u = t + 1; u < turns.size(); ++u) {
        if (turns[u].speaker == agent) return turns[u].act;
    }
    for (std::size_t u = t + 1; u-- > 0;) {
        if (turns[u].speaker == agent) return turns[u].act;
    }
    throw std::logic_error("agent never speaks");
}

Stage draw_stage(std::mt19937_64& rng) {
    std::discrete_distribution<int> d{1.0, 2.0, 1.0};
    return kStages[static_cast<std::size_t>(d(rng))];
}

DialogueSample negotiation_sample(std::uint64_t seed, int id) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(id)));
    std::array<std::vector<std::string>, 2> desire;
    for (auto& d : desire) {
        d.assign(kItems.begin(), kItems.end());
        std::shuffle(d.begin(), d.end(), rng);
    }
    const bool ask_first = std::bernoulli_distribution(0.5)(rng);
    const int mistakes = std::uniform_int_distribution<int>(0, 2)(rng);

    DialogueSample s;
    s.id = id;
    s.scenario = Scenario::negotiation;
    std::vector<int> reveals;  // agent whose top item a turn states, or 0
    auto say = [&](int speaker, Act act, std::string text, int reveal) {
        s.turns.push_back({speaker, act, std::move(text)});
        reveals.push_back(reveal);
    };
    auto inform = [&](int agent, const char* greeting) {
        const auto& d = desire[agent - 1];
        say(agent, Act::inform, std::string(greeting) + "i need " + d[0] + " most and " + d[2] + " least .", agent);
    };
    if (ask_first) {
        say(1, Act::ask, "hello . what do you need most ?", 0);
        inform(2, "");
        inform(1, "");
    } else {
        inform(1, "hello . ");
        inform(2, "hi . ");
    }
    s.opening_turns = static_cast<int>(s.turns.size());

    // turns alternate, so whoever did not speak last makes the offers
    const int proposer = s.turns.back().speaker == 1 ? 2 : 1;
    const int partner = 3 - proposer;
    const std::string& partner_top = desire[partner - 1][0];
    auto wrong = others(partner_top);
    std::shuffle(wrong.begin(), wrong.end(), rng);
    for (int m = 0; m < mistakes; ++m) {
        say(proposer, Act::propose, propose_text(wrong[static_cast<std::size_t>(m)]), 0);
        say(partner, Act::reject, "no , i need " + partner_top + " most .", partner);
    }
    say(proposer, Act::propose, propose_text(partner_top), 0);
    say(partner, Act::accept, "deal , thank you .", 0);

    std::array<bool, 2> known{false, false};  // agent i knows the other's top item
    for (std::size_t t = 0; t < s.turns.size(); ++t) {
        if (reveals[t] != 0) known[static_cast<std::size_t>(2 - reveals[t])] = true;
        std::array<MentalStateLabel, 2> snap;
        for (int a = 1; a <= 2; ++a) {
            MentalStateLabel& l = snap[static_cast<std::size_t>(a - 1)];
            l.agent = a;
            l.desire = desire[static_cast<std::size_t>(a - 1)];
            l.belief = known[static_cast<std::size_t>(a - 1)] ? desire[static_cast<std::size_t>(2 - a)][0] : "unknown";
            l.intention = intention_after(s.turns, t, a);
        }
        s.snapshots.push_back(std::move(snap));
    }
    s.stage = draw_stage(rng);
    return s;
}

DialogueSample persuasion_sample(std::uint64_t seed, int id) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(id)));
    std::uniform_int_distribution<std::size_t> drink(0, kDrinks.size() - 1);
    const std::string target(kDrinks[drink(rng)]);
    const std::string liked(kDrinks[drink(rng)]);
    std::string other = liked;
    if (liked == target) {
        while (other == target) other = kDrinks[drink(rng)];
    } else {
        other = target;
    }
    const bool costly = std::bernoulli_distribution(0.5)(rng);
    const bool shift = costly && std::bernoulli_distribution(0.5)(rng);

    DialogueSample s;
    s.id = id;
    s.scenario = Scenario::persuasion;
    // persuader is agent 1, persuadee agent 2
    std::vector<std::string> beliefs;  // persuadee's view of the target after each turn
    std::vector<bool> liked_known;
    std::string view = "unknown";
    bool told = false;
    auto say = [&](int speaker, Act act, std::string text) {
        s.turns.push_back({speaker, act, std::move(text)});
        beliefs.push_back(view);
        liked_known.push_back(told);
    };
    say(1, Act::inform, "hello . you should try " + target + " .");
    told = true;
    say(2, Act::inform, "i like " + liked + " more than " + other + " .");
    s.opening_turns = 2;
    say(1, Act::ask, "do you think " + target + " is costly ?");
    view = costly ? "costly" : "cheap";
    say(2, Act::inform, costly ? "yes , i think " + target + " is costly ." : "no , i think " + target + " is cheap .");
    if (shift) {
        say(1, Act::inform, target + " is cheap today .");
        view = "cheap";
        say(2, Act::inform, "ok , now i think " + target + " is cheap .");
    }
    say(1, Act::propose, "will you take " + target + " ?");
    if (view == "cheap" || liked == target) {
        say(2, Act::accept, "yes , i will take " + target + " .");
    } else {
        say(2, Act::reject, "no , i will take " + liked + " .");
    }

    for (std::size_t t = 0; t < s.turns.size(); ++t) {
        std::array<MentalStateLabel, 2> snap;
        snap[0].agent = 1;
        snap[0].desire = {target};
        snap[0].belief = liked_known[t] ? liked : "unknown";
        snap[0].intention = intention_after(s.turns, t, 1);
        snap[1].agent = 2;
        snap[1].desire = {liked, other};
        snap[1].belief = beliefs[t];
        snap[1].intention = intention_after(s.turns, t, 2);
        s.snapshots.push_back(std::move(snap));
    }
    s.stage = draw_stage(rng);
    return s;
}

template <class Fn>
std::vector<DialogueSample> generate_n(int n, Fn make) {
    if (n < 1) throw ContractError("corpus size must be at least 1");
    std::vector<DialogueSample> out(static_cast<std::size_t>(n));
    parallel_for(out.size(), [&](std::size_t i) { out[i] = make(static_cast<int>(i)); });
    return out;
}

std::vector<int> tok(const std::string& text) { return vocab().tokenize(text); }

ProbeQuery build_query(StateKind kind, int agent, const std::string& question, const std::vector<std::string>& answers,
                       const std::string& gold) {
    ProbeQuery q;
    q.kind = kind;
    q.agent = agent;
    q.question = tok("question : " + question + " ? answer :");
    const auto it = std::find(answers.begin(), answers.end(), gold);
    if (it == answers.end()) throw std::logic_error("gold answer '" + gold + "' is not a candidate");
    q.gold = static_cast<int>(it - answers.begin());
    for (const auto& a : answers) q.candidates.push_back(tok(a + " ."));
    return q;
}

std::vector<std::string> desire_answers() {
    std::vector<std::string> items(kItems.begin(), kItems.end());
    std::sort(items.begin(), items.end());
    std::vector<std::string> out;
    do {
        out.push_back("high " + items[0] + " medium " + items[1] + " low " + items[2]);
    } while (std::next_permutation(items.begin(), items.end()));
    return out;
}

std::vector<std::string> with_unknown(std::vector<std::string> v) {
    v.emplace_back("unknown");
    return v;
}

std::vector<std::string> act_answers() {
    std::vector<std::string> out;
    for (Act a : kAllActs) out.emplace_back(to_string(a));
    return out;
}

}  // namespace

std::string_view to_string(Scenario s) { return s == Scenario::negotiation ? "negotiation" : "persuasion"; }

std::string_view to_string(Act a) {
    switch (a) {
        case Act::propose: return "propose";
        case Act::accept: return "accept";
        case Act::reject: return "reject";
        case Act::ask: return "ask";
        case Act::inform: return "inform";
    }
    return "?";
}

std::string_view to_string(StateKind k) {
    switch (k) {
        case StateKind::belief: return "belief";
        case StateKind::desire: return "desire";
        case StateKind::intention: return "intention";
    }
    return "?";
}

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::beginning: return "beginning";
        case Stage::middle: return "middle";
        case Stage::final: return "final";
    }
    return "?";
}

Scenario parse_scenario(std::string_view s) { return parse_enum(s, kScenarios, "scenario"); }
Act parse_act(std::string_view s) { return parse_enum(s, kAllActs, "act"); }
StateKind parse_state(std::string_view s) { return parse_enum(s, kAllStates, "state kind"); }
Stage parse_stage(std::string_view s) { return parse_enum(s, kStages, "stage"); }

// ---- vocabulary ----------------------------------------------------------------

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
            throw ContractError("vocabulary word '" + words_[i] + "' appears twice");
        }
    }
}

int Vocab::id(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) throw ContractError("token id " + std::to_string(id) + " outside the vocabulary");
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::tokenize(std::string_view text) const {
    std::vector<int> ids;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) ids.push_back(id(w));
    return ids;
}

std::string Vocab::detokenize(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

const Vocab& vocab() {
    static const Vocab v(kLexicon);
    return v;
}

// ---- samples ---------------------------------------------------------------------

int DialogueSample::cut(Stage s) const {
    const int total = static_cast<int>(turns.size());
    switch (s) {
        case Stage::beginning: return opening_turns;
        case Stage::middle: return (opening_turns + total + 1) / 2;
        case Stage::final: return total;
    }
    return total;
}

std::string speaker_name(Scenario s, int agent) {
    if (s == Scenario::negotiation) return agent == 1 ? "agent1" : "agent2";
    return agent == 1 ? "persuader" : "persuadee";
}

std::string dialogue_text(const DialogueSample& s, int turns) {
    if (turns < 1 || turns > static_cast<int>(s.turns.size())) {
        throw ContractError("dialogue " + std::to_string(s.id) + " has " + std::to_string(s.turns.size()) +
                            " turns, cannot show " + std::to_string(turns));
    }
    std::vector<std::string> parts;
    for (int t = 0; t < turns; ++t) {
        const Turn& turn = s.turns[static_cast<std::size_t>(t)];
        parts.push_back(speaker_name(s.scenario, turn.speaker) + " : " + turn.text);
    }
    return join(parts);
}

std::vector<int> dialogue_tokens(const DialogueSample& s, int turns) { return tok(dialogue_text(s, turns)); }

std::vector<DialogueSample> gen_negotiation(std::uint64_t seed, int n) {
    return generate_n(n, [seed](int id) { return negotiation_sample(seed, id); });
}

std::vector<DialogueSample> gen_persuasion(std::uint64_t seed, int n) {
    return generate_n(n, [seed](int id) { return persuasion_sample(seed, id); });
}

std::vector<DialogueSample> generate_corpus(Scenario scenario, std::uint64_t seed, int n) {
    return scenario == Scenario::negotiation ? gen_negotiation(seed, n) : gen_persuasion(seed, n);
}

// ---- queries ---------------------------------------------------------------------

void ProbeQuery::validate() const {
    if (candidates.empty()) throw ContractError("query has no candidates");
    std::set<std::vector<int>> seen;
    for (const auto& c : candidates) {
        if (c.empty()) throw ContractError("query has an empty candidate");
        if (!seen.insert(c).second) throw ContractError("query candidates are not pairwise distinct");
    }
    if (gold < 0 || gold >= static_cast<int>(candidates.size())) {
        throw ContractError("query gold index " + std::to_string(gold) + " outside the candidate list");
    }
    if (question.empty()) throw ContractError("query has no question tokens");
}

std::vector<ProbeQuery> make_queries(const DialogueSample& s, int turns) {
    if (turns < 1 || turns > static_cast<int>(s.turns.size())) {
        throw ContractError("make_queries: cut of " + std::to_string(turns) + " turns is outside dialogue " +
                            std::to_string(s.id));
    }
    const auto& snap = s.snapshots[static_cast<std::size_t>(turns - 1)];
    std::vector<ProbeQuery> out;
    for (StateKind kind : kAllStates) {
        for (int a = 1; a <= 2; ++a) {
            const MentalStateLabel& l = snap[static_cast<std::size_t>(a - 1)];
            const std::string me = speaker_name(s.scenario, a);
            const std::string them = speaker_name(s.scenario, 3 - a);
            if (kind == StateKind::intention) {
                out.push_back(build_query(kind, a, "what will " + me + " do next", act_answers(),
                                          std::string(to_string(l.intention))));
            } else if (s.scenario == Scenario::negotiation) {
                if (kind == StateKind::desire) {
                    out.push_back(build_query(kind, a, "how does " + me + " rank the items", desire_answers(),
                                              "high " + l.desire[0] + " medium " + l.desire[1] + " low " + l.desire[2]));
                } else {
                    out.push_back(build_query(kind, a, "what does " + me + " think " + them + " needs most",
                                              with_unknown({kItems.begin(), kItems.end()}), l.belief));
                }
            } else {
                const std::vector<std::string> drinks(kDrinks.begin(), kDrinks.end());
                if (kind == StateKind::desire) {
                    out.push_back(build_query(kind, a, "what does " + me + " want", drinks, l.desire[0]));
                } else if (a == 1) {
                    out.push_back(build_query(kind, a, "what does " + me + " think " + them + " likes", with_unknown(drinks),
                                              l.belief));
                } else {
                    const std::string& target = snap[0].desire[0];
                    out.push_back(build_query(kind, a, "what does " + me + " think of " + target,
                                              {"cheap", "costly", "unknown"}, l.belief));
                }
            }
        }
    }
    return out;
}

std::vector<ProbeQuery> make_queries(const DialogueSample& s, Stage stage) { return make_queries(s, s.cut(stage)); }

TaskInstruction make_task(const DialogueSample& s, int turns) {
    if (turns < 1 || turns > static_cast<int>(s.turns.size())) {
        throw ContractError("make_task: cut of " + std::to_string(turns) + " turns is outside dialogue " + std::to_string(s.id));
    }
    TaskInstruction t;
    const auto& snap = s.snapshots[static_cast<std::size_t>(turns - 1)];
    if (s.scenario == Scenario::negotiation) {
        // the offer maker is whoever proposes first after the opening
        t.agent = s.turns[static_cast<std::size_t>(s.opening_turns)].speaker;
        const std::string& partner_top = snap[static_cast<std::size_t>(2 - t.agent)].desire[0];
        t.prompt = tok("task : you are " + speaker_name(s.scenario, t.agent) + " . give the next offer . response :");
        t.gold_response = tok(propose_text(partner_top));
    } else {
        t.agent = 1;
        const std::string& target = snap[0].desire[0];
        t.prompt = tok("task : you are persuader . give the next argument . response :");
        t.gold_response = tok(snap[1].belief == "costly" ? target + " is cheap today ." : "will you take " + target + " ?");
    }
    return t;
}

std::vector<std::vector<int>> pretraining_documents(const std::vector<DialogueSample>& samples) {
    std::vector<std::vector<int>> docs;
    for (const DialogueSample& s : samples) {
        std::set<int> cuts;
        for (Stage st : kStages) cuts.insert(s.cut(st));
        for (int cut : cuts) {
            // every question of this cut in one document, in a per-cut random order
            std::vector<std::vector<int>> parts;
            for (const ProbeQuery& q : make_queries(s, cut)) {
                std::vector<int> p = q.question;
                const auto& ans = q.candidates[static_cast<std::size_t>(q.gold)];
                p.insert(p.end(), ans.begin(), ans.end());
                parts.push_back(std::move(p));
            }
            const TaskInstruction task = make_task(s, cut);
            std::vector<int> p = task.prompt;
            p.insert(p.end(), task.gold_response.begin(), task.gold_response.end());
            parts.push_back(std::move(p));
            std::mt19937_64 rng(mix_seed(static_cast<std::uint64_t>(s.id), static_cast<std::uint64_t>(cut)));
            std::shuffle(parts.begin(), parts.end(), rng);
            std::vector<int> d = dialogue_tokens(s, cut);
            for (const auto& part : parts) d.insert(d.end(), part.begin(), part.end());
            docs.push_back(std::move(d));
        }
    }
    return docs;
}

// ---- split -------------------------------------------------------------------------

CorpusSplit split(const std::vector<DialogueSample>& corpus, std::array<double, 3> ratios, std::uint64_t seed) {
    if (corpus.size() < 4) throw ContractError("split: corpus of " + std::to_string(corpus.size()) + " samples is smaller than 4");
    for (double r : ratios) {
        if (!(r >= 0.0)) throw ContractError("split: ratios must be non-negative");
    }
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ContractError("split: ratios must sum to 1");

    const std::size_t n = corpus.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, 0x73706c6974));
    std::shuffle(order.begin(), order.end(), rng);

    auto floor_size = [n](double r) { return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9)); };
    const std::size_t n_val = floor_size(ratios[1]);
    const std::size_t n_eval = floor_size(ratios[2]);

    // eval quotas 1:2:1, any slack from a rounding remainder goes to the middle stage
    std::array<std::size_t, 3> quota{n_eval / 4, 0, n_eval / 4};
    quota[1] = n_eval - quota[0] - quota[2];

    CorpusSplit out;
    out.seed = seed;
    out.ratios = ratios;
    std::vector<bool> used(n, false);
    for (std::size_t i : order) {
        auto& q = quota[static_cast<std::size_t>(corpus[i].stage)];
        if (q > 0) {
            --q;
            used[i] = true;
            out.eval.push_back(corpus[i]);
        }
    }
    // a stage short of samples is topped up from the rest in shuffled order
    for (std::size_t i : order) {
        if (out.eval.size() >= n_eval) break;
        if (!used[i]) {
            used[i] = true;
            out.eval.push_back(corpus[i]);
        }
    }
    for (std::size_t i : order) {
        if (used[i]) continue;
        if (out.val.size() < n_val) {
            out.val.push_back(corpus[i]);
        } else {
            out.train.push_back(corpus[i]);
        }
    }
    return out;
}

// ---- serialization ----------------------------------------------------------------

void to_json(nlohmann::json& j, const DialogueSample& s) {
    j = nlohmann::json{{"id", s.id}, {"scenario", to_string(s.scenario)}, {"stage", to_string(s.stage)},
                       {"opening_turns", s.opening_turns}};
    auto& turns = j["turns"] = nlohmann::json::array();
    for (const Turn& t : s.turns) {
        turns.push_back({{"speaker", speaker_name(s.scenario, t.speaker)}, {"act", to_string(t.act)}, {"text", t.text}});
    }
    auto labels = [](const std::array<MentalStateLabel, 2>& snap) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& l : snap) {
            arr.push_back({{"agent", l.agent}, {"desire", l.desire}, {"belief", l.belief}, {"intention", to_string(l.intention)}});
        }
        return arr;
    };
    auto& snaps = j["label_snapshots"] = nlohmann::json::array();
    for (const auto& snap : s.snapshots) snaps.push_back(labels(snap));
    j["final_labels"] = labels(s.final_labels());
}

void from_json(const nlohmann::json& j, DialogueSample& s) {
    s.id = j.at("id").get<int>();
    s.scenario = parse_scenario(j.at("scenario").get<std::string>());
    s.stage = parse_stage(j.at("stage").get<std::string>());
    s.opening_turns = j.at("opening_turns").get<int>();
    s.turns.clear();
    for (const auto& t : j.at("turns")) {
        const std::string who = t.at("speaker").get<std::string>();
        const int speaker = who == speaker_name(s.scenario, 1) ? 1 : who == speaker_name(s.scenario, 2) ? 2 : 0;
        if (speaker == 0) throw ConfigError("unknown speaker '" + who + "' in sample " + std::to_string(s.id));
        s.turns.push_back({speaker, parse_act(t.at("act").get<std::string>()), t.at("text").get<std::string>()});
    }
    s.snapshots.clear();
    for (const auto& snap : j.at("label_snapshots")) {
        std::array<MentalStateLabel, 2> labels;
        for (std::size_t a = 0; a < 2; ++a) {
            const auto& l = snap.at(a);
            labels[a] = {l.at("agent").get<int>(), l.at("desire").get<std::vector<std::string>>(),
                         l.at("belief").get<std::string>(), parse_act(l.at("intention").get<std::string>())};
        }
        s.snapshots.push_back(std::move(labels));
    }
    if (s.snapshots.size() != s.turns.size()) {
        throw ConfigError("sample " + std::to_string(s.id) + " has " + std::to_string(s.snapshots.size()) +
                          " label snapshots for " + std::to_string(s.turns.size()) + " turns");
    }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<DialogueSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& s : samples) out << nlohmann::json(s).dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<DialogueSample> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read corpus " + path.string());
    std::vector<DialogueSample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(nlohmann::json::parse(line).get<DialogueSample>());
    }
    return out;
}

void write_vocab(const std::filesystem::path& path, const Vocab& v) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& w : v.words()) out << w << '\n';
}

std::string corpus_digest(const std::vector<DialogueSample>& samples) {
    Sha256 h;
    for (const auto& s : samples) h.update(nlohmann::json(s).dump()).update("\n");
    return h.hex();
}

}  // namespace costom

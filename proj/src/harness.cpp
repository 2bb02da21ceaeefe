#include "costom/harness.hpp"

#include "costom/util.hpp"

#include <boost/property_tree/ini_parser.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace costom {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

// ---- config -----------------------------------------------------------------------

Config Config::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

Config Config::parse(const std::string& text, fs::path base_dir) {
    Config c;
    c.base_dir_ = std::move(base_dir);
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, c.tree_);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.message() + " at line " + std::to_string(e.line()));
    }
    return c;
}

bool Config::has(const std::string& key) const { return tree_.get_optional<std::string>(key).has_value(); }

std::string Config::str(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(key);
    if (!v) throw ConfigError("missing config key '" + key + "'");
    return *v;
}

std::string Config::str(const std::string& key, const std::string& fallback) const {
    return tree_.get<std::string>(key, fallback);
}

long long Config::integer(const std::string& key) const {
    const std::string s = str(key);
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + s + "'");
    }
}

long long Config::integer(const std::string& key, long long fallback) const { return has(key) ? integer(key) : fallback; }

double Config::real(const std::string& key) const {
    const std::string s = str(key);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
    }
}

double Config::real(const std::string& key, double fallback) const { return has(key) ? real(key) : fallback; }

bool Config::flag(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + s + "'");
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

}  // namespace

std::vector<int> Config::int_list(const std::string& key) const {
    std::vector<int> out;
    for (const std::string& item : split_list(str(key))) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "' expects a comma-separated integer list, got '" + str(key) + "'");
        }
    }
    return out;
}

fs::path Config::path(const std::string& key) const {
    fs::path p = str(key);
    if (p.is_absolute()) return p;
    // paths.root, when present, anchors every other relative path
    if (key != "paths.root" && has("paths.root")) return path("paths.root") / p;
    return base_dir_ / p;
}

void Config::set(const std::string& key, const std::string& value) { tree_.put(key, value); }

nlohmann::json Config::echo() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [section, body] : tree_) {
        if (body.empty()) {
            j[section] = body.data();
            continue;
        }
        for (const auto& [key, value] : body) j[section + "." + key] = value.data();
    }
    return j;
}

// ---- lock and manifest ---------------------------------------------------------------

DirectoryLock::DirectoryLock(const fs::path& dir) : file_(dir / ".costom.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(file_.c_str(), "wx");
    if (f == nullptr) {
        file_.clear();
        throw ContractError("output directory " + dir.string() + " is locked by another run (remove .costom.lock if stale)");
    }
    std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
    if (!file_.empty()) {
        std::error_code ec;
        fs::remove(file_, ec);
    }
}

nlohmann::json RunManifest::json() const {
    return {{"command", command}, {"version", kArtifactVersion}, {"config", config},      {"seeds", seeds},
            {"inputs", inputs},   {"outputs", outputs},         {"wall_seconds", wall_seconds}, {"extra", extra}};
}

namespace {

using Clock = std::chrono::steady_clock;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

class Run {
public:
    Run(std::string command, const Config& config, const RunOptions& options)
        : config_(config), options_(options), lock_(options.out), start_(Clock::now()) {
        manifest_.command = std::move(command);
        manifest_.config = config.echo();
    }

    std::uint64_t seed() {
        const std::uint64_t s = options_.seed ? *options_.seed : static_cast<std::uint64_t>(config_.integer("run.seed"));
        manifest_.seeds["seed"] = s;
        if (options_.seed) manifest_.seeds["overridden_by_flag"] = true;
        return s;
    }

    fs::path input(const std::string& key) {
        const fs::path p = config_.path(key);
        if (!fs::exists(p)) throw ConfigError("config key '" + key + "' names a missing file: " + p.string());
        manifest_.inputs[p.string()] = file_sha256(p);
        return p;
    }

    fs::path out(const std::string& name) const { return options_.out / name; }

    void produced(const std::string& name) { manifest_.outputs[name] = file_sha256(out(name)); }

    RunManifest& manifest() { return manifest_; }

    RunManifest finish() {
        manifest_.wall_seconds = std::chrono::duration<double>(Clock::now() - start_).count();
        write_json(out(manifest_.command + ".manifest.json"), manifest_.json());
        return manifest_;
    }

private:
    const Config& config_;
    const RunOptions& options_;
    DirectoryLock lock_;
    Clock::time_point start_;
    RunManifest manifest_;
};

ModelConfig model_config(const Config& c) {
    ModelConfig m;
    m.n_layers = static_cast<int>(c.integer("model.n_layers", m.n_layers));
    m.d_model = static_cast<int>(c.integer("model.d_model", m.d_model));
    m.n_heads = static_cast<int>(c.integer("model.n_heads", m.n_heads));
    m.d_ff = static_cast<int>(c.integer("model.d_ff", m.d_ff));
    m.max_seq = static_cast<int>(c.integer("model.max_seq", m.max_seq));
    m.vocab_size = static_cast<int>(c.integer("model.vocab_size", vocab().size()));
    if (m.vocab_size < vocab().size()) {
        throw ConfigError("model.vocab_size " + std::to_string(m.vocab_size) + " is below the lexicon size " +
                          std::to_string(vocab().size()));
    }
    try {
        m.validate();
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    return m;
}

std::vector<int> all_layers(int n) {
    std::vector<int> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

std::vector<int> sweep_layers(const Config& c, const RunOptions& o, const std::string& key, int n_layers) {
    std::vector<int> layers = o.layers ? *o.layers : c.has(key) ? c.int_list(key) : all_layers(n_layers);
    for (int l : layers) {
        if (l < 0 || l >= n_layers) {
            throw ConfigError("layer " + std::to_string(l) + " outside [0, " + std::to_string(n_layers) + ")");
        }
    }
    return layers;
}

std::vector<StateKind> states_from(const Config& c, const std::string& key) {
    if (!c.has(key)) return {kAllStates.begin(), kAllStates.end()};
    std::vector<StateKind> out;
    for (const auto& s : split_list(c.str(key))) out.push_back(parse_state(s));
    return out;
}

std::shared_ptr<const Weights> load_model(Run& run, const std::string& key) {
    return std::make_shared<const Weights>(load_checkpoint(run.input(key)));
}

AdaptedModel load_encoder(Run& run, const Config& c, const std::string& section, std::shared_ptr<const Weights> base) {
    if (!c.has(section + ".adapters")) return AdaptedModel(std::move(base));
    return load_adapters(std::move(base), run.input(section + ".adapters"));
}

std::vector<DialogueSample> load_corpus(Run& run, const std::string& key) {
    auto samples = read_jsonl(run.input(key));
    if (samples.empty()) throw ContractError("corpus " + run.manifest().inputs.rbegin()->first + " is empty");
    return samples;
}

void emit_report(Run& run, const TraceReport& report, const std::string& stem) {
    write_text(run.out(stem + ".csv"), report.csv());
    write_text(run.out(stem + "_table.csv"), report.table_csv());
    write_json(run.out(stem + ".json"), report.json());
    run.produced(stem + ".csv");
    run.produced(stem + "_table.csv");
    run.produced(stem + ".json");
}

std::string curves_csv(const TraceReport& pre, const TraceReport& post) {
    std::ostringstream os;
    os << "layer,state,agent,pre,post\n";
    for (const TraceCell& c : pre.cells) {
        if (c.layer == kBaseLayer) continue;
        const TraceCell* p = post.find(c.layer, c.state, c.agent);
        os << c.layer << ',' << to_string(c.state) << ',' << c.agent << ',' << fmt(c.accuracy()) << ','
           << (p ? fmt(p->accuracy()) : "") << '\n';
    }
    return os.str();
}

}  // namespace

// ---- generation heuristics -------------------------------------------------------------

std::optional<Act> parse_response_act(Scenario scenario, const std::vector<std::string>& w) {
    auto starts = [&](std::initializer_list<const char*> prefix) {
        if (w.size() < prefix.size()) return false;
        std::size_t i = 0;
        for (const char* p : prefix) {
            if (w[i++] != p) return false;
        }
        return true;
    };
    if (scenario == Scenario::negotiation) {
        if (starts({"you", "take"}) && w.size() >= 3) return Act::propose;
        if (starts({"deal"})) return Act::accept;
        if (starts({"no", ",", "i", "need"})) return Act::reject;
        if (starts({"what", "do", "you", "need"})) return Act::ask;
        if (starts({"i", "need"}) || starts({"hello", ".", "i", "need"}) || starts({"hi", ".", "i", "need"})) return Act::inform;
        return std::nullopt;
    }
    if (starts({"will", "you", "take"})) return Act::propose;
    if (starts({"yes", ",", "i", "will"})) return Act::accept;
    if (starts({"no", ",", "i", "will"})) return Act::reject;
    if (starts({"do", "you", "think"})) return Act::ask;
    if ((w.size() >= 3 && w[1] == "is" && w[2] == "cheap") || starts({"hello", ".", "you", "should"}) || starts({"i", "like"}) ||
        starts({"ok", ",", "now"})) {
        return Act::inform;
    }
    return std::nullopt;
}

GenerationScores score_response(const DialogueSample& sample, int turns, std::span<const int> response) {
    if (turns < 1 || turns > static_cast<int>(sample.turns.size())) throw ContractError("score_response: cut outside dialogue");
    GenerationScores s;
    if (response.empty()) return s;
    const Vocab& v = vocab();
    std::vector<std::string> words;
    for (int id : response) words.push_back(v.word(id));
    const auto act = parse_response_act(sample.scenario, words);
    const auto& snap = sample.snapshots[static_cast<std::size_t>(turns - 1)];

    // items the partner already turned down, for the re-proposal check
    std::set<std::string> rejected;
    if (sample.scenario == Scenario::negotiation) {
        for (int t = 0; t + 1 < turns; ++t) {
            const Turn& cur = sample.turns[static_cast<std::size_t>(t)];
            const Turn& next = sample.turns[static_cast<std::size_t>(t + 1)];
            if (cur.act == Act::propose && next.act == Act::reject) {
                std::istringstream in(cur.text);
                std::string you, take, item;
                in >> you >> take >> item;
                rejected.insert(item);
            }
        }
    }

    int coherent = 0;
    for (std::size_t i = 0; i < words.size(); ++i) {
        const int id = response[i];
        bool ok = id != Vocab::kPad && id != Vocab::kUnk && id != Vocab::kPlaceholder;
        if (ok && act == Act::propose && sample.scenario == Scenario::negotiation && i == 2 && rejected.count(words[i])) ok = false;
        coherent += ok ? 1 : 0;
    }
    s.coherence = static_cast<double>(coherent) / static_cast<double>(words.size());

    if (sample.scenario == Scenario::negotiation) {
        const int agent = sample.turns[static_cast<std::size_t>(sample.opening_turns)].speaker;
        const std::string& partner_top = snap[static_cast<std::size_t>(2 - agent)].desire[0];
        const bool hit = act == Act::propose && words[2] == partner_top;
        s.tom = hit ? 1.0 : 0.0;
        s.strategy = hit ? 1.0 : act == Act::propose ? 0.5 : act ? 0.25 : 0.0;
    } else {
        const std::string& target = snap[0].desire[0];
        const bool costly = snap[1].belief == "costly";
        const bool names_target = std::find(words.begin(), words.end(), target) != words.end();
        const bool rebut = act == Act::inform && words.size() >= 3 && words[0] == target && words[2] == "cheap";
        const bool ask_for = act == Act::propose && names_target;
        const bool hit = costly ? rebut : ask_for;
        s.tom = hit ? 1.0 : 0.0;
        s.strategy = hit ? 1.0 : (rebut || ask_for) ? 0.5 : act ? 0.25 : 0.0;
    }
    return s;
}

// ---- commands ------------------------------------------------------------------------

RunManifest cmd_gen_corpus(const Config& config, const RunOptions& options) {
    Run run("gen-corpus", config, options);
    const std::uint64_t seed = run.seed();
    const Scenario scenario = parse_scenario(config.str("corpus.scenario", "negotiation"));
    const long long n = config.integer("corpus.size", 1000);
    if (n < 4) throw ConfigError("corpus.size must be at least 4");
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
    if (config.has("corpus.ratios")) {
        const auto parts = split_list(config.str("corpus.ratios"));
        if (parts.size() != 3) throw ConfigError("corpus.ratios expects three comma-separated values");
        for (std::size_t i = 0; i < 3; ++i) ratios[i] = std::stod(parts[i]);
    }

    const auto corpus = generate_corpus(scenario, seed, static_cast<int>(n));
    CorpusSplit sp;
    try {
        sp = split(corpus, ratios, seed);
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    write_jsonl(run.out("corpus.jsonl"), corpus);
    write_jsonl(run.out("train.jsonl"), sp.train);
    write_jsonl(run.out("val.jsonl"), sp.val);
    write_jsonl(run.out("eval.jsonl"), sp.eval);
    write_vocab(run.out("vocab.txt"), vocab());
    std::map<std::string, int> stages;
    for (const auto& s : sp.eval) stages[std::string(to_string(s.stage))]++;
    write_json(run.out("split.json"), {{"ratios", ratios},
                                       {"seed", seed},
                                       {"sizes", {sp.train.size(), sp.val.size(), sp.eval.size()}},
                                       {"eval_stages", stages},
                                       {"corpus_digest", corpus_digest(corpus)}});
    for (const char* f : {"corpus.jsonl", "train.jsonl", "val.jsonl", "eval.jsonl", "vocab.txt", "split.json"}) run.produced(f);
    run.manifest().extra = {{"scenario", to_string(scenario)}, {"ratios", ratios}};
    return run.finish();
}

RunManifest cmd_pretrain(const Config& config, const RunOptions& options) {
    Run run("pretrain", config, options);
    const std::uint64_t seed = run.seed();
    const ModelConfig mc = model_config(config);
    PretrainSchedule sched;
    sched.steps = static_cast<int>(config.integer("pretrain.steps", sched.steps));
    sched.batch = static_cast<int>(config.integer("pretrain.batch", sched.batch));
    sched.lr = static_cast<float>(config.real("pretrain.lr", sched.lr));
    sched.warmup = static_cast<int>(config.integer("pretrain.warmup", sched.warmup));
    sched.weight_decay = static_cast<float>(config.real("pretrain.weight_decay", sched.weight_decay));
    sched.layer_drop = static_cast<float>(config.real("pretrain.layer_drop", sched.layer_drop));
    sched.seed = seed;
    const auto train = load_corpus(run, "pretrain.corpus");
    const auto docs = pretraining_documents(train);
    for (const auto& d : docs) {
        if (static_cast<int>(d.size()) > mc.max_seq) throw ConfigError("model.max_seq is shorter than a pretraining document");
    }

    const PretrainResult res = pretrain_lm(mc, docs, sched);
    save_checkpoint(res.weights, run.out("model.bin"));
    std::ostringstream losses;
    losses << "step,loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) losses << i << ',' << fmt(res.losses[i]) << '\n';
    write_text(run.out("losses.csv"), losses.str());

    nlohmann::json summary{{"initial_loss", res.initial_loss}, {"final_loss", res.final_loss},
                           {"digest", res.weights.digest()}, {"documents", docs.size()}};
    if (config.has("pretrain.heldout")) {
        // next-token agreement of greedy decoding on held-out documents
        const auto held = load_corpus(run, "pretrain.heldout");
        auto hdocs = pretraining_documents(held);
        const auto cap = static_cast<std::size_t>(config.integer("pretrain.heldout_docs", 300));
        if (hdocs.size() > cap) hdocs.resize(cap);
        std::vector<std::pair<long, long>> hits(hdocs.size());
        parallel_for(hdocs.size(), [&](std::size_t i) {
            const ForwardOutput fo = run_forward(res.weights, hdocs[i]);
            for (int t = 0; t + 1 < static_cast<int>(hdocs[i].size()); ++t) {
                const auto row = fo.logits.row(t);
                const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
                hits[i].first += pred == hdocs[i][static_cast<std::size_t>(t) + 1] ? 1 : 0;
                hits[i].second += 1;
            }
        });
        long hit = 0, total = 0;
        for (const auto& [h, n] : hits) {
            hit += h;
            total += n;
        }
        summary["heldout_next_token_accuracy"] = static_cast<double>(hit) / static_cast<double>(total);
        summary["heldout_positions"] = total;
    }
    write_json(run.out("pretrain.json"), summary);
    for (const char* f : {"model.bin", "losses.csv", "pretrain.json"}) run.produced(f);
    run.manifest().extra = {{"model", mc}, {"weights_digest", res.weights.digest()}};
    return run.finish();
}

RunManifest cmd_trace(const Config& config, const RunOptions& options) {
    Run run("trace", config, options);
    run.seed();
    const auto base = load_model(run, "trace.checkpoint");
    const AdaptedModel enc = load_encoder(run, config, "trace", base);
    const auto data = load_corpus(run, "trace.corpus");
    SweepOptions so;
    so.layers = sweep_layers(config, options, "trace.layers", base->config.n_layers);
    so.states = states_from(config, "trace.states");
    so.base_row = config.flag("trace.base_row", true);
    const TraceReport report = causal_trace_sweep(enc, *base, data, so);
    emit_report(run, report, "trace");
    run.manifest().extra = report.manifest;
    return run.finish();
}

RunManifest cmd_steer(const Config& config, const RunOptions& options) {
    Run run("steer", config, options);
    SteerConfig sc;
    sc.seed = run.seed();
    const auto base = load_model(run, "steer.checkpoint");
    const ModelConfig& mc = base->config;
    sc.patch_layer = static_cast<int>(config.integer("steer.patch_layer", sc.patch_layer));
    sc.adapters.rank = static_cast<int>(config.integer("steer.rank", sc.adapters.rank));
    sc.adapters.alpha = static_cast<float>(config.real("steer.alpha", sc.adapters.alpha));
    sc.adapters.dropout = static_cast<float>(config.real("steer.dropout", sc.adapters.dropout));
    if (config.has("steer.sites")) {
        sc.adapters.sites.clear();
        for (const auto& s : split_list(config.str("steer.sites"))) sc.adapters.sites.push_back(parse_site(s));
    }
    if (config.has("steer.adapter_layers")) {
        for (int l : config.int_list("steer.adapter_layers")) sc.adapters.layers.insert(l);
    }
    sc.lr = static_cast<float>(config.real("steer.lr", sc.lr));
    sc.warmup = static_cast<int>(config.integer("steer.warmup", sc.warmup));
    sc.optimizer.weight_decay = static_cast<float>(config.real("steer.weight_decay", sc.optimizer.weight_decay));
    sc.batch = static_cast<int>(config.integer("steer.batch", sc.batch));
    sc.stop.max_epochs = static_cast<int>(config.integer("steer.max_epochs", sc.stop.max_epochs));
    sc.stop.patience = static_cast<int>(config.integer("steer.patience", sc.stop.patience));
    sc.stop.delta = config.real("steer.delta", sc.stop.delta);
    sc.stop.floor = config.real("steer.floor", sc.stop.floor);
    try {
        sc.validate(mc);
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }

    const auto train = load_corpus(run, "steer.train");
    const auto val = load_corpus(run, "steer.val");
    std::optional<std::vector<DialogueSample>> eval;
    if (config.has("steer.eval")) eval = load_corpus(run, "steer.eval");

    SweepOptions so;
    so.layers = sweep_layers(config, options, "steer.trace_layers", mc.n_layers);
    so.states = states_from(config, "steer.trace_states");
    const AdaptedModel plain(base);
    const std::string decoder_before = base->digest();

    const TraceReport pre_val = causal_trace_sweep(plain, *base, val, so);
    std::optional<TraceReport> pre_eval;
    if (eval) pre_eval = causal_trace_sweep(plain, *base, *eval, so);

    std::vector<double> epoch_seconds;
    SteerResult res = steer_train(plain, *base, train, val, sc, [&](const EpochRecord& e) {
        epoch_seconds.push_back(e.wall_seconds);
        std::cerr << "steer epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << '\n';
    });
    const std::string decoder_after = base->digest();
    if (decoder_after != decoder_before) throw std::logic_error("steer: decoder weights changed during training");

    save_adapters(res.encoder, run.out("adapters.bin"));
    write_json(run.out("history.json"), res.history.json());
    std::ostringstream hist;
    hist << "epoch,train_loss,val_loss\n0,," << fmt(res.history.initial_val_loss) << '\n';
    for (const auto& e : res.history.epochs) hist << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_loss) << '\n';
    write_text(run.out("history.csv"), hist.str());
    run.produced("adapters.bin");
    run.produced("history.json");
    run.produced("history.csv");

    const TraceReport post_val = causal_trace_sweep(res.encoder, *base, val, so);
    emit_report(run, pre_val, "trace_pre_val");
    emit_report(run, post_val, "trace_post_val");
    write_text(run.out("curves_val.csv"), curves_csv(pre_val, post_val));
    run.produced("curves_val.csv");
    if (eval) {
        const TraceReport post_eval = causal_trace_sweep(res.encoder, *base, *eval, so);
        emit_report(run, *pre_eval, "trace_pre_eval");
        emit_report(run, post_eval, "trace_post_eval");
        write_text(run.out("curves_eval.csv"), curves_csv(*pre_eval, post_eval));
        run.produced("curves_eval.csv");
    }

    nlohmann::json summary{{"steer_config", sc},
                           {"patch_layer", sc.patch_layer},
                           {"selected_layer", select_intervention_layer(post_val)},
                           {"decoder_digest_before", decoder_before},
                           {"decoder_digest_after", decoder_after},
                           {"adapter_digest", res.encoder.adapter_digest()},
                           {"encoder_digest", encoder_digest(res.encoder)},
                           {"stop_reason", to_string(res.history.stop)},
                           {"initial_val_loss", res.history.initial_val_loss},
                           {"final_val_loss", res.history.epochs.back().val_loss}};
    write_json(run.out("steer.json"), summary);
    run.produced("steer.json");
    run.manifest().seeds["steer"] = sc.seed;
    run.manifest().extra = {{"steer_config", sc},
                            {"epoch_wall_seconds", epoch_seconds},
                            {"trained_layer", sc.patch_layer},
                            {"note", "adapters are trained once at the patch layer and swept at every layer"}};
    return run.finish();
}

RunManifest cmd_generate(const Config& config, const RunOptions& options) {
    Run run("generate", config, options);
    run.seed();
    const auto base = load_model(run, "generate.checkpoint");
    const bool has_adapters = config.has("generate.adapters");
    const AdaptedModel enc = load_encoder(run, config, "generate", base);
    const std::string layer_key = config.str("generate.layer");
    int layer = 0;
    std::string layer_source = "config";
    if (layer_key == "auto") {
        if (!has_adapters) throw ContractError("generate: layer 'auto' needs steered adapters (generate.adapters)");
        if (!config.has("generate.report")) throw ContractError("generate: layer 'auto' needs a validation trace report");
        const nlohmann::json rj = read_json(run.input("generate.report"));
        const TraceReport report = TraceReport::from_json(rj);
        const std::string expected = encoder_digest(enc);
        if (report.manifest.value("encoder_digest", "") != expected) {
            throw ContractError("generate: the trace report was not produced with these adapters");
        }
        layer = select_intervention_layer(report);
        layer_source = "auto";
    } else {
        layer = static_cast<int>(config.integer("generate.layer"));
    }
    if (layer < 0 || layer >= base->config.n_layers) throw ConfigError("generate.layer out of range");
    const std::string instruction = config.str("generate.instruction", "next_move");
    if (instruction != "next_move") throw ConfigError("unknown generate.instruction '" + instruction + "'");
    const int max_new = static_cast<int>(config.integer("generate.max_new", 16));
    const bool baseline = config.flag("generate.baseline", has_adapters);
    const auto data = load_corpus(run, "generate.corpus");

    struct Row {
        std::vector<int> response;
        GenerationScores scores;
    };
    auto run_condition = [&](const AdaptedModel& encoder) {
        std::vector<Row> rows(data.size());
        parallel_for(data.size(), [&](std::size_t i) {
            const DialogueSample& s = data[i];
            const int cut = s.cut();
            const auto tokens = dialogue_tokens(s, cut);
            const ActivationPayload p = capture(encoder, tokens, layer);
            const TaskInstruction task = make_task(s, cut);
            const auto prompt = patched_context(p.positions(), task.prompt);
            rows[i].response = generate(*base, prompt, max_new, Decoding{}, PayloadInjection{layer, 0, p.grid}, vocab().id("."));
            rows[i].scores = score_response(s, cut, rows[i].response);
        });
        return rows;
    };

    std::vector<std::pair<std::string, std::vector<Row>>> conditions;
    conditions.emplace_back(has_adapters ? "steered" : "unsteered", run_condition(enc));
    if (baseline && has_adapters) conditions.emplace_back("unsteered", run_condition(AdaptedModel(base)));

    std::ostringstream jsonl;
    nlohmann::json summary{{"layer", layer}, {"layer_source", layer_source}, {"instruction", instruction}};
    std::ostringstream csv;
    csv << "condition,n,tom_score,coherence_score,strategy_score\n";
    for (const auto& [name, rows] : conditions) {
        double tom = 0, coh = 0, strat = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const DialogueSample& s = data[i];
            const auto task = make_task(s, s.cut());
            jsonl << nlohmann::json{{"condition", name},
                                    {"id", s.id},
                                    {"stage", to_string(s.stage)},
                                    {"instruction", vocab().detokenize(task.prompt)},
                                    {"response", vocab().detokenize(rows[i].response)},
                                    {"reference", vocab().detokenize(task.gold_response)},
                                    {"tom_score", rows[i].scores.tom},
                                    {"coherence_score", rows[i].scores.coherence},
                                    {"strategy_score", rows[i].scores.strategy}}
                         .dump()
                  << '\n';
            tom += rows[i].scores.tom;
            coh += rows[i].scores.coherence;
            strat += rows[i].scores.strategy;
        }
        const double n = static_cast<double>(rows.size());
        summary["conditions"][name] = {{"n", rows.size()}, {"tom_score", tom / n}, {"coherence_score", coh / n}, {"strategy_score", strat / n}};
        csv << name << ',' << rows.size() << ',' << fmt(tom / n) << ',' << fmt(coh / n) << ',' << fmt(strat / n) << '\n';
    }
    write_text(run.out("responses.jsonl"), jsonl.str());
    write_json(run.out("generation_eval.json"), summary);
    write_text(run.out("generation_eval.csv"), csv.str());
    for (const char* f : {"responses.jsonl", "generation_eval.json", "generation_eval.csv"}) run.produced(f);
    run.manifest().extra = {{"layer", layer}, {"layer_source", layer_source}, {"encoder_digest", encoder_digest(enc)}};
    return run.finish();
}

RunManifest cmd_probe(const Config& config, const RunOptions& options) {
    Run run("probe", config, options);
    const std::uint64_t seed = run.seed();
    const auto base = load_model(run, "probe.checkpoint");
    const AdaptedModel enc = load_encoder(run, config, "probe", base);
    auto data = load_corpus(run, "probe.corpus");
    const auto cap = static_cast<std::size_t>(config.integer("probe.max_samples", static_cast<long long>(data.size())));
    if (data.size() > cap) data.resize(cap);
    const std::vector<int> layers = sweep_layers(config, options, "probe.layers", base->config.n_layers);
    ProbeOptions po;
    po.steps = static_cast<int>(config.integer("probe.steps", po.steps));
    po.lr = config.real("probe.lr", po.lr);
    po.l2 = config.real("probe.l2", po.l2);
    po.test_fraction = config.real("probe.test_fraction", po.test_fraction);

    // pooled features per (sample, layer) and gold indices per (sample, state, agent)
    std::vector<std::map<int, std::vector<float>>> feats(data.size());
    std::vector<std::map<std::pair<StateKind, int>, int>> golds(data.size());
    std::map<std::pair<StateKind, int>, int> classes;
    std::vector<std::map<std::pair<StateKind, int>, int>> class_counts(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const int cut = data[i].cut();
        const auto tokens = dialogue_tokens(data[i], cut);
        for (const auto& [l, p] : capture_layers(enc, tokens, layers)) feats[i][l] = mean_pool(p.grid);
        for (const ProbeQuery& q : make_queries(data[i], cut)) {
            golds[i][{q.kind, q.agent}] = q.gold;
            class_counts[i][{q.kind, q.agent}] = static_cast<int>(q.candidates.size());
        }
    });
    for (const auto& m : class_counts) {
        for (const auto& [k, v] : m) classes[k] = v;
    }

    std::ostringstream csv;
    csv << "layer,state,accuracy,accuracy_permuted,chance,v_info,clamped,n_test\n";
    nlohmann::json rows = nlohmann::json::array();
    const std::vector<std::vector<float>> null_features(data.size(), std::vector<float>{0.0f});
    for (int l : layers) {
        std::vector<std::vector<float>> x;
        for (const auto& f : feats) x.push_back(f.at(l));
        for (StateKind k : kAllStates) {
            double acc = 0, acc_perm = 0, info = 0, chance = 0;
            bool clamped = false;
            int agents = 0;
            std::size_t n_test = 0;
            nlohmann::json per_agent = nlohmann::json::array();
            for (int a = 1; a <= 2; ++a) {
                std::vector<int> y;
                for (const auto& g : golds) y.push_back(g.at({k, a}));
                const int c = classes.at({k, a});
                std::vector<int> y_perm = y;
                std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(l * 16 + static_cast<int>(k) * 2 + a)));
                std::shuffle(y_perm.begin(), y_perm.end(), rng);
                try {
                    const ProbeResult real = train_linear_probe(x, y, seed, po, c);
                    const ProbeResult null = train_linear_probe(null_features, y, seed, po, c);
                    const ProbeResult perm = train_linear_probe(x, y_perm, seed, po, c);
                    const UsableInformation u = v_usable_info(real, null, y);
                    acc += real.accuracy;
                    acc_perm += perm.accuracy;
                    info += u.nats;
                    clamped = clamped || u.clamped;
                    chance += 1.0 / c;
                    n_test = real.n_test;
                    ++agents;
                    per_agent.push_back({{"agent", a}, {"accuracy", real.accuracy}, {"accuracy_permuted", perm.accuracy},
                                         {"standard_error", real.standard_error()}, {"v_info", u.nats},
                                         {"v_info_raw", u.raw}, {"clamped", u.clamped}});
                } catch (const ContractError& e) {
                    // a label that never varies in the train split carries no probe signal
                    per_agent.push_back({{"agent", a}, {"skipped", e.what()}});
                }
            }
            if (agents == 0) continue;
            acc /= agents;
            acc_perm /= agents;
            info /= agents;
            chance /= agents;
            csv << l << ',' << to_string(k) << ',' << fmt(acc) << ',' << fmt(acc_perm) << ',' << fmt(chance) << ',' << fmt(info)
                << ',' << (clamped ? "true" : "false") << ',' << n_test << '\n';
            rows.push_back({{"layer", l}, {"state", to_string(k)}, {"accuracy", acc}, {"accuracy_permuted", acc_perm},
                            {"chance", chance}, {"v_info", info}, {"clamped", clamped}, {"n_test", n_test},
                            {"agents", per_agent}});
        }
    }
    write_text(run.out("probe.csv"), csv.str());
    write_json(run.out("probe.json"), {{"rows", rows},
                                       {"pooling", "mean over dialogue positions"},
                                       {"null_representation", "constant"},
                                       {"row_value", "mean over the two agents"}});
    run.produced("probe.csv");
    run.produced("probe.json");
    run.manifest().extra = {{"layers", layers}, {"encoder_digest", encoder_digest(enc)}};
    return run.finish();
}

int run_command(const std::string& name, const fs::path& config_path, const RunOptions& options) {
    try {
        const Config config = Config::load(config_path);
        if (name == "gen-corpus") {
            cmd_gen_corpus(config, options);
        } else if (name == "pretrain") {
            cmd_pretrain(config, options);
        } else if (name == "trace") {
            cmd_trace(config, options);
        } else if (name == "steer") {
            cmd_steer(config, options);
        } else if (name == "generate") {
            cmd_generate(config, options);
        } else if (name == "probe") {
            cmd_probe(config, options);
        } else {
            throw ConfigError("unknown command '" + name + "'");
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "contract violation: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace costom

// Exit gate: one PASS/FAIL line per criterion, informational "note" lines
// in between. Runs the full negotiation pipeline, so it takes a while.

#include "support/gradcheck.hpp"
#include "support/pipeline.hpp"
#include "support/stop_cases.hpp"

#include "costom/harness.hpp"
#include "costom/util.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

namespace {

using namespace costom;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
    std::printf("criterion %d %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

void note(const std::string& text) {
    std::printf("note  %s\n", text.c_str());
    std::fflush(stdout);
}

std::string num(double v, int precision = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    return buf;
}

nlohmann::json read_json_file(const fs::path& p) { return nlohmann::json::parse(std::ifstream(p)); }

ModelConfig default_config() {
    ModelConfig c;
    c.vocab_size = vocab().size();
    return c;
}

// ---- 1 -------------------------------------------------------------------------------

void finite_differences() {
    const auto t0 = Clock::now();
    double prim = 0.0;
    int prim_checks = 0;
    for (int instance = 0; instance < 20; ++instance) {
        std::mt19937_64 rng(1234 + static_cast<std::uint64_t>(instance));
        for (const auto& c : gradcheck::primitive_cases(rng)) {
            prim = std::max(prim, gradcheck::primitive_error(c, 99 + static_cast<std::uint64_t>(instance)));
            ++prim_checks;
        }
    }
    double e2e = 0.0;
    bool live = true;
    for (int instance = 0; instance < 20; ++instance) {
        const auto check = gradcheck::tom_loss_error(instance);
        e2e = std::max(e2e, check.error);
        live = live && check.max_gradient > 0.0;
    }
    const double secs = seconds_since(t0);
    verdict(1, prim < 1e-4 && e2e < 1e-3 && live && secs < 60.0,
            "primitives max rel err " + num(prim) + " over " + std::to_string(prim_checks) + " checks; tom_loss max rel err " +
                num(e2e) + " over 20 instances; " + num(secs, 3) + " s");
}

// ---- 2 -------------------------------------------------------------------------------

void self_patch() {
    const ModelConfig c = default_config();
    const Weights w = init_weights(c, 42);
    const auto s = gen_negotiation(42, 1)[0];
    const auto tokens = dialogue_tokens(s, s.cut());
    std::vector<int> all(static_cast<std::size_t>(c.n_layers));
    std::iota(all.begin(), all.end(), 0);
    const ForwardOutput clean = run_forward(w, tokens, all);
    double worst = 0.0;
    for (int l = 0; l < c.n_layers; ++l) {
        const ForwardOutput patched = run_forward(w, tokens, {}, PayloadInjection{l, 0, clean.taps.at(l)});
        for (std::size_t i = 0; i < clean.logits.size(); ++i) {
            worst = std::max(worst, static_cast<double>(std::abs(clean.logits.data[i] - patched.logits.data[i])));
        }
    }
    verdict(2, worst <= 1e-6, "max |logit diff| " + num(worst) + " over layers 0..7");
}

// ---- 3 -------------------------------------------------------------------------------

void gradient_locality() {
    const auto base = std::make_shared<const Weights>(init_weights(default_config(), 7));
    AdapterSpec spec;
    spec.layers = {0, 1, 2, 3, 4, 5};
    AdaptedModel enc = attach(base, spec, 8);
    std::mt19937_64 rng(9);
    std::normal_distribution<float> n(0.0f, 0.02f);
    for (auto& [key, a] : enc.adapters()) {
        for (float& v : a.b.data) v = n(rng);
    }
    const auto corpus = gen_negotiation(10, 40);
    const auto named = enc.trainable_parameters();
    bool deep_zero = true, decoder_zero = true, shallow_live = true;
    for (int batch = 0; batch < 10; ++batch) {
        ad::Tape tape;
        BoundModel e(tape, enc, static_cast<std::uint64_t>(batch));
        BoundModel d(tape, *base);
        std::optional<ad::Var> total;
        for (int k = 0; k < 4; ++k) {
            const DialogueSample& s = corpus[rng() % corpus.size()];
            const ActivationPayload p = capture_live(e, dialogue_tokens(s, s.cut()), 3);
            for (const ProbeQuery& q : make_queries(s, s.cut())) {
                const ad::Var l = tom_loss(d, p, q);
                total = total ? ad::add(*total, l) : l;
            }
        }
        const ad::GradientMap g = tape.backward(*total);
        auto nonzero = [&](const ad::Var& v) {
            const Tensor* t = g.find(v);
            if (t == nullptr) return false;
            return std::any_of(t->data.begin(), t->data.end(), [](float x) { return x != 0.0f; });
        };
        for (const ad::Var& v : d.base_params()) decoder_zero = decoder_zero && !nonzero(v);
        const auto vars = e.adapter_params();
        bool any_shallow = false;
        for (std::size_t i = 0; i < vars.size(); ++i) {
            const int layer = std::stoi(named[i].first.substr(5));
            if (layer > 3) deep_zero = deep_zero && !nonzero(vars[i]);
            else any_shallow = any_shallow || nonzero(vars[i]);
        }
        shallow_live = shallow_live && any_shallow;
    }
    verdict(3, deep_zero && decoder_zero && shallow_live,
            std::string("layers 4-5 zero: ") + (deep_zero ? "yes" : "no") + ", decoder zero: " + (decoder_zero ? "yes" : "no") +
                ", some adapter in 0-3 nonzero in every batch: " + (shallow_live ? "yes" : "no"));
}

// ---- 4, 5, 6 -------------------------------------------------------------------------

double pooled(const TraceReport& r, int layer, StateKind state) {
    int correct = 0, n = 0;
    for (const TraceCell& c : r.cells) {
        if (c.layer == layer && c.state == state) {
            correct += c.correct;
            n += c.n;
        }
    }
    return n == 0 ? 0.0 : static_cast<double>(correct) / n;
}

void full_pipeline(const fs::path& config_path, const fs::path& work) {
    fs::remove_all(work);
    Config config = Config::load(config_path);
    config.set("paths.root", fs::absolute(work).string());
    auto opts = [&](const char* name) {
        RunOptions o;
        o.out = work / name;
        return o;
    };
    const auto t0 = Clock::now();
    cmd_gen_corpus(config, opts("corpus"));
    const auto split = read_json_file(work / "corpus" / "split.json");
    note("corpus sizes " + split.at("sizes").dump());
    const auto tp = Clock::now();
    cmd_pretrain(config, opts("pretrain"));
    const auto pre = read_json_file(work / "pretrain" / "pretrain.json");
    note("pretraining " + num(seconds_since(tp), 4) + " s, final loss " + num(pre.value("final_loss", 0.0)) +
         ", held-out next-token accuracy " + num(pre.value("heldout_next_token_accuracy", 0.0)));
    cmd_trace(config, opts("trace"));

    const std::string model_sha = file_sha256(work / "pretrain" / "model.bin");
    const RunManifest steer = cmd_steer(config, opts("steer"));
    const auto sj = read_json_file(work / "steer" / "steer.json");
    const bool same_digest = sj.at("decoder_digest_before") == sj.at("decoder_digest_after");
    const bool same_file = file_sha256(work / "pretrain" / "model.bin") == model_sha;
    verdict(4, same_digest && same_file,
            "decoder digest " + sj.at("decoder_digest_before").get<std::string>().substr(0, 16) + " before, " +
                sj.at("decoder_digest_after").get<std::string>().substr(0, 16) + " after; checkpoint file unchanged: " +
                (same_file ? "yes" : "no"));

    const auto hist = read_json_file(work / "steer" / "history.json");
    const double initial = hist.at("initial_val_loss").get<double>();
    const double final_loss = hist.at("epochs").back().at("val_loss").get<double>();
    const int epochs = static_cast<int>(hist.at("epochs").size());
    const double drop = 1.0 - final_loss / initial;
    const TraceReport pre_eval = TraceReport::from_json(read_json_file(work / "steer" / "trace_pre_eval.json"));
    const TraceReport post_eval = TraceReport::from_json(read_json_file(work / "steer" / "trace_post_eval.json"));
    const int layer = sj.at("patch_layer").get<int>();
    const double desire = pooled(post_eval, layer, StateKind::desire);
    double worst_gap = 1.0;
    int worst_layer = -1;
    for (int l : post_eval.layers()) {
        const double gap = post_eval.layer_mean(l) - pre_eval.layer_mean(l);
        if (gap < worst_gap) {
            worst_gap = gap;
            worst_layer = l;
        }
    }
    const double steer_secs = steer.wall_seconds;
    for (int l : post_eval.layers()) {
        note("layer " + std::to_string(l) + " eval mean accuracy pre " + num(pre_eval.layer_mean(l), 3) + " post " +
             num(post_eval.layer_mean(l), 3) + ", desire pre " + num(pooled(pre_eval, l, StateKind::desire), 3) + " post " +
             num(pooled(post_eval, l, StateKind::desire), 3));
    }
    verdict(5, drop >= 0.5 && desire >= 0.9 && worst_gap >= -0.05 && epochs <= 10 && steer_secs <= 900.0,
            "(a) val loss " + num(initial) + " -> " + num(final_loss) + " (" + num(100 * drop, 3) + "% drop, " +
                std::to_string(epochs) + " epochs, " + sj.at("stop_reason").get<std::string>() + "); (b) held-out desire at layer " +
                std::to_string(layer) + " " + num(desire, 3) + "; (c) worst post-pre " + num(worst_gap, 3) + " at layer " +
                std::to_string(worst_layer) + "; steering " + num(steer_secs, 4) + " s");

    cmd_generate(config, opts("generate"));
    const auto gen = read_json_file(work / "generate" / "generation_eval.json");
    const auto& cond = gen.at("conditions");
    const double steered = cond.at("steered").at("tom_score").get<double>();
    const double unsteered = cond.at("unsteered").at("tom_score").get<double>();
    verdict(6, steered - unsteered >= 0.2 && cond.at("steered").at("n").get<int>() == 100,
            "tom_score steered " + num(steered, 3) + " vs unsteered " + num(unsteered, 3) + " at layer " +
                std::to_string(gen.at("layer").get<int>()) + " (" + gen.at("layer_source").get<std::string>() + "), n " +
                std::to_string(cond.at("steered").at("n").get<int>()));
    note("coherence steered " + num(cond.at("steered").at("coherence_score").get<double>(), 3) + " unsteered " +
         num(cond.at("unsteered").at("coherence_score").get<double>(), 3));
    note("full pipeline " + num(seconds_since(t0), 4) + " s");
}

// ---- 7 -------------------------------------------------------------------------------

void early_stop_suite() {
    int ok = 0;
    std::string missed;
    for (const auto& c : support::stop_cases()) {
        const StopDecision d = early_stop(c.losses, c.rule);
        if (d.epoch == c.expected.epoch && d.reason == c.expected.reason) {
            ++ok;
        } else {
            missed += std::string(" [") + c.name + "]";
        }
    }
    const int total = static_cast<int>(support::stop_cases().size());
    verdict(7, ok == total && total == 12, std::to_string(ok) + "/" + std::to_string(total) + " sequences" + missed);
}

// ---- 8 -------------------------------------------------------------------------------

void probe_sanity() {
    const int classes = 4;
    std::vector<int> y(400);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % classes);
    std::mt19937_64 rng(5);
    std::shuffle(y.begin(), y.end(), rng);
    std::vector<std::vector<float>> hot, constant(y.size(), std::vector<float>{1.0f});
    for (int v : y) {
        std::vector<float> row(classes, 0.0f);
        row[static_cast<std::size_t>(v)] = 1.0f;
        hot.push_back(row);
    }
    auto perm = y;
    std::shuffle(perm.begin(), perm.end(), rng);

    const ProbeResult null_y = train_linear_probe(constant, y, 11);
    const ProbeResult real = train_linear_probe(hot, y, 11);
    const ProbeResult flat = train_linear_probe(std::vector<std::vector<float>>(y.size(), std::vector<float>{2.0f, -1.0f}), y, 11);
    const ProbeResult null_p = train_linear_probe(constant, perm, 11);
    const ProbeResult shuffled = train_linear_probe(hot, perm, 11);

    std::vector<double> counts(classes, 0.0);
    for (std::size_t i : real.split.test) counts[static_cast<std::size_t>(y[i])] += 1.0;
    double h = 0.0;
    for (double c : counts) {
        if (c > 0) h -= c / real.split.test.size() * std::log(c / real.split.test.size());
    }
    const double one_hot = v_usable_info(real, null_y, y).nats;
    const double constant_info = v_usable_info(flat, null_y, y).nats;
    const double permuted = v_usable_info(shuffled, null_p, perm).nats;
    verdict(8, std::abs(one_hot - h) <= 0.05 && std::abs(constant_info) <= 0.05 && std::abs(permuted) <= 0.05,
            "one-hot " + num(one_hot) + " nats vs H(Y) " + num(h) + "; constant " + num(constant_info) + "; permuted " +
                num(permuted));
}

// ---- 9 -------------------------------------------------------------------------------

void determinism(const fs::path& config_path, const fs::path& work) {
    // The shipped configuration with shortened training, run twice end to end.
    std::ifstream in(config_path);
    const std::string ini((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::map<std::string, std::string> shorter{
        {"pretrain.steps", "40"}, {"pretrain.heldout_docs", "20"}, {"steer.max_epochs", "1"}};
    const auto t0 = Clock::now();
    fs::remove_all(work);
    const auto a = support::run_pipeline(work / "a", ini, shorter);
    const auto b = support::run_pipeline(work / "b", ini, shorter);
    std::vector<std::string> differ;
    for (const auto& [name, sha] : a) {
        if (!b.contains(name) || b.at(name) != sha) differ.push_back(name);
    }
    const bool same = differ.empty() && a.size() == b.size();
    std::string detail = std::to_string(a.size()) + " artifacts compared, " + std::to_string(differ.size()) + " differ";
    for (const auto& d : differ) detail += " " + d;
    verdict(9, same && !a.empty(), detail + "; " + num(seconds_since(t0), 4) + " s for both runs");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    fs::path config, work = "acceptance_work";
    app.add_option("--config", config, "pipeline configuration")->required()->check(CLI::ExistingFile);
    app.add_option("--work", work, "scratch directory for pipeline runs");
    CLI11_PARSE(app, argc, argv);

    const auto steps = std::vector<std::function<void()>>{
        finite_differences,
        self_patch,
        gradient_locality,
        [&] { full_pipeline(config, work / "full"); },
        early_stop_suite,
        probe_sanity,
        [&] { determinism(config, work / "determinism"); },
    };
    for (const auto& step : steps) {
        try {
            step();
        } catch (const std::exception& e) {
            std::printf("error  %s\n", e.what());
            ++failures;
        }
    }
    std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
    return failures == 0 ? 0 : 1;
}

#include "costom/tracing.hpp"

#include "costom/util.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace costom {

namespace {

std::string payload_digest(const std::string& model_digest, std::span<const int> tokens, int layer) {
    Sha256 h;
    h.update(model_digest);
    for (int t : tokens) h.update_pod(static_cast<std::int32_t>(t));
    h.update_pod(static_cast<std::int32_t>(layer));
    return h.hex();
}

AdaptedModel eval_copy(const AdaptedModel& m) {
    AdaptedModel copy = m;
    copy.set_training(false);
    return copy;
}

double log_softmax_at(std::span<const float> row, int target) {
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (float v : row) z += std::exp(static_cast<double>(v) - mx);
    return static_cast<double>(row[static_cast<std::size_t>(target)]) - mx - std::log(z);
}

std::string num(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string layer_label(int layer) { return layer == kBaseLayer ? "base" : std::to_string(layer); }

}  // namespace

// ---- capture -----------------------------------------------------------------------

std::string encoder_digest(const AdaptedModel& m) { return sha256_hex(m.base().digest() + m.adapter_digest()); }

ActivationPayload capture(const Weights& encoder, std::span<const int> tokens, int layer) {
    return capture(AdaptedModel(std::make_shared<const Weights>(encoder)), tokens, layer);
}

ActivationPayload capture(const AdaptedModel& encoder, std::span<const int> tokens, int layer) {
    return capture_layers(encoder, tokens, {layer}).at(layer);
}

std::map<int, ActivationPayload> capture_layers(const AdaptedModel& encoder, std::span<const int> tokens,
                                                const std::vector<int>& layers) {
    if (layers.empty()) throw ContractError("capture: no layers requested");
    const AdaptedModel model = eval_copy(encoder);
    ad::Tape tape;
    BoundModel bound(tape, model);
    const ForwardVars fv = forward(bound, {tokens, layers, std::nullopt, false, {}, nullptr});
    const std::string digest = encoder_digest(model);
    std::map<int, ActivationPayload> out;
    for (const auto& [l, v] : fv.taps) {
        ActivationPayload p{l, v.value(), payload_digest(digest, tokens, l), std::nullopt};
        if (!p.grid.all_finite()) throw ContractError("capture: non-finite activations at layer " + std::to_string(l));
        out.emplace(l, std::move(p));
    }
    return out;
}

ActivationPayload capture_live(BoundModel& encoder, std::span<const int> tokens, int layer) {
    const ForwardVars fv = forward(encoder, {tokens, {layer}, std::nullopt, false, {}, nullptr});
    const ad::Var v = fv.taps.at(layer);
    return {layer, v.value(), payload_digest("live", tokens, layer), v};
}

// ---- scoring -------------------------------------------------------------------------

std::vector<int> patched_context(int positions, std::span<const int> question) {
    std::vector<int> ctx(static_cast<std::size_t>(positions), Vocab::kPlaceholder);
    ctx.insert(ctx.end(), question.begin(), question.end());
    return ctx;
}

std::vector<double> score_candidates(const Weights& model, std::span<const int> context,
                                     const std::vector<std::vector<int>>& candidates,
                                     const std::optional<PayloadInjection>& injection) {
    if (context.empty()) throw ContractError("score_candidates: empty context");
    const int c = static_cast<int>(context.size());
    int total = c;
    for (const auto& cand : candidates) {
        if (cand.empty()) throw ContractError("score_candidates: empty candidate");
        total += static_cast<int>(cand.size());
    }
    std::vector<double> scores(candidates.size(), 0.0);

    if (total > model.config.max_seq) {
        // too long to pack: one forward per candidate
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            std::vector<int> seq(context.begin(), context.end());
            seq.insert(seq.end(), candidates[j].begin(), candidates[j].end());
            const ForwardOutput fo = run_forward(model, seq, {}, injection);
            for (std::size_t t = 0; t < candidates[j].size(); ++t) {
                scores[j] += log_softmax_at(fo.logits.row(c - 1 + static_cast<int>(t)), candidates[j][t]);
            }
        }
        return scores;
    }

    // Pack every candidate after one shared context. Each candidate sees the
    // context and its own earlier tokens, at the positions it would have alone.
    std::vector<int> tokens(context.begin(), context.end());
    std::vector<int> positions(static_cast<std::size_t>(c));
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<int> starts;
    for (const auto& cand : candidates) {
        starts.push_back(static_cast<int>(tokens.size()));
        for (std::size_t t = 0; t < cand.size(); ++t) {
            tokens.push_back(cand[t]);
            positions.push_back(c + static_cast<int>(t));
        }
    }
    Tensor bias({total, total}, -std::numeric_limits<float>::infinity());
    for (int r = 0; r < c; ++r) {
        for (int k = 0; k <= r; ++k) bias.at(r, k) = 0.0f;
    }
    for (std::size_t j = 0; j < candidates.size(); ++j) {
        const int s = starts[j];
        const int len = static_cast<int>(candidates[j].size());
        for (int t = 0; t < len; ++t) {
            for (int k = 0; k < c; ++k) bias.at(s + t, k) = 0.0f;
            for (int k = 0; k <= t; ++k) bias.at(s + t, s + k) = 0.0f;
        }
    }

    ad::Tape tape;
    BoundModel bound(tape, model);
    ForwardRequest req{tokens, {}, std::nullopt, true, positions, &bias};
    if (injection) req.injection = Injection{injection->layer, injection->start, tape.leaf(injection->payload)};
    const Tensor& logits = forward(bound, req).logits->value();
    for (std::size_t j = 0; j < candidates.size(); ++j) {
        for (std::size_t t = 0; t < candidates[j].size(); ++t) {
            const int row = t == 0 ? c - 1 : starts[j] + static_cast<int>(t) - 1;
            scores[j] += log_softmax_at(logits.row(row), candidates[j][t]);
        }
    }
    return scores;
}

RankedAnswer rank_scores(std::vector<double> loglik) {
    RankedAnswer r;
    r.loglik = std::move(loglik);
    r.ranking.resize(r.loglik.size());
    std::iota(r.ranking.begin(), r.ranking.end(), 0);
    std::stable_sort(r.ranking.begin(), r.ranking.end(), [&](int a, int b) { return r.loglik[a] > r.loglik[b]; });
    r.prediction = r.ranking.front();
    r.tie = r.ranking.size() > 1 && r.loglik[r.ranking[0]] == r.loglik[r.ranking[1]];
    return r;
}

RankedAnswer patched_answer(const Weights& decoder, const ActivationPayload& payload, const ProbeQuery& query) {
    query.validate();
    const ModelConfig& cfg = decoder.config;
    if (payload.grid.rank() != 2 || payload.grid.cols() != cfg.d_model) {
        throw ContractError("patched_answer: payload width " + std::to_string(payload.grid.cols()) +
                            " does not match decoder d_model " + std::to_string(cfg.d_model));
    }
    if (payload.layer < 0 || payload.layer >= cfg.n_layers) {
        throw ContractError("patched_answer: payload layer " + std::to_string(payload.layer) + " outside a " +
                            std::to_string(cfg.n_layers) + "-layer decoder");
    }
    const std::vector<int> ctx = patched_context(payload.positions(), query.question);
    return rank_scores(score_candidates(decoder, ctx, query.candidates, PayloadInjection{payload.layer, 0, payload.grid}));
}

RankedAnswer text_answer(const Weights& decoder, std::span<const int> dialogue, const ProbeQuery& query) {
    query.validate();
    std::vector<int> ctx(dialogue.begin(), dialogue.end());
    ctx.insert(ctx.end(), query.question.begin(), query.question.end());
    return rank_scores(score_candidates(decoder, ctx, query.candidates));
}

// ---- sweep ---------------------------------------------------------------------------

TraceReport causal_trace_sweep(const AdaptedModel& encoder, const Weights& decoder,
                               const std::vector<DialogueSample>& dataset, const SweepOptions& options) {
    if (dataset.empty()) throw ContractError("causal_trace_sweep: empty dataset");
    if (options.layers.empty()) throw ContractError("causal_trace_sweep: no layers to sweep");
    if (options.states.empty()) throw ContractError("causal_trace_sweep: no state kinds to query");
    if (!(encoder.base().config == decoder.config)) throw ContractError("causal_trace_sweep: encoder and decoder configs differ");
    std::vector<int> layers = options.layers;
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (int l : layers) {
        if (l < 0 || l >= decoder.config.n_layers) throw ContractError("causal_trace_sweep: layer " + std::to_string(l) + " out of range");
    }
    const AdaptedModel enc = eval_copy(encoder);

    std::vector<std::vector<TraceRecord>> per_sample(dataset.size());
    std::vector<std::map<std::pair<StateKind, int>, double>> chance(dataset.size());
    parallel_for(dataset.size(), [&](std::size_t i) {
        const DialogueSample& s = dataset[i];
        const int cut = s.cut();
        const std::vector<int> tokens = dialogue_tokens(s, cut);
        std::vector<ProbeQuery> queries;
        for (ProbeQuery& q : make_queries(s, cut)) {
            if (std::find(options.states.begin(), options.states.end(), q.kind) != options.states.end()) {
                chance[i][{q.kind, q.agent}] = 1.0 / static_cast<double>(q.candidates.size());
                queries.push_back(std::move(q));
            }
        }
        auto& out = per_sample[i];
        auto record = [&](int layer, const ProbeQuery& q, const RankedAnswer& a) {
            out.push_back({s.id, layer, q.kind, q.agent, a.prediction, q.gold, a.tie});
        };
        if (options.base_row) {
            for (const ProbeQuery& q : queries) record(kBaseLayer, q, text_answer(decoder, tokens, q));
        }
        const auto payloads = capture_layers(enc, tokens, layers);
        for (int l : layers) {
            for (const ProbeQuery& q : queries) record(l, q, patched_answer(decoder, payloads.at(l), q));
        }
    });

    TraceReport report;
    std::map<std::tuple<int, StateKind, int>, TraceCell> cells;
    std::map<std::pair<StateKind, int>, double> chance_all;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        for (const TraceRecord& r : per_sample[i]) {
            TraceCell& c = cells[{r.layer, r.state, r.agent}];
            c.layer = r.layer;
            c.state = r.state;
            c.agent = r.agent;
            c.correct += r.correct() ? 1 : 0;
            c.n += 1;
            report.records.push_back(r);
        }
        for (const auto& [k, v] : chance[i]) chance_all[k] = v;
    }
    for (auto& [key, c] : cells) {
        c.chance = chance_all.at({c.state, c.agent});
        report.cells.push_back(c);
    }
    nlohmann::json states = nlohmann::json::array();
    for (StateKind k : options.states) states.push_back(to_string(k));
    report.manifest = {{"layers", layers},
                       {"states", states},
                       {"samples", dataset.size()},
                       {"encoder_digest", encoder_digest(enc)},
                       {"decoder_digest", decoder.digest()},
                       {"base_row", options.base_row ? "decoder reads the dialogue text then the question, no injection"
                                                     : "omitted"},
                       {"decoder_layout", "placeholder per dialogue position, then the question; payload replaces the "
                                          "residual stream after block l over the placeholder span"},
                       {"desire_scoring", "full ranking of the three items as one answer among six"},
                       {"ties", report.ties()}};
    return report;
}

const TraceCell* TraceReport::find(int layer, StateKind state, int agent) const {
    for (const auto& c : cells) {
        if (c.layer == layer && c.state == state && c.agent == agent) return &c;
    }
    return nullptr;
}

double TraceReport::layer_mean(int layer) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& c : cells) {
        if (c.layer == layer) {
            sum += c.accuracy();
            ++n;
        }
    }
    if (n == 0) throw ContractError("trace report has no cells for layer " + std::to_string(layer));
    return sum / n;
}

std::vector<int> TraceReport::layers() const {
    std::set<int> s;
    for (const auto& c : cells) {
        if (c.layer != kBaseLayer) s.insert(c.layer);
    }
    return {s.begin(), s.end()};
}

int TraceReport::ties() const {
    return static_cast<int>(std::count_if(records.begin(), records.end(), [](const TraceRecord& r) { return r.tie; }));
}

std::string TraceReport::csv() const {
    std::ostringstream os;
    os << "layer,state,agent,accuracy,n,v_info\n";
    for (const auto& c : cells) {
        os << layer_label(c.layer) << ',' << to_string(c.state) << ',' << c.agent << ',' << num(c.accuracy()) << ',' << c.n
           << ',' << (c.v_info ? num(*c.v_info) : "") << '\n';
    }
    return os.str();
}

std::string TraceReport::table_csv() const {
    static constexpr std::array<std::pair<StateKind, const char*>, 3> cols{
        {{StateKind::intention, "Intent"}, {StateKind::desire, "Desire"}, {StateKind::belief, "Belief"}}};
    std::ostringstream os;
    os << "Layer";
    for (const auto& [k, name] : cols) os << ',' << name << " Agent 1," << name << " Agent 2";
    os << '\n';
    std::set<int> rows;
    for (const auto& c : cells) rows.insert(c.layer);
    for (int l : rows) {
        os << (l == kBaseLayer ? "Base" : std::to_string(l));
        for (const auto& [k, name] : cols) {
            for (int a = 1; a <= 2; ++a) {
                const TraceCell* c = find(l, k, a);
                os << ',' << (c ? num(100.0 * c->accuracy()) : "");
            }
        }
        os << '\n';
    }
    return os.str();
}

nlohmann::json TraceReport::json() const {
    nlohmann::json j;
    j["manifest"] = manifest;
    auto& arr = j["cells"] = nlohmann::json::array();
    for (const auto& c : cells) {
        nlohmann::json e{{"layer", layer_label(c.layer)}, {"state", to_string(c.state)}, {"agent", c.agent},
                         {"accuracy", c.accuracy()}, {"correct", c.correct}, {"n", c.n}, {"chance", c.chance}};
        e["v_info"] = c.v_info ? nlohmann::json(*c.v_info) : nlohmann::json(nullptr);
        arr.push_back(std::move(e));
    }
    return j;
}

TraceReport TraceReport::from_json(const nlohmann::json& j) {
    TraceReport r;
    r.manifest = j.value("manifest", nlohmann::json::object());
    for (const auto& e : j.at("cells")) {
        TraceCell c;
        const std::string layer = e.at("layer").get<std::string>();
        c.layer = layer == "base" ? kBaseLayer : std::stoi(layer);
        c.state = parse_state(e.at("state").get<std::string>());
        c.agent = e.at("agent").get<int>();
        c.correct = e.at("correct").get<int>();
        c.n = e.at("n").get<int>();
        c.chance = e.value("chance", 0.0);
        if (e.contains("v_info") && !e["v_info"].is_null()) c.v_info = e["v_info"].get<double>();
        r.cells.push_back(c);
    }
    return r;
}

// ---- probes ----------------------------------------------------------------------------

ProbeSplit make_probe_split(std::size_t n, std::uint64_t seed, double test_fraction) {
    if (n < 2) throw ContractError("probe split needs at least two samples");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ContractError("probe test fraction must be in (0, 1)");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, 0x70726f6265));
    std::shuffle(order.begin(), order.end(), rng);
    auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n)));
    n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
    ProbeSplit s;
    s.seed = seed;
    s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(s.test.begin(), s.test.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

std::vector<double> LinearProbe::log_probs(std::span<const float> x) const {
    if (static_cast<int>(x.size()) != dim) throw ContractError("probe input width mismatch");
    std::vector<double> z(static_cast<std::size_t>(classes));
    for (int k = 0; k < classes; ++k) {
        double s = b[static_cast<std::size_t>(k)];
        for (int d = 0; d < dim; ++d) {
            const double xs = (x[static_cast<std::size_t>(d)] - mean[static_cast<std::size_t>(d)]) * inv_std[static_cast<std::size_t>(d)];
            s += w[static_cast<std::size_t>(k) * dim + d] * xs;
        }
        z[static_cast<std::size_t>(k)] = s;
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    for (double& v : z) v -= lse;
    return z;
}

int LinearProbe::predict(std::span<const float> x) const {
    const auto lp = log_probs(x);
    return static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
}

double ProbeResult::standard_error() const {
    if (n_test == 0) return 0.0;
    return std::sqrt(std::max(accuracy * (1.0 - accuracy), 1e-12) / static_cast<double>(n_test));
}

ProbeResult train_linear_probe(const std::vector<std::vector<float>>& features, const std::vector<int>& labels,
                               std::uint64_t split_seed, const ProbeOptions& options, int classes) {
    if (features.size() != labels.size()) throw ContractError("probe: features and labels differ in count");
    if (features.empty()) throw ContractError("probe: no samples");
    const int dim = static_cast<int>(features.front().size());
    if (dim < 1) throw ContractError("probe: empty feature vectors");
    for (const auto& f : features) {
        if (static_cast<int>(f.size()) != dim) throw ContractError("probe: ragged feature vectors");
    }
    const int max_label = *std::max_element(labels.begin(), labels.end());
    if (*std::min_element(labels.begin(), labels.end()) < 0) throw ContractError("probe: negative label");
    if (classes == 0) classes = max_label + 1;
    if (max_label >= classes) throw ContractError("probe: label outside the class count");

    ProbeResult res;
    res.split = make_probe_split(features.size(), split_seed, options.test_fraction);
    const auto& train = res.split.train;
    std::set<int> present;
    for (std::size_t i : train) present.insert(labels[i]);
    if (present.size() < 2) throw ContractError("probe: train split holds a single class");

    LinearProbe& p = res.probe;
    p.classes = classes;
    p.dim = dim;
    p.mean.assign(static_cast<std::size_t>(dim), 0.0);
    p.inv_std.assign(static_cast<std::size_t>(dim), 0.0);
    for (std::size_t i : train) {
        for (int d = 0; d < dim; ++d) p.mean[static_cast<std::size_t>(d)] += features[i][static_cast<std::size_t>(d)];
    }
    for (double& m : p.mean) m /= static_cast<double>(train.size());
    for (int d = 0; d < dim; ++d) {
        double var = 0.0;
        for (std::size_t i : train) {
            const double dv = features[i][static_cast<std::size_t>(d)] - p.mean[static_cast<std::size_t>(d)];
            var += dv * dv;
        }
        var /= static_cast<double>(train.size());
        // constant features carry nothing; zero them instead of dividing by zero
        p.inv_std[static_cast<std::size_t>(d)] = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
    }

    const auto n = static_cast<std::size_t>(train.size());
    const auto k = static_cast<std::size_t>(classes);
    const auto dd = static_cast<std::size_t>(dim);
    std::vector<double> x(n * dd);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t d = 0; d < dd; ++d) x[r * dd + d] = (features[train[r]][d] - p.mean[d]) * p.inv_std[d];
    }
    p.w.assign(k * dd, 0.0);
    p.b.assign(k, 0.0);
    std::vector<double> gw(k * dd), gb(k), z(k);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int step = 0; step < options.steps; ++step) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            const double* xr = &x[r * dd];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                double s = p.b[c];
                for (std::size_t d = 0; d < dd; ++d) s += p.w[c * dd + d] * xr[d];
                z[c] = s;
                mx = std::max(mx, s);
            }
            double zs = 0.0;
            for (double& v : z) zs += v = std::exp(v - mx);
            for (std::size_t c = 0; c < k; ++c) {
                const double g = (z[c] / zs - (labels[train[r]] == static_cast<int>(c) ? 1.0 : 0.0)) * inv_n;
                gb[c] += g;
                for (std::size_t d = 0; d < dd; ++d) gw[c * dd + d] += g * xr[d];
            }
        }
        for (std::size_t i = 0; i < gw.size(); ++i) p.w[i] -= options.lr * (gw[i] + options.l2 * p.w[i]);
        for (std::size_t c = 0; c < k; ++c) p.b[c] -= options.lr * gb[c];
    }

    int correct = 0;
    double nll = 0.0;
    for (std::size_t i : res.split.test) {
        const auto lp = p.log_probs(features[i]);
        const int pred = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        correct += pred == labels[i] ? 1 : 0;
        nll -= lp[static_cast<std::size_t>(labels[i])];
    }
    res.n_test = res.split.test.size();
    res.accuracy = static_cast<double>(correct) / static_cast<double>(res.n_test);
    res.heldout_nll = nll / static_cast<double>(res.n_test);
    return res;
}

UsableInformation v_usable_info(const ProbeResult& real, const ProbeResult& null, const std::vector<int>& labels) {
    if (!(real.split == null.split)) throw ContractError("v_usable_info: probes were trained on different splits");
    if (real.probe.classes != null.probe.classes) throw ContractError("v_usable_info: probes disagree on the label set");
    const std::size_t n = real.split.train.size() + real.split.test.size();
    if (labels.size() != n) throw ContractError("v_usable_info: label count does not match the probe split");
    UsableInformation u;
    u.raw = null.heldout_nll - real.heldout_nll;
    u.clamped = u.raw < 0.0;
    u.nats = std::max(0.0, u.raw);
    return u;
}

std::vector<float> mean_pool(const Tensor& grid) {
    std::vector<double> acc(static_cast<std::size_t>(grid.cols()), 0.0);
    for (int r = 0; r < grid.rows(); ++r) {
        const auto row = grid.row(r);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += row[c];
    }
    std::vector<float> out(acc.size());
    for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c] / grid.rows());
    return out;
}

}  // namespace costom

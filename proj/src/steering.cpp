#include "costom/steering.hpp"

#include "costom/util.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace costom {

std::string_view to_string(StopReason r) {
    switch (r) {
        case StopReason::none: return "none";
        case StopReason::max_epochs: return "max_epochs";
        case StopReason::patience: return "patience";
        case StopReason::loss_floor: return "loss_floor";
    }
    return "?";
}

StopReason parse_stop_reason(std::string_view s) {
    for (StopReason r : {StopReason::none, StopReason::max_epochs, StopReason::patience, StopReason::loss_floor}) {
        if (to_string(r) == s) return r;
    }
    throw ConfigError("unknown stop reason '" + std::string(s) + "'");
}

StopDecision early_stop(std::span<const double> val_losses, const EarlyStopRule& rule) {
    // Differences such as 0.50 - 0.49 land a hair above 0.01 in binary; an
    // improvement equal to delta up to rounding does not count.
    constexpr double kSlack = 1e-12;
    double best = 0.0;
    int waited = 0;
    for (std::size_t i = 0; i < val_losses.size(); ++i) {
        const double v = val_losses[i];
        const int epoch = static_cast<int>(i) + 1;
        if (v < rule.floor) return {epoch, StopReason::loss_floor};
        if (i == 0 || best - v > rule.delta + kSlack) {
            best = i == 0 ? v : std::min(best, v);
            waited = 0;
        } else {
            ++waited;
            if (waited >= rule.patience) return {epoch, StopReason::patience};
        }
        if (epoch >= rule.max_epochs) return {epoch, StopReason::max_epochs};
    }
    return {};
}

AdapterSpec SteerConfig::resolved_adapters() const {
    AdapterSpec spec = adapters;
    if (spec.layers.empty()) {
        for (int l = 0; l <= patch_layer; ++l) spec.layers.insert(l);
    }
    return spec;
}

void SteerConfig::validate(const ModelConfig& config) const {
    if (patch_layer < 0 || patch_layer >= config.n_layers) {
        throw ContractError("steer: patch layer " + std::to_string(patch_layer) + " outside [0, " +
                            std::to_string(config.n_layers) + ")");
    }
    const AdapterSpec spec = resolved_adapters();
    spec.validate(config);
    for (int l : spec.layers) {
        if (l > patch_layer) {
            throw ContractError("steer: adapter layer " + std::to_string(l) + " lies above the patch layer " +
                                std::to_string(patch_layer));
        }
    }
    if (stop.patience < 1) throw ContractError("steer: patience must be at least 1");
    if (!(stop.delta > 0.0)) throw ContractError("steer: delta must be positive");
    if (stop.max_epochs < 1) throw ContractError("steer: max_epochs must be at least 1");
    if (batch < 1) throw ContractError("steer: batch must be at least 1");
    if (!(lr > 0.0f)) throw ContractError("steer: lr must be positive");
}

void to_json(nlohmann::json& j, const SteerConfig& c) {
    j = nlohmann::json{{"patch_layer", c.patch_layer},
                       {"adapters", c.resolved_adapters()},
                       {"lr", c.lr},
                       {"warmup", c.warmup},
                       {"beta1", c.optimizer.beta1},
                       {"beta2", c.optimizer.beta2},
                       {"eps", c.optimizer.eps},
                       {"weight_decay", c.optimizer.weight_decay},
                       {"batch", c.batch},
                       {"max_epochs", c.stop.max_epochs},
                       {"patience", c.stop.patience},
                       {"delta", c.stop.delta},
                       {"floor", c.stop.floor},
                       {"seed", c.seed}};
}

std::vector<double> TrainHistory::val_losses() const {
    std::vector<double> v;
    for (const auto& e : epochs) v.push_back(e.val_loss);
    return v;
}

nlohmann::json TrainHistory::json() const {
    nlohmann::json j{{"initial_val_loss", initial_val_loss}, {"stop_reason", to_string(stop)}, {"steps", steps}};
    auto& arr = j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs) arr.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
    return j;
}

ad::Var tom_loss(BoundModel& decoder, const ActivationPayload& payload, const ProbeQuery& query) {
    query.validate();
    for (const ad::Var& p : decoder.base_params()) {
        if (p.requires_grad()) throw ContractError("tom_loss: decoder parameters must be frozen");
    }
    if (!decoder.adapter_params().empty()) throw ContractError("tom_loss: the decoder must not carry adapters");
    if (!payload.live || !payload.live->valid() || !payload.live->requires_grad()) {
        throw ContractError("tom_loss: payload is detached from the encoder, no gradient can cross the patch");
    }
    if (payload.live->tape != &decoder.tape()) throw ContractError("tom_loss: payload and decoder live on different tapes");

    const auto& gold = query.candidates[static_cast<std::size_t>(query.gold)];
    std::vector<int> seq = patched_context(payload.positions(), query.question);
    const int c = static_cast<int>(seq.size());
    seq.insert(seq.end(), gold.begin(), gold.end());
    ForwardRequest req{seq, {}, Injection{payload.layer, 0, *payload.live}, true, {}, nullptr};
    const ForwardVars fv = forward(decoder, req);
    const ad::Var rows = ad::slice_rows(*fv.logits, c - 1, static_cast<int>(gold.size()));
    const std::vector<float> mask(gold.size(), 1.0f);
    return ad::softmax_cross_entropy(rows, gold, mask);
}

namespace {

struct Item {
    std::size_t sample;
    std::size_t query;
};

struct Prepared {
    std::vector<std::vector<int>> tokens;
    std::vector<std::vector<ProbeQuery>> queries;
    std::vector<Item> items;
};

Prepared prepare(const std::vector<DialogueSample>& samples) {
    Prepared p;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int cut = samples[i].cut();
        p.tokens.push_back(dialogue_tokens(samples[i], cut));
        p.queries.push_back(make_queries(samples[i], cut));
        for (std::size_t q = 0; q < p.queries.back().size(); ++q) p.items.push_back({i, q});
    }
    return p;
}

// Per sample: one encoder pass, then every query of that sample on the same tape.
ad::Var sample_loss_sum(BoundModel& enc, const Weights& decoder, const Prepared& data, std::size_t sample, int layer) {
    const ActivationPayload payload = capture_live(enc, data.tokens[sample], layer);
    BoundModel dec(enc.tape(), decoder);
    std::optional<ad::Var> total;
    for (const ProbeQuery& q : data.queries[sample]) {
        const ad::Var l = tom_loss(dec, payload, q);
        total = total ? ad::add(*total, l) : l;
    }
    return *total;
}

double mean_loss(const AdaptedModel& encoder, const Weights& decoder, const Prepared& data, int layer) {
    std::vector<double> sums(data.tokens.size());
    parallel_for(sums.size(), [&](std::size_t i) {
        ad::Tape tape;
        BoundModel enc(tape, encoder);
        sums[i] = sample_loss_sum(enc, decoder, data, i, layer).value().data[0];
    });
    return std::accumulate(sums.begin(), sums.end(), 0.0) / static_cast<double>(data.items.size());
}

AdaptedModel eval_mode(const AdaptedModel& m) {
    AdaptedModel copy = m;
    copy.set_training(false);
    return copy;
}

}  // namespace

double validation_loss(const AdaptedModel& encoder, const Weights& decoder, const std::vector<DialogueSample>& samples,
                       int layer) {
    if (samples.empty()) throw ContractError("validation_loss: empty sample set");
    return mean_loss(eval_mode(encoder), decoder, prepare(samples), layer);
}

SteerResult steer_train(const AdaptedModel& encoder, const Weights& decoder, const std::vector<DialogueSample>& train,
                        const std::vector<DialogueSample>& val, const SteerConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
    if (train.empty()) throw ContractError("steer_train: empty train set");
    if (val.empty()) throw ContractError("steer_train: empty validation set");
    if (!(encoder.base().config == decoder.config)) throw ContractError("steer_train: encoder and decoder configs differ");
    config.validate(decoder.config);

    SteerResult res{encoder, {}};
    AdaptedModel& enc = res.encoder;
    if (enc.adapters().empty()) enc.attach(config.resolved_adapters(), config.seed);
    for (const auto& [key, ad] : enc.adapters()) {
        if (key.layer > config.patch_layer) {
            throw ContractError("steer_train: encoder carries an adapter at layer " + std::to_string(key.layer) +
                                ", above the patch layer");
        }
    }

    const Prepared tr = prepare(train);
    const Prepared va = prepare(val);
    const int layer = config.patch_layer;
    const auto batch = static_cast<std::size_t>(config.batch);
    const long steps_per_epoch = static_cast<long>((tr.tokens.size() + batch - 1) / batch);
    const long total_steps = steps_per_epoch * config.stop.max_epochs;

    auto named = enc.trainable_parameters();
    std::vector<Tensor*> params;
    for (auto& [name, t] : named) params.push_back(t);
    AdamW opt(params, config.optimizer);

    TrainHistory& hist = res.history;
    hist.initial_val_loss = mean_loss(eval_mode(enc), decoder, va, layer);

    // batches are drawn over dialogues; each brings all of its queries
    std::vector<std::size_t> order(tr.tokens.size());
    std::iota(order.begin(), order.end(), 0);
    long step = 0;
    for (int epoch = 1; epoch <= config.stop.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        enc.set_training(true);

        double train_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch, ++step) {
            const std::size_t count = std::min(batch, order.size() - begin);
            std::vector<std::vector<Tensor>> grads(count);
            std::vector<double> sums(count);
            std::size_t n_items = 0;
            for (std::size_t b = 0; b < count; ++b) n_items += tr.queries[order[begin + b]].size();
            parallel_for(count, [&](std::size_t b) {
                const std::size_t sample = order[begin + b];
                ad::Tape tape;
                BoundModel bound_enc(tape, enc, mix_seed(config.seed ^ 0x64726f70, static_cast<std::uint64_t>(step) * batch + b));
                const ad::Var loss = sample_loss_sum(bound_enc, decoder, tr, sample, layer);
                sums[b] = loss.value().data[0];
                const ad::GradientMap gm = tape.backward(loss);
                for (const ad::Var& p : bound_enc.adapter_params()) {
                    const Tensor* g = gm.find(p);
                    grads[b].push_back(g != nullptr ? *g : Tensor(p.shape(), 0.0f));
                }
            });
            std::vector<Tensor> total = std::move(grads[0]);
            for (std::size_t b = 1; b < count; ++b) {
                for (std::size_t p = 0; p < total.size(); ++p) {
                    for (std::size_t k = 0; k < total[p].size(); ++k) total[p].data[k] += grads[b][p].data[k];
                }
            }
            // mean over every (dialogue, query) pair in the batch
            const float inv = 1.0f / static_cast<float>(n_items);
            std::vector<const Tensor*> gptr;
            for (Tensor& g : total) {
                for (float& v : g.data) v *= inv;
                gptr.push_back(&g);
            }
            opt.step(gptr, linear_lr(config.lr, step, total_steps, config.warmup));
            for (double l : sums) train_sum += l;
        }
        enc.set_training(false);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_sum / static_cast<double>(tr.items.size());
        rec.val_loss = mean_loss(enc, decoder, va, layer);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        hist.epochs.push_back(rec);
        hist.steps = static_cast<int>(step);
        if (on_epoch) on_epoch(rec);

        const StopDecision d = early_stop(hist.val_losses(), config.stop);
        if (d.reason != StopReason::none) {
            hist.stop = d.reason;
            break;
        }
    }
    return res;
}

int select_intervention_layer(const TraceReport& report) {
    const std::vector<int> layers = report.layers();
    if (layers.empty()) throw ContractError("select_intervention_layer: empty report");
    if (layers.size() < 2) throw ContractError("select_intervention_layer: report covers fewer than two layers");
    int best = layers.front();
    double best_mean = report.layer_mean(best);
    for (int l : layers) {
        const double m = report.layer_mean(l);
        if (m > best_mean) {
            best = l;
            best_mean = m;
        }
    }
    return best;
}

}  // namespace costom

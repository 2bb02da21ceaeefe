#include "costom/transformer.hpp"

#include "costom/optim.hpp"
#include "costom/util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace costom {

namespace {

constexpr int kAttnNorm = 7;
constexpr int kFfnNorm = 8;

int site_index(Site s) { return static_cast<int>(s); }

}  // namespace

BoundModel::BoundModel(ad::Tape& tape, const Weights& weights, bool train_base) : tape_(&tape), weights_(&weights) {
    for (const auto& [name, t] : weights.named()) base_.push_back(tape.param(*t, train_base));
}

BoundModel::BoundModel(ad::Tape& tape, const AdaptedModel& model, std::uint64_t dropout_seed)
    : BoundModel(tape, model.base(), false) {
    training_ = model.training();
    dropout_rng_.seed(dropout_seed);
    for (const auto& [key, ad] : model.adapters()) {
        BoundAdapter b{tape.param(ad.a, true), tape.param(ad.b, true), ad.scale, ad.dropout};
        adapter_vars_.push_back(b.a);
        adapter_vars_.push_back(b.b);
        adapters_.emplace(key, b);
    }
}

ad::Var BoundModel::project(ad::Var x, int layer, Site site) {
    ad::Var out = ad::matmul(x, layer_param(layer, site_index(site)));
    auto it = adapters_.find({layer, site});
    if (it == adapters_.end()) return out;
    const BoundAdapter& ad = it->second;
    ad::Var in = x;
    if (training_ && ad.dropout > 0.0f) {
        std::bernoulli_distribution keep(1.0 - ad.dropout);
        Tensor mask(x.shape());
        const float inv = 1.0f / (1.0f - ad.dropout);
        for (float& v : mask.data) v = keep(dropout_rng_) ? inv : 0.0f;
        in = ad::mul(x, tape_->leaf(std::move(mask)));
    }
    ad::Var delta = ad::scale(ad::matmul(ad::matmul(in, ad.a), ad.b), ad.scale);
    return ad::add(out, delta);
}

ForwardVars forward(BoundModel& model, const ForwardRequest& request) {
    const ModelConfig& cfg = model.config();
    const int len = static_cast<int>(request.tokens.size());
    if (len < 1) throw ContractError("forward: empty token sequence");
    if (len > cfg.max_seq) {
        throw ContractError("forward: sequence of " + std::to_string(len) + " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    for (int tap : request.taps) {
        if (tap < 0 || tap >= cfg.n_layers) {
            throw ContractError("forward: tap layer " + std::to_string(tap) + " outside [0, " + std::to_string(cfg.n_layers) + ")");
        }
    }
    if (request.injection) {
        const Injection& inj = *request.injection;
        if (inj.layer < 0 || inj.layer >= cfg.n_layers) {
            throw ContractError("forward: injection layer " + std::to_string(inj.layer) + " outside [0, " +
                                std::to_string(cfg.n_layers) + ")");
        }
        const Tensor& p = inj.payload.value();
        if (p.rank() != 2 || p.cols() != cfg.d_model) {
            throw ContractError("forward: payload shape " + ad::shape_str(p.shape) + " does not match d_model " +
                                std::to_string(cfg.d_model));
        }
        if (inj.start < 0 || inj.start + p.rows() > len) {
            throw ContractError("forward: payload rows [" + std::to_string(inj.start) + ", " +
                                std::to_string(inj.start + p.rows()) + ") outside a sequence of " + std::to_string(len));
        }
    }

    int last = cfg.n_layers - 1;
    if (!request.logits) {
        last = request.taps.empty() ? -1 : *std::max_element(request.taps.begin(), request.taps.end());
        if (request.injection) last = std::max(last, request.injection->layer);
    }

    if (!request.positions.empty()) {
        if (static_cast<int>(request.positions.size()) != len) throw ContractError("forward: positions must match tokens");
        for (int p : request.positions) {
            if (p < 0 || p >= cfg.max_seq) throw ContractError("forward: position id " + std::to_string(p) + " outside max_seq");
        }
    }
    if (request.attn_bias != nullptr && request.attn_bias->shape != ad::Shape{len, len}) {
        throw ContractError("forward: attention bias must be [len, len]");
    }

    ForwardVars out;
    ad::Var pos = request.positions.empty() ? ad::slice_rows(model.pos_emb(), 0, len)
                                            : ad::embedding(model.pos_emb(), request.positions);
    ad::Var h = ad::add(ad::embedding(model.tok_emb(), request.tokens), pos);
    std::optional<ad::Var> bias;
    if (request.attn_bias != nullptr) bias = model.tape().param(*request.attn_bias, false);
    const int heads = cfg.n_heads;
    const int hd = cfg.head_dim();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

    for (int l = 0; l <= last; ++l) {
        if (std::find(request.skip.begin(), request.skip.end(), l) != request.skip.end()) {
            if (request.injection && request.injection->layer == l) {
                h = ad::replace_rows(h, request.injection->start, request.injection->payload);
            }
            if (std::find(request.taps.begin(), request.taps.end(), l) != request.taps.end()) out.taps.emplace(l, h);
            continue;
        }
        ad::Var x = ad::rms_norm(h, model.layer_param(l, kAttnNorm));
        ad::Var q = model.project(x, l, Site::q);
        ad::Var k = model.project(x, l, Site::k);
        ad::Var v = model.project(x, l, Site::v);
        std::vector<ad::Var> head_out;
        head_out.reserve(static_cast<std::size_t>(heads));
        for (int hi = 0; hi < heads; ++hi) {
            ad::Var qh = heads == 1 ? q : ad::slice_cols(q, hi * hd, hd);
            ad::Var kh = heads == 1 ? k : ad::slice_cols(k, hi * hd, hd);
            ad::Var vh = heads == 1 ? v : ad::slice_cols(v, hi * hd, hd);
            ad::Var raw = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
            ad::Var scores = bias ? ad::add(raw, *bias) : ad::causal_mask(raw);
            head_out.push_back(ad::matmul(ad::softmax_rows(scores), vh));
        }
        ad::Var att = heads == 1 ? head_out.front() : ad::concat_cols(head_out);
        h = ad::add(h, model.project(att, l, Site::o));

        ad::Var x2 = ad::rms_norm(h, model.layer_param(l, kFfnNorm));
        ad::Var gated = ad::mul(ad::gelu(model.project(x2, l, Site::gate)), model.project(x2, l, Site::up));
        h = ad::add(h, model.project(gated, l, Site::down));

        if (request.injection && request.injection->layer == l) {
            h = ad::replace_rows(h, request.injection->start, request.injection->payload);
        }
        if (std::find(request.taps.begin(), request.taps.end(), l) != request.taps.end()) out.taps.emplace(l, h);
    }

    if (request.logits) {
        ad::Var hn = ad::rms_norm(h, model.final_norm());
        out.logits = ad::matmul(hn, ad::transpose(model.tok_emb()));
    }
    return out;
}

namespace {

template <class Model>
ForwardOutput run_forward_impl(const Model& m, std::span<const int> tokens, const std::vector<int>& taps,
                               const std::optional<PayloadInjection>& injection) {
    ad::Tape tape;
    BoundModel bound(tape, m);
    ForwardRequest req{tokens, taps, std::nullopt, true, {}, nullptr};
    if (injection) req.injection = Injection{injection->layer, injection->start, tape.leaf(injection->payload)};
    ForwardVars vars = forward(bound, req);
    ForwardOutput out;
    out.logits = vars.logits->value();
    for (const auto& [l, v] : vars.taps) out.taps.emplace(l, v.value());
    return out;
}

}  // namespace

ForwardOutput run_forward(const Weights& weights, std::span<const int> tokens, const std::vector<int>& taps,
                          const std::optional<PayloadInjection>& injection) {
    return run_forward_impl(weights, tokens, taps, injection);
}

ForwardOutput run_forward(const AdaptedModel& model, std::span<const int> tokens, const std::vector<int>& taps,
                          const std::optional<PayloadInjection>& injection) {
    return run_forward_impl(model, tokens, taps, injection);
}

std::vector<int> generate(const Weights& weights, std::span<const int> prompt, int max_new, const Decoding& decoding,
                          const std::optional<PayloadInjection>& injection, std::optional<int> stop_token) {
    if (prompt.empty()) throw ContractError("generate: empty prompt");
    if (injection && injection->start + injection->payload.rows() > static_cast<int>(prompt.size())) {
        throw ContractError("generate: injection span must lie inside the prompt");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    std::mt19937_64 rng(decoding.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int step = 0; step < max_new && static_cast<int>(seq.size()) < weights.config.max_seq; ++step) {
        const ForwardOutput fo = run_forward(weights, seq, {}, injection);
        const auto last = fo.logits.row(fo.logits.rows() - 1);
        int next = 0;
        if (decoding.greedy) {
            next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
        } else {
            if (!(decoding.temperature > 0.0f)) throw ContractError("generate: temperature must be positive");
            const float mx = *std::max_element(last.begin(), last.end());
            std::vector<double> p(last.size());
            double z = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp((last[i] - mx) / decoding.temperature);
            double u = unif(rng) * z;
            next = static_cast<int>(p.size()) - 1;
            for (std::size_t i = 0; i < p.size(); ++i) {
                if ((u -= p[i]) <= 0.0) {
                    next = static_cast<int>(i);
                    break;
                }
            }
        }
        seq.push_back(next);
        out.push_back(next);
        if (stop_token && next == *stop_token) break;
    }
    return out;
}

ad::Var lm_loss(BoundModel& model, std::span<const int> tokens, std::span<const float> mask, std::vector<int> skip) {
    const int len = static_cast<int>(tokens.size());
    if (len < 2) throw ContractError("lm_loss: need at least two tokens");
    ForwardVars fv = forward(model, {tokens, {}, std::nullopt, true, {}, nullptr, std::move(skip)});
    ad::Var logits = ad::slice_rows(*fv.logits, 0, len - 1);
    std::vector<float> m(static_cast<std::size_t>(len - 1), 1.0f);
    if (!mask.empty()) {
        if (mask.size() != m.size()) throw ContractError("lm_loss: mask must cover positions 1..len-1");
        m.assign(mask.begin(), mask.end());
    }
    return ad::softmax_cross_entropy(logits, tokens.subspan(1), m);
}

PretrainResult pretrain_lm(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                           const PretrainSchedule& schedule, const std::function<void(int, float)>& on_step) {
    if (corpus.empty()) throw ContractError("pretrain_lm: empty corpus");
    if (schedule.steps < 1 || schedule.batch < 1 || !(schedule.lr > 0.0f)) {
        throw ContractError("pretrain_lm: steps, batch and lr must be positive");
    }
    if (!(schedule.layer_drop >= 0.0f && schedule.layer_drop < 1.0f)) throw ContractError("pretrain_lm: layer_drop must lie in [0, 1)");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].size() < 2) throw ContractError("pretrain_lm: document " + std::to_string(i) + " is shorter than 2 tokens");
    }

    PretrainResult result{init_weights(config, schedule.seed), 0.0f, 0.0f, {}};
    Weights& w = result.weights;
    auto named = w.named_mut();
    std::vector<Tensor*> params;
    for (auto& [name, t] : named) params.push_back(t);
    AdamW opt(params, {0.9f, 0.999f, 1e-8f, schedule.weight_decay});

    std::mt19937_64 rng(mix_seed(schedule.seed, 0x70726574));
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    const auto batch = static_cast<std::size_t>(schedule.batch);

    for (int step = 0; step < schedule.steps; ++step) {
        std::vector<std::size_t> docs(batch);
        for (auto& d : docs) d = pick(rng);
        std::vector<std::vector<int>> skips(batch);
        if (schedule.layer_drop > 0.0f) {
            std::bernoulli_distribution drop(schedule.layer_drop);
            for (auto& sk : skips) {
                for (int l = 0; l < config.n_layers; ++l) {
                    if (drop(rng)) sk.push_back(l);
                }
            }
        }

        std::vector<std::vector<Tensor>> grads(batch);
        std::vector<float> losses(batch);
        parallel_for(batch, [&](std::size_t i) {
            ad::Tape tape;
            BoundModel bound(tape, w, true);
            ad::Var loss = lm_loss(bound, corpus[docs[i]], {}, skips[i]);
            losses[i] = loss.value().data[0];
            const ad::GradientMap gm = tape.backward(loss);
            grads[i].reserve(params.size());
            for (const ad::Var& p : bound.base_params()) {
                const Tensor* g = gm.find(p);
                grads[i].push_back(g != nullptr ? *g : Tensor(p.shape(), 0.0f));
            }
        });

        // deterministic reduction in batch order
        std::vector<Tensor> total = std::move(grads[0]);
        for (std::size_t i = 1; i < batch; ++i) {
            for (std::size_t p = 0; p < total.size(); ++p) {
                for (std::size_t k = 0; k < total[p].size(); ++k) total[p].data[k] += grads[i][p].data[k];
            }
        }
        const float inv = 1.0f / static_cast<float>(batch);
        std::vector<const Tensor*> gptr;
        for (Tensor& g : total) {
            for (float& v : g.data) v *= inv;
            gptr.push_back(&g);
        }
        opt.step(gptr, linear_lr(schedule.lr, step, schedule.steps, schedule.warmup));

        const float mean_loss = std::accumulate(losses.begin(), losses.end(), 0.0f) * inv;
        result.losses.push_back(mean_loss);
        if (step == 0) result.initial_loss = mean_loss;
        result.final_loss = mean_loss;
        if (on_step) on_step(step, mean_loss);
    }
    return result;
}

}  // namespace costom

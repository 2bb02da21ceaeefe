#pragma once

#include "costom/adapters.hpp"
#include "costom/autodiff.hpp"
#include "costom/model.hpp"

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>

namespace costom {

/// Model parameters registered as leaves on one tape, plus the adapter
/// branch (with its dropout stream) when the model is adapted.
class BoundModel {
public:
    /// Base-only binding. train_base marks every weight as requiring grad.
    BoundModel(ad::Tape& tape, const Weights& weights, bool train_base = false);
    /// Base frozen, adapters trainable. Dropout follows model.training().
    BoundModel(ad::Tape& tape, const AdaptedModel& model, std::uint64_t dropout_seed = 0);

    ad::Tape& tape() const { return *tape_; }
    const Weights& weights() const { return *weights_; }
    const ModelConfig& config() const { return weights_->config; }

    /// Same order as Weights::named().
    const std::vector<ad::Var>& base_params() const { return base_; }
    /// Same order as AdaptedModel::trainable_parameters().
    const std::vector<ad::Var>& adapter_params() const { return adapter_vars_; }

    /// x W for the block's projection, plus the adapter delta when present.
    ad::Var project(ad::Var x, int layer, Site site);

    ad::Var tok_emb() const { return base_[0]; }
    ad::Var pos_emb() const { return base_[1]; }
    ad::Var layer_param(int layer, int index) const { return base_[2 + static_cast<std::size_t>(layer) * 9 + index]; }
    ad::Var final_norm() const { return base_.back(); }

private:
    struct BoundAdapter {
        ad::Var a, b;
        float scale;
        float dropout;
    };

    ad::Tape* tape_;
    const Weights* weights_;
    std::vector<ad::Var> base_;
    std::vector<ad::Var> adapter_vars_;
    std::map<AdapterKey, BoundAdapter> adapters_;
    bool training_ = false;
    std::mt19937_64 dropout_rng_;
};

/// Replace the residual stream after block `layer` at rows [start, start + payload rows).
struct Injection {
    int layer = 0;
    int start = 0;
    ad::Var payload;
};

struct ForwardRequest {
    std::span<const int> tokens;
    std::vector<int> taps;               // residual stream after these blocks
    std::optional<Injection> injection;
    bool logits = true;                  // false stops after the deepest tap
    std::span<const int> positions;      // position ids; empty means 0..len-1
    const Tensor* attn_bias = nullptr;   // additive [len, len] score bias replacing the causal mask
    std::vector<int> skip;               // blocks passed through as identity (layer drop)
};

struct ForwardVars {
    std::optional<ad::Var> logits;       // [len, vocab]
    std::map<int, ad::Var> taps;         // [len, d_model] each
};

ForwardVars forward(BoundModel& model, const ForwardRequest& request);

// ---- value-level convenience wrappers (fresh tape per call) ----------------

struct PayloadInjection {
    int layer = 0;
    int start = 0;
    Tensor payload;
};

struct ForwardOutput {
    Tensor logits;
    std::map<int, Tensor> taps;
};

ForwardOutput run_forward(const Weights& weights, std::span<const int> tokens, const std::vector<int>& taps = {},
                          const std::optional<PayloadInjection>& injection = std::nullopt);
ForwardOutput run_forward(const AdaptedModel& model, std::span<const int> tokens, const std::vector<int>& taps = {},
                          const std::optional<PayloadInjection>& injection = std::nullopt);

struct Decoding {
    bool greedy = true;
    float temperature = 1.0f;
    std::uint64_t seed = 0;
};

/// Autoregressive continuation of prompt. The injection, if any, must lie in
/// the prompt and is re-applied on every step. Stops early after emitting
/// stop_token when given; the stop token is included in the output.
std::vector<int> generate(const Weights& weights, std::span<const int> prompt, int max_new, const Decoding& decoding = {},
                          const std::optional<PayloadInjection>& injection = std::nullopt,
                          std::optional<int> stop_token = std::nullopt);

/// Mean next-token cross entropy over the sequence; mask (optional) weights
/// each predicted position 1..len-1.
ad::Var lm_loss(BoundModel& model, std::span<const int> tokens, std::span<const float> mask = {},
                std::vector<int> skip = {});

struct PretrainSchedule {
    int steps = 1000;
    int batch = 8;
    float lr = 1e-3f;
    int warmup = 0;
    float weight_decay = 0.01f;
    // Each block of each document is skipped with this probability (stochastic
    // depth), so later blocks learn to read the context without the earlier ones.
    float layer_drop = 0.0f;
    std::uint64_t seed = 42;
};

struct PretrainResult {
    Weights weights;
    float initial_loss = 0.0f;
    float final_loss = 0.0f;
    std::vector<float> losses;  // per step batch mean
};

/// Next-token training on whole documents with AdamW and linear decay.
/// Batches are drawn with a seeded RNG; the result is a pure function of
/// (config, corpus, schedule).
PretrainResult pretrain_lm(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                           const PretrainSchedule& schedule,
                           const std::function<void(int, float)>& on_step = {});

}  // namespace costom

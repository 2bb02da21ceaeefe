#pragma once

// Adapter training through a frozen decoder: the loss is computed on the
// decoder's answer to a question about a patched-in encoder activation, and
// its gradient crosses the patch into the encoder's shallow-layer adapters.

#include "costom/optim.hpp"
#include "costom/tracing.hpp"

#include <chrono>
#include <functional>

namespace costom {

struct EarlyStopRule {
    int max_epochs = 10;
    int patience = 3;
    double delta = 0.01;  // improvement must exceed this, absolute
    double floor = 0.1;   // stop once the loss is strictly below this
};

enum class StopReason { none, max_epochs, patience, loss_floor };
std::string_view to_string(StopReason r);
StopReason parse_stop_reason(std::string_view s);

struct StopDecision {
    int epoch = 0;  // 1-based epoch after which training stops; 0 means keep going
    StopReason reason = StopReason::none;
};

/// Decision over post-epoch validation losses. The first loss sets the best
/// value; a later loss counts as progress only when it beats the best by
/// more than delta. Within one epoch the floor wins over patience, and
/// patience over the epoch cap.
StopDecision early_stop(std::span<const double> val_losses, const EarlyStopRule& rule);

struct SteerConfig {
    int patch_layer = 2;
    AdapterSpec adapters;  // layers default to 0..patch_layer when empty
    float lr = 1e-4f;
    int warmup = 0;
    AdamWConfig optimizer;
    int batch = 4;
    EarlyStopRule stop;
    std::uint64_t seed = 42;

    /// Adapter layers filled in when unset.
    AdapterSpec resolved_adapters() const;
    void validate(const ModelConfig& config) const;
};

void to_json(nlohmann::json& j, const SteerConfig& c);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double wall_seconds = 0.0;
};

struct TrainHistory {
    double initial_val_loss = 0.0;  // before any update
    std::vector<EpochRecord> epochs;
    StopReason stop = StopReason::none;
    int steps = 0;

    std::vector<double> val_losses() const;
    /// Without wall-clock fields, so equal runs serialize identically.
    nlohmann::json json() const;
};

/// -mean log P(gold tokens) under the patched decoder. The decoder must be
/// bound frozen and the payload must still be attached to its tape.
ad::Var tom_loss(BoundModel& decoder, const ActivationPayload& payload, const ProbeQuery& query);

struct SteerResult {
    AdaptedModel encoder;
    TrainHistory history;
};

/// Batches hold `batch` dialogues; each dialogue contributes all of its
/// queries, read at its stage cut, once per epoch.
SteerResult steer_train(const AdaptedModel& encoder, const Weights& decoder, const std::vector<DialogueSample>& train,
                        const std::vector<DialogueSample>& val, const SteerConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Mean tom_loss over every query of every sample, encoder in evaluation mode.
double validation_loss(const AdaptedModel& encoder, const Weights& decoder, const std::vector<DialogueSample>& samples,
                       int layer);

/// Layer with the highest mean cell accuracy; ties go to the smaller index.
int select_intervention_layer(const TraceReport& report);

}  // namespace costom

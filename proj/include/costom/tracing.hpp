#pragma once

// Activation patching: capture an encoder's residual stream at one layer,
// transplant it into a decoder reading a question, and score the answers.

#include "costom/taskgen.hpp"
#include "costom/transformer.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace costom {

struct ActivationPayload {
    int layer = 0;
    Tensor grid;                   // [positions, d_model]
    std::string source_digest;     // hash of (model digest, tokens, layer)
    std::optional<ad::Var> live;   // set when captured on a live tape

    int positions() const { return grid.rows(); }
};

/// Digest of base weights plus adapters; names the encoder in reports.
std::string encoder_digest(const AdaptedModel& encoder);

ActivationPayload capture(const Weights& encoder, std::span<const int> tokens, int layer);
ActivationPayload capture(const AdaptedModel& encoder, std::span<const int> tokens, int layer);
/// Every layer in `layers` from one forward pass.
std::map<int, ActivationPayload> capture_layers(const AdaptedModel& encoder, std::span<const int> tokens,
                                                const std::vector<int>& layers);
/// Capture on an existing tape; the payload keeps its Var so gradient can
/// flow back into the encoder. Only blocks 0..layer are evaluated.
ActivationPayload capture_live(BoundModel& encoder, std::span<const int> tokens, int layer);

/// Decoder context: one placeholder token per payload position, then the question.
std::vector<int> patched_context(int positions, std::span<const int> question);

/// Summed next-token log-likelihood of each candidate after `context`.
/// Candidates share one forward pass when they fit in max_seq.
std::vector<double> score_candidates(const Weights& model, std::span<const int> context,
                                     const std::vector<std::vector<int>>& candidates,
                                     const std::optional<PayloadInjection>& injection = std::nullopt);

struct RankedAnswer {
    std::vector<double> loglik;   // per candidate
    std::vector<int> ranking;     // candidate indices, best first; ties keep the lower index first
    int prediction = 0;
    bool tie = false;             // the best score was shared
};

RankedAnswer rank_scores(std::vector<double> loglik);

RankedAnswer patched_answer(const Weights& decoder, const ActivationPayload& payload, const ProbeQuery& query);
/// The unpatched condition: the decoder reads the dialogue text followed by the question.
RankedAnswer text_answer(const Weights& decoder, std::span<const int> dialogue, const ProbeQuery& query);

inline constexpr int kBaseLayer = -1;

struct TraceRecord {
    int sample = 0;
    int layer = 0;  // kBaseLayer for the text condition
    StateKind state = StateKind::desire;
    int agent = 1;
    int predicted = 0;
    int gold = 0;
    bool tie = false;
    bool correct() const { return predicted == gold; }
};

struct TraceCell {
    int layer = 0;
    StateKind state = StateKind::desire;
    int agent = 1;
    int correct = 0;
    int n = 0;
    double chance = 0.0;
    std::optional<double> v_info;

    double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / n; }
};

struct TraceReport {
    std::vector<TraceCell> cells;     // base row first, then layers ascending, states, agents
    std::vector<TraceRecord> records; // per (sample, layer, query)
    nlohmann::json manifest;

    const TraceCell* find(int layer, StateKind state, int agent) const;
    /// Mean accuracy over the cells of one layer.
    double layer_mean(int layer) const;
    std::vector<int> layers() const;  // swept layers, base row excluded
    int ties() const;

    std::string csv() const;
    /// Wide table: one row per layer, columns Intent/Desire/Belief x Agent 1/Agent 2.
    std::string table_csv() const;
    nlohmann::json json() const;
    static TraceReport from_json(const nlohmann::json& j);
};

struct SweepOptions {
    std::vector<int> layers;
    std::vector<StateKind> states{kAllStates.begin(), kAllStates.end()};
    bool base_row = true;
};

/// Every sample is read at its own stage cut.
TraceReport causal_trace_sweep(const AdaptedModel& encoder, const Weights& decoder,
                               const std::vector<DialogueSample>& dataset, const SweepOptions& options);

// ---- linear probes ------------------------------------------------------------

struct ProbeSplit {
    std::vector<std::size_t> train, test;
    std::uint64_t seed = 0;
    bool operator==(const ProbeSplit&) const = default;
};

ProbeSplit make_probe_split(std::size_t n, std::uint64_t seed, double test_fraction = 0.3);

struct ProbeOptions {
    int steps = 1000;
    double lr = 0.5;
    double l2 = 1e-4;
    double test_fraction = 0.3;
};

/// Multinomial logistic regression on standardized features.
struct LinearProbe {
    int classes = 0;
    int dim = 0;
    std::vector<double> mean, inv_std;  // feature standardization from the train split
    std::vector<double> w;              // [classes, dim]
    std::vector<double> b;              // [classes]

    std::vector<double> log_probs(std::span<const float> x) const;
    int predict(std::span<const float> x) const;
    bool operator==(const LinearProbe&) const = default;
};

struct ProbeResult {
    LinearProbe probe;
    ProbeSplit split;
    double accuracy = 0.0;      // held out
    double heldout_nll = 0.0;   // mean, nats
    std::size_t n_test = 0;
    /// Binomial standard error of the held-out accuracy.
    double standard_error() const;
};

/// Full-batch gradient descent for a fixed number of steps; deterministic.
/// `classes` defaults to max label + 1.
ProbeResult train_linear_probe(const std::vector<std::vector<float>>& features, const std::vector<int>& labels,
                               std::uint64_t split_seed, const ProbeOptions& options = {}, int classes = 0);

struct UsableInformation {
    double nats = 0.0;
    bool clamped = false;
    double raw = 0.0;
};

/// H_V(Y) - H_V(Y|R), both as held-out NLL; negative values clamp to zero.
UsableInformation v_usable_info(const ProbeResult& real, const ProbeResult& null, const std::vector<int>& labels);

/// Mean over positions.
std::vector<float> mean_pool(const Tensor& grid);

}  // namespace costom

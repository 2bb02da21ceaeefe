#pragma once

#include "costom/model.hpp"

#include <compare>
#include <map>
#include <memory>
#include <set>

namespace costom {

/// Which low-rank adapters to install and how they behave.
struct AdapterSpec {
    int rank = 16;
    float alpha = 32.0f;
    float dropout = 0.05f;  // adapter-branch input only, training mode only
    std::vector<Site> sites{kAllSites.begin(), kAllSites.end()};
    std::set<int> layers;

    void validate(const ModelConfig& config) const;
};

void to_json(nlohmann::json& j, const AdapterSpec& s);
void from_json(const nlohmann::json& j, AdapterSpec& s);

struct AdapterKey {
    int layer = 0;
    Site site = Site::q;
    auto operator<=>(const AdapterKey&) const = default;
};

/// delta(x) = scale * (drop(x) A) B with A [d_in, r] and B [r, d_out].
struct LowRankAdapter {
    Tensor a;
    Tensor b;
    float scale = 1.0f;  // alpha / rank
    float dropout = 0.0f;
};

using AdapterSet = std::map<AdapterKey, LowRankAdapter>;

/// A frozen base model plus trainable low-rank adapters.
class AdaptedModel {
public:
    explicit AdaptedModel(std::shared_ptr<const Weights> base);

    const Weights& base() const { return *base_; }
    std::shared_ptr<const Weights> base_ptr() const { return base_; }
    const AdapterSet& adapters() const { return adapters_; }
    AdapterSet& adapters() { return adapters_; }

    /// A ~ N(0, 0.02), B = 0. Rejects a (layer, site) that already has an adapter.
    void attach(const AdapterSpec& spec, std::uint64_t seed);

    bool training() const { return training_; }
    void set_training(bool on) { training_ = on; }

    /// Exactly the adapter matrices, A then B per (layer, site) in key order.
    std::vector<std::pair<std::string, Tensor*>> trainable_parameters();
    std::vector<std::pair<std::string, const Tensor*>> trainable_parameters() const;
    std::size_t trainable_count() const;

    std::string adapter_digest() const;

private:
    std::shared_ptr<const Weights> base_;
    AdapterSet adapters_;
    bool training_ = false;
};

AdaptedModel attach(std::shared_ptr<const Weights> base, const AdapterSpec& spec, std::uint64_t seed);

/// W' = W + scale * A B at every adapted site. Requires evaluation mode.
Weights merge_preview(const AdaptedModel& model);

/// Same bundle convention as model checkpoints; the manifest lists layer, site
/// and part (A|B) per tensor and the header records the base digest.
void save_adapters(const AdaptedModel& model, const std::filesystem::path& path);
/// Loads adapters onto base; rejects a checkpoint made for a different base.
AdaptedModel load_adapters(std::shared_ptr<const Weights> base, const std::filesystem::path& path);

}  // namespace costom

#include "costom/adapters.hpp"

#include "costom/util.hpp"

#include <random>

namespace costom {

void AdapterSpec::validate(const ModelConfig& config) const {
    if (rank < 1) throw ContractError("adapter spec: rank must be >= 1, got " + std::to_string(rank));
    if (!(dropout >= 0.0f && dropout < 1.0f)) {
        throw ContractError("adapter spec: dropout must lie in [0, 1), got " + std::to_string(dropout));
    }
    if (sites.empty()) throw ContractError("adapter spec: no target sites");
    for (int l : layers) {
        if (l < 0 || l >= config.n_layers) {
            throw ContractError("adapter spec: layer " + std::to_string(l) + " outside [0, " +
                                std::to_string(config.n_layers) + ")");
        }
    }
}

void to_json(nlohmann::json& j, const AdapterSpec& s) {
    std::vector<std::string> sites;
    for (Site site : s.sites) sites.emplace_back(site_name(site));
    j = {{"rank", s.rank}, {"alpha", s.alpha}, {"dropout", s.dropout}, {"sites", sites}, {"layers", s.layers}};
}

void from_json(const nlohmann::json& j, AdapterSpec& s) {
    j.at("rank").get_to(s.rank);
    j.at("alpha").get_to(s.alpha);
    j.at("dropout").get_to(s.dropout);
    s.sites.clear();
    for (const auto& name : j.at("sites")) s.sites.push_back(parse_site(name.get<std::string>()));
    s.layers = j.at("layers").get<std::set<int>>();
}

AdaptedModel::AdaptedModel(std::shared_ptr<const Weights> base) : base_(std::move(base)) {
    if (!base_) throw ContractError("adapted model needs base weights");
}

void AdaptedModel::attach(const AdapterSpec& spec, std::uint64_t seed) {
    spec.validate(base_->config);
    for (int l : spec.layers) {
        for (Site s : spec.sites) {
            if (adapters_.contains({l, s})) {
                throw ContractError("adapter already attached at layer " + std::to_string(l) + " site " +
                                    std::string(site_name(s)));
            }
        }
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    for (int l : spec.layers) {
        for (Site s : spec.sites) {
            const auto [d_in, d_out] = site_dims(base_->config, s);
            LowRankAdapter ad;
            ad.a = Tensor({d_in, spec.rank});
            for (float& v : ad.a.data) v = normal(rng);
            ad.b = Tensor({spec.rank, d_out}, 0.0f);
            ad.scale = spec.alpha / static_cast<float>(spec.rank);
            ad.dropout = spec.dropout;
            adapters_.emplace(AdapterKey{l, s}, std::move(ad));
        }
    }
}

std::vector<std::pair<std::string, const Tensor*>> AdaptedModel::trainable_parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const auto& [key, ad] : adapters_) {
        const std::string p = "layer" + std::to_string(key.layer) + "." + std::string(site_name(key.site)) + ".";
        out.emplace_back(p + "A", &ad.a);
        out.emplace_back(p + "B", &ad.b);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor*>> AdaptedModel::trainable_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).trainable_parameters()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

std::size_t AdaptedModel::trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : trainable_parameters()) n += t->size();
    return n;
}

std::string AdaptedModel::adapter_digest() const {
    Sha256 h;
    for (const auto& [key, ad] : adapters_) {
        h.update_pod(key.layer);
        h.update(site_name(key.site));
        h.update_pod(ad.scale);
        h.update_pod(ad.dropout);
        h.update(ad.a.data.data(), ad.a.size() * sizeof(float));
        h.update(ad.b.data.data(), ad.b.size() * sizeof(float));
    }
    return h.hex();
}

AdaptedModel attach(std::shared_ptr<const Weights> base, const AdapterSpec& spec, std::uint64_t seed) {
    AdaptedModel m(std::move(base));
    m.attach(spec, seed);
    return m;
}

Weights merge_preview(const AdaptedModel& model) {
    if (model.training()) throw ContractError("merge_preview requires evaluation mode");
    Weights merged = model.base();
    for (const auto& [key, ad] : model.adapters()) {
        Tensor& w = merged.layers[key.layer].proj(key.site);
        const int r = ad.a.cols();
        for (int i = 0; i < w.rows(); ++i) {
            for (int k = 0; k < r; ++k) {
                const float aik = ad.a.at(i, k) * ad.scale;
                if (aik == 0.0f) continue;
                for (int j = 0; j < w.cols(); ++j) w.at(i, j) += aik * ad.b.at(k, j);
            }
        }
    }
    return merged;
}

void save_adapters(const AdaptedModel& model, const std::filesystem::path& path) {
    std::vector<nlohmann::json> extra;
    for (const auto& [key, ad] : model.adapters()) {
        for (const char* part : {"A", "B"}) {
            extra.push_back({{"layer", key.layer},
                             {"site", site_name(key.site)},
                             {"part", part},
                             {"scale", ad.scale},
                             {"dropout", ad.dropout}});
        }
    }
    nlohmann::json header = {{"kind", "adapters"}, {"base_digest", model.base().digest()}, {"digest", model.adapter_digest()}};
    io::write_bundle(path, "COSTOMA1", std::move(header), model.trainable_parameters(), extra);
}

AdaptedModel load_adapters(std::shared_ptr<const Weights> base, const std::filesystem::path& path) {
    io::Bundle b = io::read_bundle(path, "COSTOMA1");
    AdaptedModel m(std::move(base));
    if (b.header.at("base_digest").get<std::string>() != m.base().digest()) {
        throw ContractError(path.string() + ": adapters were trained against a different base model");
    }
    const auto& entries = b.header.at("tensors");
    if (entries.size() % 2 != 0) throw ContractError(path.string() + ": adapter manifest must pair A and B");
    for (std::size_t i = 0; i < entries.size(); i += 2) {
        const auto& ea = entries[i];
        const auto& eb = entries[i + 1];
        if (ea.at("part") != "A" || eb.at("part") != "B" || ea.at("layer") != eb.at("layer") || ea.at("site") != eb.at("site")) {
            throw ContractError(path.string() + ": malformed adapter manifest at entry " + std::to_string(i));
        }
        AdapterKey key{ea.at("layer").get<int>(), parse_site(ea.at("site").get<std::string>())};
        if (key.layer < 0 || key.layer >= m.base().config.n_layers) {
            throw ContractError(path.string() + ": adapter layer out of range");
        }
        const auto [d_in, d_out] = site_dims(m.base().config, key.site);
        LowRankAdapter ad{std::move(b.tensors[i]), std::move(b.tensors[i + 1]), ea.at("scale").get<float>(),
                          ea.at("dropout").get<float>()};
        if (ad.a.rows() != d_in || ad.b.cols() != d_out || ad.a.cols() != ad.b.rows()) {
            throw ContractError(path.string() + ": adapter shapes do not match the base model");
        }
        m.adapters().emplace(key, std::move(ad));
    }
    if (m.adapter_digest() != b.header.at("digest").get<std::string>()) {
        throw ContractError(path.string() + ": adapter digest mismatch");
    }
    return m;
}

}  // namespace costom

#include "costom/model.hpp"

#include "costom/util.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace costom {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw ContractError(std::string("model config: ") + name + " must be >= 1, got " + std::to_string(v));
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq, "max_seq");
    if (d_model % n_heads != 0) {
        throw ContractError("model config: n_heads " + std::to_string(n_heads) + " does not divide d_model " +
                            std::to_string(d_model));
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
         {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq").get_to(c.max_seq);
}

std::string_view site_name(Site s) {
    switch (s) {
        case Site::q: return "q";
        case Site::k: return "k";
        case Site::v: return "v";
        case Site::o: return "o";
        case Site::gate: return "gate";
        case Site::up: return "up";
        case Site::down: return "down";
    }
    return "?";
}

Site parse_site(std::string_view name) {
    for (Site s : kAllSites) {
        if (site_name(s) == name) return s;
    }
    throw ContractError("unknown projection site '" + std::string(name) + "'");
}

std::pair<int, int> site_dims(const ModelConfig& c, Site s) {
    switch (s) {
        case Site::gate:
        case Site::up: return {c.d_model, c.d_ff};
        case Site::down: return {c.d_ff, c.d_model};
        default: return {c.d_model, c.d_model};
    }
}

const Tensor& LayerWeights::proj(Site s) const {
    switch (s) {
        case Site::q: return wq;
        case Site::k: return wk;
        case Site::v: return wv;
        case Site::o: return wo;
        case Site::gate: return w_gate;
        case Site::up: return w_up;
        case Site::down: return w_down;
    }
    return wq;
}

Tensor& LayerWeights::proj(Site s) { return const_cast<Tensor&>(std::as_const(*this).proj(s)); }

std::vector<std::pair<std::string, const Tensor*>> Weights::named() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        for (Site s : kAllSites) out.emplace_back(p + "w_" + std::string(site_name(s)), &layers[l].proj(s));
        out.emplace_back(p + "attn_norm", &layers[l].attn_norm);
        out.emplace_back(p + "ffn_norm", &layers[l].ffn_norm);
    }
    out.emplace_back("final_norm", &final_norm);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Weights::named_mut() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).named()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

std::size_t Weights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t->size();
    return n;
}

std::string Weights::digest() const {
    Sha256 h;
    h.update(nlohmann::json(config).dump());
    for (const auto& [name, t] : named()) {
        h.update(name);
        for (int e : t->shape) h.update_pod(e);
        h.update(t->data.data(), t->data.size() * sizeof(float));
    }
    return h.hex();
}

Weights init_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    auto randn = [&](ad::Shape shape, float mult = 1.0f) {
        Tensor t(std::move(shape));
        for (float& v : t.data) v = normal(rng) * mult;
        return t;
    };
    const int d = config.d_model;
    const float resid = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_layers));

    Weights w;
    w.config = config;
    w.seed = seed;
    w.tok_emb = randn({config.vocab_size, d});
    w.pos_emb = randn({config.max_seq, d});
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = randn({d, d});
        lw.wk = randn({d, d});
        lw.wv = randn({d, d});
        lw.wo = randn({d, d}, resid);
        lw.w_gate = randn({d, config.d_ff});
        lw.w_up = randn({d, config.d_ff});
        lw.w_down = randn({config.d_ff, d}, resid);
        lw.attn_norm = Tensor({d}, 1.0f);
        lw.ffn_norm = Tensor({d}, 1.0f);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor({d}, 1.0f);
    return w;
}

namespace io {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void write_bundle(const std::filesystem::path& path, std::string_view magic, nlohmann::json header,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                  const std::vector<nlohmann::json>& extra_tensor_fields) {
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        nlohmann::json entry = {{"name", tensors[i].first}, {"shape", tensors[i].second->shape}};
        if (i < extra_tensor_fields.size()) entry.update(extra_tensor_fields[i]);
        list.push_back(std::move(entry));
    }
    header["format_version"] = kFormatVersion;
    header["tensors"] = std::move(list);
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t->data.data()), static_cast<std::streamsize>(t->data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("short write to " + path.string());
}

Bundle read_bundle(const std::filesystem::path& path, std::string_view magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string m(magic.size(), '\0');
    in.read(m.data(), static_cast<std::streamsize>(m.size()));
    if (m != magic) throw ContractError(path.string() + ": bad magic, expected " + std::string(magic));
    const auto version = get<std::uint32_t>(in);
    if (version != kFormatVersion) throw ContractError(path.string() + ": unsupported format version " + std::to_string(version));
    const auto len = get<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    Bundle b;
    b.header = nlohmann::json::parse(text);
    for (const auto& entry : b.header.at("tensors")) {
        Tensor t(entry.at("shape").get<ad::Shape>());
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!in) throw ContractError(path.string() + ": truncated tensor " + entry.at("name").get<std::string>());
        b.tensors.push_back(std::move(t));
    }
    return b;
}

}  // namespace io

void save_checkpoint(const Weights& w, const std::filesystem::path& path) {
    nlohmann::json header = {{"kind", "model"}, {"config", w.config}, {"seed", w.seed}, {"digest", w.digest()}};
    io::write_bundle(path, "COSTOMW1", std::move(header), w.named());
}

Weights load_checkpoint(const std::filesystem::path& path) {
    io::Bundle b = io::read_bundle(path, "COSTOMW1");
    Weights w = init_weights(b.header.at("config").get<ModelConfig>(), 0);
    w.seed = b.header.at("seed").get<std::uint64_t>();
    auto slots = w.named_mut();
    if (slots.size() != b.tensors.size()) throw ContractError(path.string() + ": tensor count does not match config");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& entry = b.header["tensors"][i];
        if (entry.at("name").get<std::string>() != slots[i].first || b.tensors[i].shape != slots[i].second->shape) {
            throw ContractError(path.string() + ": manifest entry " + std::to_string(i) + " does not match the model layout");
        }
        *slots[i].second = std::move(b.tensors[i]);
    }
    if (w.digest() != b.header.at("digest").get<std::string>()) {
        throw ContractError(path.string() + ": digest mismatch, file is corrupt");
    }
    return w;
}

}  // namespace costom

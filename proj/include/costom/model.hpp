#pragma once

#include "costom/autodiff.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace costom {

using ad::Tensor;

/// Architecture of the decoder-only transformer. Blocks are pre-norm with a
/// gated GELU feed-forward and learned positional embeddings; the
/// unembedding is tied to the token embedding.
struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 256;
    int max_seq = 256;

    int head_dim() const { return d_model / n_heads; }
    /// Throws ContractError naming the offending field.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// The seven linear projection sites of a block.
enum class Site { q, k, v, o, gate, up, down };
inline constexpr std::array<Site, 7> kAllSites{Site::q, Site::k, Site::v, Site::o, Site::gate, Site::up, Site::down};

std::string_view site_name(Site s);
Site parse_site(std::string_view name);
/// (d_in, d_out) of the projection at a site.
std::pair<int, int> site_dims(const ModelConfig& c, Site s);

struct LayerWeights {
    Tensor wq, wk, wv, wo;        // [d, d]
    Tensor w_gate, w_up;          // [d, d_ff]
    Tensor w_down;                // [d_ff, d]
    Tensor attn_norm, ffn_norm;   // [d]

    const Tensor& proj(Site s) const;
    Tensor& proj(Site s);
};

/// Dense parameters. Projections are stored [d_in, d_out] so y = x W.
struct Weights {
    ModelConfig config;
    std::uint64_t seed = 0;
    Tensor tok_emb;     // [vocab, d], also the unembedding
    Tensor pos_emb;     // [max_seq, d]
    std::vector<LayerWeights> layers;
    Tensor final_norm;  // [d]

    /// Every parameter with its stable name, in checkpoint order.
    std::vector<std::pair<std::string, const Tensor*>> named() const;
    std::vector<std::pair<std::string, Tensor*>> named_mut();
    std::size_t parameter_count() const;
    /// SHA-256 over config, names, shapes and raw values.
    std::string digest() const;
};

/// Scaled-normal init (std 0.02); wo and w_down additionally scaled by
/// 1/sqrt(2 n_layers); norm gains start at 1.
Weights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Checkpoint: magic, u32 format version, u64 header length, JSON header
/// {format_version, config, seed, digest, tensors:[{name, shape}]}, then the
/// raw little-endian floats of every tensor in header order.
void save_checkpoint(const Weights& w, const std::filesystem::path& path);
Weights load_checkpoint(const std::filesystem::path& path);

namespace io {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Bundle {
    nlohmann::json header;
    std::vector<Tensor> tensors;
};

/// Writes header + tensors; header["tensors"] is filled from names/shapes.
void write_bundle(const std::filesystem::path& path, std::string_view magic, nlohmann::json header,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                  const std::vector<nlohmann::json>& extra_tensor_fields = {});
Bundle read_bundle(const std::filesystem::path& path, std::string_view magic);

}  // namespace io

}  // namespace costom

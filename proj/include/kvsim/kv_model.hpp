#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kvsim {

/// Transformer geometry needed for KV footprint accounting.
struct ModelConfig {
    std::string name;
    std::uint32_t num_layers = 1;
    std::uint32_t num_kv_heads = 1;
    std::uint32_t head_dim = 1;
    std::uint32_t bytes_per_element = 2;

    // Throws ConfigError when a field is out of range.
    void validate() const;
    std::uint64_t bytes_per_token() const;
};

ModelConfig llava_1_5_7b();
ModelConfig llama_3_1_70b();
// Accepts "llava-1.5-7b" and "llama-3.1-70b".
ModelConfig model_preset(const std::string& name);

enum class Modality { Image, Text };

const char* to_string(Modality m);

struct KVSegment {
    Modality modality = Modality::Text;
    std::uint64_t token_count = 0;
    std::uint64_t original_token_count = 0;
    bool compressed = false;

    bool operator==(const KVSegment&) const = default;
};

/// Image segments always precede text segments.
struct KVCacheSpec {
    std::vector<KVSegment> segments;
    std::uint64_t decode_appended_tokens = 0;

    std::uint64_t total_tokens() const;
    std::uint64_t original_tokens() const;
    bool any_compressed() const;

    bool operator==(const KVCacheSpec&) const = default;
};

enum class MapKind { MeanPool, SeededLinear };

struct CompressorSpec {
    std::uint32_t factor_k = 5;
    MapKind map_kind = MapKind::MeanPool;
    std::uint64_t seed = 0;

    double ratio() const { return 1.0 / static_cast<double>(factor_k); }
    void validate() const;
};

/// 2 (K and V) x layers x heads x head_dim x dtype width x tokens.
/// Saturates at UINT64_MAX instead of wrapping.
std::uint64_t kv_bytes(const ModelConfig& config, std::uint64_t tokens);

/// ceil(n / k); the trailing partial chunk counts as a full output token.
std::uint64_t compressed_length(std::uint64_t n, std::uint32_t k);

KVCacheSpec split_modalities(std::uint64_t image_tokens, std::uint64_t text_tokens);

KVCacheSpec compressed_spec(const KVCacheSpec& spec, const CompressorSpec& comp);

/// Dense row-major matrix of token vectors (one row per token).
struct TokenMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    TokenMatrix() = default;
    TokenMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const TokenMatrix&) const = default;
};

/// The k -> 1 chunk weights SeededLinear uses for a chunk of `chunk_len`
/// tokens (chunk_len <= k). Always sums to 1.
std::vector<double> chunk_weights(const CompressorSpec& comp, std::size_t chunk_len);

/// Pools every run of `factor_k` consecutive rows into one row. Output row r
/// covers input rows [r*k, min((r+1)*k, n)).
TokenMatrix compress_tensor(const TokenMatrix& values, const CompressorSpec& comp);

}  // namespace kvsim

#include "kvsim/kv_model.hpp"

#include <limits>
#include <random>

#include "kvsim/errors.hpp"

namespace kvsim {

namespace {

std::uint64_t mul_sat(std::uint64_t a, std::uint64_t b) {
    std::uint64_t out = 0;
    if (__builtin_mul_overflow(a, b, &out)) {
        return std::numeric_limits<std::uint64_t>::max();
    }
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (num_layers < 1 || num_kv_heads < 1 || head_dim < 1) {
        throw ConfigError("model '" + name + "': layers, kv heads and head_dim must be >= 1");
    }
    if (bytes_per_element != 1 && bytes_per_element != 2 && bytes_per_element != 4) {
        throw ConfigError("model '" + name + "': bytes_per_element must be 1, 2 or 4");
    }
}

std::uint64_t ModelConfig::bytes_per_token() const { return kv_bytes(*this, 1); }

ModelConfig llava_1_5_7b() { return {"llava-1.5-7b", 32, 32, 128, 2}; }

ModelConfig llama_3_1_70b() { return {"llama-3.1-70b", 80, 8, 128, 2}; }

ModelConfig model_preset(const std::string& name) {
    if (name == "llava-1.5-7b") return llava_1_5_7b();
    if (name == "llama-3.1-70b") return llama_3_1_70b();
    throw ConfigError("unknown model preset '" + name + "'");
}

const char* to_string(Modality m) { return m == Modality::Image ? "image" : "text"; }

std::uint64_t KVCacheSpec::total_tokens() const {
    std::uint64_t total = decode_appended_tokens;
    for (const auto& seg : segments) total += seg.token_count;
    return total;
}

std::uint64_t KVCacheSpec::original_tokens() const {
    std::uint64_t total = 0;
    for (const auto& seg : segments) total += seg.original_token_count;
    return total;
}

bool KVCacheSpec::any_compressed() const {
    for (const auto& seg : segments) {
        if (seg.compressed) return true;
    }
    return false;
}

void CompressorSpec::validate() const {
    if (factor_k < 1) throw ConfigError("compression factor k must be >= 1");
}

std::uint64_t kv_bytes(const ModelConfig& config, std::uint64_t tokens) {
    std::uint64_t b = 2;
    b = mul_sat(b, config.num_layers);
    b = mul_sat(b, config.num_kv_heads);
    b = mul_sat(b, config.head_dim);
    b = mul_sat(b, config.bytes_per_element);
    return mul_sat(b, tokens);
}

std::uint64_t compressed_length(std::uint64_t n, std::uint32_t k) {
    if (k <= 1 || n == 0) return n;
    return n / k + (n % k != 0 ? 1 : 0);
}

KVCacheSpec split_modalities(std::uint64_t image_tokens, std::uint64_t text_tokens) {
    if (image_tokens == 0 && text_tokens == 0) {
        throw EmptyInput("request has neither image nor text tokens");
    }
    KVCacheSpec spec;
    if (image_tokens > 0) spec.segments.push_back({Modality::Image, image_tokens, image_tokens, false});
    if (text_tokens > 0) spec.segments.push_back({Modality::Text, text_tokens, text_tokens, false});
    return spec;
}

KVCacheSpec compressed_spec(const KVCacheSpec& spec, const CompressorSpec& comp) {
    comp.validate();
    if (spec.any_compressed()) throw AlreadyCompressed();
    if (spec.decode_appended_tokens != 0) {
        throw InvalidState("compression must happen before any decode tokens are appended");
    }
    KVCacheSpec out = spec;
    for (auto& seg : out.segments) {
        seg.original_token_count = seg.token_count;
        seg.token_count = compressed_length(seg.token_count, comp.factor_k);
        seg.compressed = true;
    }
    return out;
}

std::vector<double> chunk_weights(const CompressorSpec& comp, std::size_t chunk_len) {
    std::vector<double> w(chunk_len, 1.0 / static_cast<double>(chunk_len));
    if (comp.map_kind == MapKind::MeanPool || chunk_len == 0) return w;

    // Draw the full k-vector, then keep the prefix for short chunks, so the
    // partial chunk shares weights with full ones.
    std::mt19937_64 rng(comp.seed);
    std::vector<double> full(comp.factor_k);
    for (auto& x : full) {
        // 53-bit mantissa in (0, 1]; avoids implementation-defined distributions.
        x = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < chunk_len; ++i) sum += full[i];
    for (std::size_t i = 0; i < chunk_len; ++i) w[i] = full[i] / sum;
    return w;
}

TokenMatrix compress_tensor(const TokenMatrix& values, const CompressorSpec& comp) {
    comp.validate();
    if (values.rows == 0) throw EmptyInput("compress_tensor: input has no rows");
    if (values.cols == 0) throw EmptyInput("compress_tensor: input has no columns");

    const std::size_t k = comp.factor_k;
    if (k == 1 && comp.map_kind == MapKind::MeanPool) return values;

    const std::size_t out_rows = compressed_length(values.rows, comp.factor_k);
    TokenMatrix out(out_rows, values.cols);
    const std::vector<double> full_w = chunk_weights(comp, k);
    const bool partial = values.rows % k != 0;
    const std::vector<double> tail_w = partial ? chunk_weights(comp, values.rows % k) : std::vector<double>{};

    for (std::size_t r = 0; r < out_rows; ++r) {
        const std::size_t begin = r * k;
        const std::size_t len = std::min(k, values.rows - begin);
        const auto& w = len == k ? full_w : tail_w;
        for (std::size_t c = 0; c < values.cols; ++c) {
            double acc = 0.0;
            if (comp.map_kind == MapKind::MeanPool) {
                for (std::size_t i = 0; i < len; ++i) acc += values.at(begin + i, c);
                acc /= static_cast<double>(len);
            } else {
                for (std::size_t i = 0; i < len; ++i) acc += w[i] * values.at(begin + i, c);
            }
            out.at(r, c) = acc;
        }
    }
    return out;
}

}  // namespace kvsim

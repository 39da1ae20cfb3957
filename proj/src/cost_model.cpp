#include "kvsim/cost_model.hpp"

#include "kvsim/errors.hpp"

namespace kvsim {

const char* to_string(CompressMode m) { return m == CompressMode::Linear ? "linear" : "attention"; }

CompressMode parse_compress_mode(const std::string& s) {
    if (s == "linear") return CompressMode::Linear;
    if (s == "attention" || s == "attention-based") return CompressMode::AttentionBased;
    throw ConfigError("unknown compress mode '" + s + "' (expected linear|attention)");
}

void CostModel::validate() const {
    for (double c : {prefill_base_s, prefill_per_token_s, compress_base_s, compress_per_token_s,
                     compress_attention_scale_s, decode_step_base_s, decode_step_per_seq_s,
                     decode_step_per_ctx_token_s}) {
        if (!(c >= 0.0)) throw ConfigError("cost model coefficients must be >= 0");
    }
}

CostModel h100_llava7b_default() {
    CostModel c;
    c.prefill_base_s = 0.1;
    c.prefill_per_token_s = 1.0e-4;
    c.compress_mode = CompressMode::Linear;
    c.compress_base_s = 0.004;
    c.compress_per_token_s = 1.0e-5;
    c.compress_attention_scale_s = 98.0;
    c.decode_step_base_s = 0.0025;
    c.decode_step_per_seq_s = 0.0002;
    c.decode_step_per_ctx_token_s = 1.0e-7;
    return c;
}

CostModel cost_preset(const std::string& name) {
    if (name == "h100-llava7b-default") return h100_llava7b_default();
    throw ConfigError("unknown cost preset '" + name + "'");
}

double prefill_duration(const CostModel& cost, std::span<const std::uint64_t> input_tokens) {
    std::uint64_t total = 0;
    for (auto t : input_tokens) total += t;
    return cost.prefill_base_s + cost.prefill_per_token_s * static_cast<double>(total);
}

double compress_duration(const CostModel& cost, const ModelConfig& model, std::span<const std::uint64_t> kv_tokens) {
    if (cost.compress_mode == CompressMode::Linear) {
        std::uint64_t total = 0;
        for (auto t : kv_tokens) total += t;
        return cost.compress_base_s + cost.compress_per_token_s * static_cast<double>(total);
    }
    const double heads_dim = static_cast<double>(model.num_kv_heads) * static_cast<double>(model.head_dim);
    const double batch = static_cast<double>(kv_tokens.size());
    double seconds = cost.compress_base_s;
    for (auto len : kv_tokens) {
        seconds += cost.compress_attention_scale_s * (static_cast<double>(len) * heads_dim / kAttentionNormalizer) * batch;
    }
    return seconds;
}

double decode_step_duration(const CostModel& cost, std::size_t active_seqs, std::uint64_t context_tokens) {
    return cost.decode_step_base_s + cost.decode_step_per_seq_s * static_cast<double>(active_seqs) +
           cost.decode_step_per_ctx_token_s * static_cast<double>(context_tokens);
}

}  // namespace kvsim

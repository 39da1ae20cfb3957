#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvsim/kv_model.hpp"

namespace kvsim {

enum class CompressMode { Linear, AttentionBased };

const char* to_string(CompressMode m);
CompressMode parse_compress_mode(const std::string& s);

/// Affine stage-duration coefficients, in simulated seconds.
struct CostModel {
    double prefill_base_s = 0.0;
    double prefill_per_token_s = 0.0;

    CompressMode compress_mode = CompressMode::Linear;
    double compress_base_s = 0.0;
    double compress_per_token_s = 0.0;
    // Multiplies sum_i(L_i * H * dh) / 1e9 times the batch size.
    double compress_attention_scale_s = 0.0;

    double decode_step_base_s = 0.0;
    double decode_step_per_seq_s = 0.0;
    double decode_step_per_ctx_token_s = 0.0;

    void validate() const;
};

/// Synthetic coefficients for a LLaVA-1.5-7B class model on one H100.
/// Not measurements; see README.
CostModel h100_llava7b_default();
CostModel cost_preset(const std::string& name);

inline constexpr double kAttentionNormalizer = 1e9;

/// Duration of one prefill pass over the batch; `input_tokens` per member.
double prefill_duration(const CostModel& cost, std::span<const std::uint64_t> input_tokens);

/// Duration of compressing the batch; `kv_tokens` is each member's raw
/// cache length. Attention mode pays every request's score pass one after
/// another, and each pass grows with the batch size.
double compress_duration(const CostModel& cost, const ModelConfig& model, std::span<const std::uint64_t> kv_tokens);

/// One decode step for `active_seqs` sequences holding `context_tokens`
/// cached tokens in total.
double decode_step_duration(const CostModel& cost, std::size_t active_seqs, std::uint64_t context_tokens);

}  // namespace kvsim

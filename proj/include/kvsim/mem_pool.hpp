#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kvsim/kv_model.hpp"

namespace kvsim {

using RequestId = std::uint64_t;
using HandleId = std::uint64_t;

enum class CacheState { Raw, Compressed, Freed };
enum class PoolMode { Pooled, LegacyZombie };

const char* to_string(CacheState s);
const char* to_string(PoolMode m);
PoolMode parse_pool_mode(const std::string& s);

struct CacheHandle {
    HandleId handle_id = 0;
    RequestId request_id = 0;
    CacheState state = CacheState::Raw;
    // Footprint of `spec`; always kv_bytes(config, spec.total_tokens()).
    std::uint64_t bytes = 0;
    // LegacyZombie only: the pre-compression cache that was never reclaimed.
    std::uint64_t zombie_bytes = 0;
    KVCacheSpec spec;
    double created_at = 0.0;

    std::uint64_t charged_bytes() const { return state == CacheState::Freed ? 0 : bytes + zombie_bytes; }
};

struct PoolStats {
    std::uint64_t current_bytes = 0;
    std::uint64_t peak_bytes = 0;
    std::uint64_t capacity_bytes = 0;
    std::uint64_t live_handles = 0;
    std::uint64_t zombie_bytes_reclaimed = 0;
    std::uint64_t allocation_count = 0;
};

struct MemorySample {
    double time_s = 0.0;
    std::uint64_t current_bytes = 0;
    std::uint64_t peak_bytes = 0;
    std::uint64_t live_handles = 0;

    bool operator==(const MemorySample&) const = default;
};

enum class PoolOp { Allocate, Compress, Append, Release };

/// One accounting step. raw/compressed are the bytes attributed to the
/// request right after the step, split by cache generation.
struct LedgerEntry {
    double time_s = 0.0;
    PoolOp op = PoolOp::Allocate;
    HandleId handle_id = 0;
    RequestId request_id = 0;
    std::int64_t delta_bytes = 0;
    std::uint64_t raw_bytes = 0;
    std::uint64_t compressed_bytes = 0;
    std::uint64_t pool_bytes_after = 0;
};

/// Central owner of every KV-cache in a run. Stores no payload: a handle is
/// a ledger row, so state transitions are relabels plus byte adjustments.
/// Single-writer; not thread-safe.
class KVCachePool {
public:
    KVCachePool(ModelConfig model, std::uint64_t capacity_bytes, PoolMode mode = PoolMode::Pooled);

    const CacheHandle& allocate(RequestId request_id, const KVCacheSpec& spec, double now);
    const CacheHandle& transition_compressed(HandleId id, const KVCacheSpec& compressed, double now);
    const CacheHandle& append_decode_tokens(HandleId id, std::uint64_t token_count, double now);
    void release(HandleId id, double now);

    MemorySample snapshot(double now);

    const CacheHandle& handle(HandleId id) const;
    const PoolStats& stats() const { return stats_; }
    PoolMode mode() const { return mode_; }
    const ModelConfig& model() const { return model_; }
    std::uint64_t available_bytes() const { return stats_.capacity_bytes - stats_.current_bytes; }

    std::span<const MemorySample> trace() const { return trace_; }
    std::span<const LedgerEntry> ledger() const { return ledger_; }
    // Bumped by every accounting change; lets the engine sample once per event.
    std::uint64_t mutation_count() const { return mutations_; }

    // Σ charged bytes over live handles, recomputed from scratch.
    std::uint64_t recount_bytes() const;
    void set_ledger_enabled(bool on) { ledger_enabled_ = on; }

private:
    CacheHandle& live(HandleId id);
    void charge(std::uint64_t bytes);
    void record(double now, PoolOp op, const CacheHandle& h, std::int64_t delta);

    ModelConfig model_;
    PoolMode mode_;
    PoolStats stats_;
    std::vector<CacheHandle> handles_;
    std::vector<MemorySample> trace_;
    std::vector<LedgerEntry> ledger_;
    std::uint64_t mutations_ = 0;
    bool ledger_enabled_ = true;
};

}  // namespace kvsim

#include "kvsim/mem_pool.hpp"

#include <algorithm>
#include <string>

#include "kvsim/errors.hpp"

namespace kvsim {

const char* to_string(CacheState s) {
    switch (s) {
    case CacheState::Raw: return "raw";
    case CacheState::Compressed: return "compressed";
    case CacheState::Freed: return "freed";
    }
    return "?";
}

const char* to_string(PoolMode m) { return m == PoolMode::Pooled ? "pooled" : "legacy"; }

PoolMode parse_pool_mode(const std::string& s) {
    if (s == "pooled" || s == "pool") return PoolMode::Pooled;
    if (s == "legacy" || s == "legacy-zombie" || s == "zombie") return PoolMode::LegacyZombie;
    throw ConfigError("unknown pool mode '" + s + "' (expected pooled|legacy)");
}

KVCachePool::KVCachePool(ModelConfig model, std::uint64_t capacity_bytes, PoolMode mode)
    : model_(std::move(model)), mode_(mode) {
    model_.validate();
    stats_.capacity_bytes = capacity_bytes;
}

CacheHandle& KVCachePool::live(HandleId id) {
    if (id >= handles_.size()) throw InvalidState("unknown cache handle " + std::to_string(id));
    return handles_[id];
}

const CacheHandle& KVCachePool::handle(HandleId id) const {
    if (id >= handles_.size()) throw InvalidState("unknown cache handle " + std::to_string(id));
    return handles_[id];
}

void KVCachePool::charge(std::uint64_t bytes) {
    if (bytes > available_bytes()) throw CapacityExceeded(bytes, available_bytes());
    stats_.current_bytes += bytes;
    stats_.peak_bytes = std::max(stats_.peak_bytes, stats_.current_bytes);
}

void KVCachePool::record(double now, PoolOp op, const CacheHandle& h, std::int64_t delta) {
    ++mutations_;
    if (!ledger_enabled_) return;
    LedgerEntry e;
    e.time_s = now;
    e.op = op;
    e.handle_id = h.handle_id;
    e.request_id = h.request_id;
    e.delta_bytes = delta;
    switch (h.state) {
    case CacheState::Raw: e.raw_bytes = h.bytes; break;
    case CacheState::Compressed:
        e.raw_bytes = h.zombie_bytes;
        e.compressed_bytes = h.bytes;
        break;
    case CacheState::Freed: break;
    }
    e.pool_bytes_after = stats_.current_bytes;
    ledger_.push_back(e);
}

const CacheHandle& KVCachePool::allocate(RequestId request_id, const KVCacheSpec& spec, double now) {
    const std::uint64_t bytes = kv_bytes(model_, spec.total_tokens());
    charge(bytes);
    CacheHandle h;
    h.handle_id = handles_.size();
    h.request_id = request_id;
    h.state = CacheState::Raw;
    h.bytes = bytes;
    h.spec = spec;
    h.created_at = now;
    handles_.push_back(std::move(h));
    ++stats_.live_handles;
    ++stats_.allocation_count;
    record(now, PoolOp::Allocate, handles_.back(), static_cast<std::int64_t>(bytes));
    return handles_.back();
}

const CacheHandle& KVCachePool::transition_compressed(HandleId id, const KVCacheSpec& compressed, double now) {
    CacheHandle& h = live(id);
    if (h.state != CacheState::Raw) {
        throw InvalidState("handle " + std::to_string(id) + " is " + to_string(h.state) + ", expected raw");
    }
    const std::uint64_t raw = h.bytes;
    const std::uint64_t comp = kv_bytes(model_, compressed.total_tokens());
    std::int64_t delta = 0;
    if (mode_ == PoolMode::Pooled) {
        // Raw release and compressed charge are one step: nothing can observe both.
        if (comp > raw) {
            charge(comp - raw);
        } else {
            stats_.current_bytes -= raw - comp;
            stats_.zombie_bytes_reclaimed += raw - comp;
        }
        delta = static_cast<std::int64_t>(comp) - static_cast<std::int64_t>(raw);
    } else {
        charge(comp);
        h.zombie_bytes = raw;
        delta = static_cast<std::int64_t>(comp);
    }
    h.state = CacheState::Compressed;
    h.bytes = comp;
    h.spec = compressed;
    record(now, PoolOp::Compress, h, delta);
    return h;
}

const CacheHandle& KVCachePool::append_decode_tokens(HandleId id, std::uint64_t token_count, double now) {
    CacheHandle& h = live(id);
    if (h.state != CacheState::Compressed) {
        throw InvalidState("handle " + std::to_string(id) + " is " + to_string(h.state) +
                           ", decode appends need a compressed cache");
    }
    if (token_count == 0) return h;
    const std::uint64_t added = kv_bytes(model_, token_count);
    charge(added);
    h.spec.decode_appended_tokens += token_count;
    h.bytes += added;
    record(now, PoolOp::Append, h, static_cast<std::int64_t>(added));
    return h;
}

void KVCachePool::release(HandleId id, double now) {
    CacheHandle& h = live(id);
    if (h.state == CacheState::Freed) throw DoubleFree(id);
    const std::uint64_t freed = h.bytes + h.zombie_bytes;
    stats_.current_bytes -= freed;
    --stats_.live_handles;
    h.state = CacheState::Freed;
    record(now, PoolOp::Release, h, -static_cast<std::int64_t>(freed));
}

MemorySample KVCachePool::snapshot(double now) {
    MemorySample s{now, stats_.current_bytes, stats_.peak_bytes, stats_.live_handles};
    trace_.push_back(s);
    return s;
}

std::uint64_t KVCachePool::recount_bytes() const {
    std::uint64_t total = 0;
    for (const auto& h : handles_) total += h.charged_bytes();
    return total;
}

}  // namespace kvsim

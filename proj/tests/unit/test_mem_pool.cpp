#include <doctest.h>

#include <map>
#include <random>
#include <vector>

#include "kvsim/errors.hpp"
#include "kvsim/mem_pool.hpp"

using namespace kvsim;

namespace {

constexpr std::uint64_t GB = 1'000'000'000ULL;

// One byte per token keeps the arithmetic readable.
ModelConfig unit_model() {
    ModelConfig m;
    m.name = "unit";
    m.num_layers = 1;
    m.num_kv_heads = 1;
    m.head_dim = 1;
    m.bytes_per_element = 1;
    return m;  // 2 bytes per token (K and V)
}

KVCacheSpec text(std::uint64_t bytes) { return split_modalities(0, bytes / 2); }

}  // namespace

TEST_CASE("allocate accounting") {
    KVCachePool pool(unit_model(), 80 * GB);
    const auto& h = pool.allocate(1, text(2 * GB), 0.0);
    CHECK(h.state == CacheState::Raw);
    CHECK(h.bytes == 2 * GB);
    CHECK(pool.stats().current_bytes == 2 * GB);

    KVCachePool two(unit_model(), 80 * GB);
    two.allocate(1, text(2 * GB), 0.0);
    two.allocate(2, text(3 * GB), 0.0);
    CHECK(two.stats().current_bytes == 5 * GB);
    CHECK(two.stats().live_handles == 2);
    CHECK(two.stats().allocation_count == 2);
}

TEST_CASE("allocate beyond capacity is rejected without side effects") {
    KVCachePool pool(unit_model(), 80 * GB);
    pool.allocate(1, text(79 * GB), 0.0);
    const auto before = pool.snapshot(1.0);
    try {
        pool.allocate(2, text(2 * GB), 1.0);
        FAIL("expected CapacityExceeded");
    } catch (const CapacityExceeded& e) {
        CHECK(e.requested() == 2 * GB);
        CHECK(e.available() == 1 * GB);
    }
    const auto after = pool.snapshot(1.0);
    CHECK(after == before);
    CHECK(pool.stats().live_handles == 1);
}

TEST_CASE("pooled transition reclaims raw bytes in one step") {
    KVCachePool pool(llava_1_5_7b(), 80 * GB);
    const auto raw = split_modalities(1000, 0);
    const auto& h = pool.allocate(1, raw, 0.0);
    const auto id = h.handle_id;
    const auto raw_bytes = h.bytes;
    const auto comp = compressed_spec(raw, CompressorSpec{});
    pool.transition_compressed(id, comp, 1.0);
    CHECK(pool.handle(id).state == CacheState::Compressed);
    CHECK(pool.handle(id).bytes * 5 == raw_bytes);
    CHECK(pool.stats().current_bytes == raw_bytes / 5);
    CHECK(pool.stats().zombie_bytes_reclaimed == raw_bytes - raw_bytes / 5);
    CHECK(pool.handle(id).spec == comp);
    const auto& last = pool.ledger().back();
    CHECK(last.op == PoolOp::Compress);
    CHECK(last.raw_bytes == 0);
    CHECK(last.compressed_bytes == raw_bytes / 5);
    CHECK(last.delta_bytes == -static_cast<std::int64_t>(raw_bytes - raw_bytes / 5));
}

TEST_CASE("identity transition keeps bytes") {
    KVCachePool pool(llava_1_5_7b(), 80 * GB);
    const auto raw = split_modalities(64, 8);
    const auto id = pool.allocate(1, raw, 0.0).handle_id;
    CompressorSpec one;
    one.factor_k = 1;
    pool.transition_compressed(id, compressed_spec(raw, one), 0.0);
    CHECK(pool.handle(id).state == CacheState::Compressed);
    CHECK(pool.stats().current_bytes == kv_bytes(llava_1_5_7b(), 72));
}

TEST_CASE("legacy mode keeps the raw cache until release") {
    KVCachePool pool(unit_model(), 80 * GB, PoolMode::LegacyZombie);
    const auto raw = text(5 * GB);
    const auto id = pool.allocate(1, raw, 0.0).handle_id;
    pool.transition_compressed(id, compressed_spec(raw, CompressorSpec{}), 1.0);
    CHECK(pool.stats().current_bytes == 6 * GB);
    CHECK(pool.handle(id).zombie_bytes == 5 * GB);
    CHECK(pool.stats().zombie_bytes_reclaimed == 0);
    pool.release(id, 2.0);
    CHECK(pool.stats().current_bytes == 0);
    CHECK(pool.stats().peak_bytes == 6 * GB);
}

TEST_CASE("decode appends") {
    KVCachePool pool(llava_1_5_7b(), 80 * GB);
    const auto raw = split_modalities(10, 0);
    const auto id = pool.allocate(1, raw, 0.0).handle_id;
    CHECK_THROWS_AS(pool.append_decode_tokens(id, 1, 0.0), InvalidState);
    pool.transition_compressed(id, compressed_spec(raw, CompressorSpec{}), 0.0);
    const auto before = pool.stats().current_bytes;
    const auto mutations = pool.mutation_count();
    pool.append_decode_tokens(id, 0, 0.0);
    CHECK(pool.stats().current_bytes == before);
    CHECK(pool.mutation_count() == mutations);
    pool.append_decode_tokens(id, 1, 0.0);
    CHECK(pool.stats().current_bytes == before + 524'288);
    CHECK(pool.handle(id).spec.decode_appended_tokens == 1);
    CHECK(pool.handle(id).bytes == kv_bytes(llava_1_5_7b(), pool.handle(id).spec.total_tokens()));
}

TEST_CASE("release and double free") {
    KVCachePool pool(unit_model(), 10 * GB);
    const auto id = pool.allocate(1, text(GB), 0.0).handle_id;
    pool.release(id, 1.0);
    CHECK(pool.stats().current_bytes == 0);
    CHECK(pool.stats().live_handles == 0);
    CHECK_THROWS_AS(pool.release(id, 2.0), DoubleFree);
    CHECK_THROWS_AS(pool.transition_compressed(id, text(2), 2.0), InvalidState);
    CHECK_THROWS_AS(pool.release(12345, 2.0), InvalidState);
}

TEST_CASE("snapshots") {
    KVCachePool pool(unit_model(), 10 * GB);
    const auto empty = pool.snapshot(0.5);
    CHECK(empty == MemorySample{0.5, 0, 0, 0});

    const auto raw = text(5 * GB);
    const auto id = pool.allocate(1, raw, 1.0).handle_id;
    const auto a = pool.snapshot(1.0);
    pool.transition_compressed(id, compressed_spec(raw, CompressorSpec{}), 2.0);
    const auto b = pool.snapshot(2.0);
    pool.release(id, 3.0);
    const auto c = pool.snapshot(3.0);
    // Step-down after compression, then to zero; the peak stays put.
    CHECK(a.current_bytes == 5 * GB);
    CHECK(b.current_bytes == GB);
    CHECK(c.current_bytes == 0);
    CHECK(a.peak_bytes == 5 * GB);
    CHECK(c.peak_bytes == 5 * GB);
    CHECK(pool.trace().size() == 4);
}

TEST_CASE("random operation sequences conserve bytes and keep the pooled invariants") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        KVCachePool pooled(llava_1_5_7b(), 400 * GB, PoolMode::Pooled);
        KVCachePool legacy(llava_1_5_7b(), 400 * GB, PoolMode::LegacyZombie);
        struct Live {
            HandleId p, l;
            KVCacheSpec raw;
            bool compressed = false;
        };
        std::vector<Live> live;
        std::uint64_t last_peak = 0;
        RequestId next = 0;
        for (int step = 0; step < 60; ++step) {
            const auto op = rng() % 4;
            if (op == 0 || live.empty()) {
                const auto raw = split_modalities(rng() % 3000, 1 + rng() % 200);
                live.push_back({pooled.allocate(next, raw, step).handle_id, legacy.allocate(next, raw, step).handle_id,
                                raw});
                ++next;
            } else {
                auto& e = live[rng() % live.size()];
                if (op == 1 && !e.compressed) {
                    const auto c = compressed_spec(e.raw, CompressorSpec{});
                    pooled.transition_compressed(e.p, c, step);
                    legacy.transition_compressed(e.l, c, step);
                    e.compressed = true;
                } else if (op == 2 && e.compressed) {
                    const auto n = rng() % 4;
                    pooled.append_decode_tokens(e.p, n, step);
                    legacy.append_decode_tokens(e.l, n, step);
                } else if (op == 3) {
                    pooled.release(e.p, step);
                    legacy.release(e.l, step);
                    e = live.back();
                    live.pop_back();
                }
            }
            CHECK(pooled.recount_bytes() == pooled.stats().current_bytes);
            CHECK(legacy.recount_bytes() == legacy.stats().current_bytes);
            CHECK(pooled.stats().current_bytes <= legacy.stats().current_bytes);
            CHECK(pooled.stats().peak_bytes <= legacy.stats().peak_bytes);
            CHECK(pooled.stats().peak_bytes >= last_peak);
            last_peak = pooled.stats().peak_bytes;
        }

        // Replaying the ledger deltas reproduces the running total, and no
        // pooled entry ever attributes raw and compressed bytes at once.
        std::int64_t total = 0;
        for (const auto& e : pooled.ledger()) {
            total += e.delta_bytes;
            CHECK(static_cast<std::uint64_t>(total) == e.pool_bytes_after);
            CHECK((e.raw_bytes == 0 || e.compressed_bytes == 0));
        }
        CHECK(static_cast<std::uint64_t>(total) == pooled.stats().current_bytes);
        std::int64_t legacy_total = 0;
        for (const auto& e : legacy.ledger()) legacy_total += e.delta_bytes;
        CHECK(static_cast<std::uint64_t>(legacy_total) == legacy.stats().current_bytes);
    }
}

TEST_CASE("pool mode names") {
    CHECK(parse_pool_mode("pooled") == PoolMode::Pooled);
    CHECK(parse_pool_mode("legacy") == PoolMode::LegacyZombie);
    CHECK_THROWS_AS(parse_pool_mode("paged"), ConfigError);
}

#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "kvsim/cost_model.hpp"
#include "kvsim/kv_model.hpp"
#include "kvsim/mem_pool.hpp"
#include "kvsim/metrics.hpp"
#include "kvsim/scheduler.hpp"
#include "kvsim/workload.hpp"

namespace kvsim {

inline constexpr std::uint64_t kGiB = 1ULL << 30;
inline constexpr std::uint64_t kGB = 1'000'000'000ULL;

struct SimConfig {
    ModelConfig model = llava_1_5_7b();
    CompressorSpec compressor{};
    CostModel cost = h100_llava7b_default();
    SchedulerPolicy policy = DynamicPolicy{};
    std::uint64_t capacity_bytes = 60 * kGB;
    PoolMode pool_mode = PoolMode::Pooled;
    // Prefill and decode share one executor (compress keeps its own).
    bool coupled = false;
    std::uint64_t max_events = 50'000'000;
    // Recount pool bytes and check commitments after every event.
    bool check_invariants = false;
    bool keep_ledger = false;

    std::uint64_t seed = 0;
    std::string config_hash;

    void validate() const;
};

enum class EventKind { Arrival, StageStart, StageComplete, DecodeStep, RequestComplete, Wakeup };

const char* to_string(EventKind k);

struct Event {
    double time = 0.0;
    std::uint64_t seq = 0;
    EventKind kind = EventKind::Arrival;
    Stage stage = Stage::Prefill;
    // Arrival/RequestComplete: the request; StageStart/Complete: batch id.
    std::uint64_t subject = 0;
    std::uint64_t step_index = 0;
};

/// Single-producer single-consumer FIFO between adjacent stages.
class StageLink {
public:
    StageLink(Stage producer, Stage consumer) : producer_(producer), consumer_(consumer) {}
    void push(RequestId id) {
        items_.push_back(id);
        ++pushed_;
    }
    RequestId pop() {
        RequestId id = items_.front();
        items_.pop_front();
        ++popped_;
        return id;
    }
    bool empty() const { return items_.empty(); }
    Stage producer() const { return producer_; }
    Stage consumer() const { return consumer_; }
    std::uint64_t pushed() const { return pushed_; }
    std::uint64_t popped() const { return popped_; }

private:
    Stage producer_;
    Stage consumer_;
    std::deque<RequestId> items_;
    std::uint64_t pushed_ = 0;
    std::uint64_t popped_ = 0;
};

struct DecodeMember {
    RequestId request_id = 0;
    std::uint64_t context_tokens = 0;
    std::uint64_t max_new_tokens = 1;
    std::uint64_t emitted = 0;

    bool finished() const { return emitted >= max_new_tokens; }
};

/// A decode batch that runs until every member emitted its budget. Finished
/// members drop out of later steps.
class DecodeBatch {
public:
    explicit DecodeBatch(std::vector<DecodeMember> members);

    std::size_t active() const { return active_; }
    std::uint64_t active_context_tokens() const;
    bool done() const { return active_ == 0; }
    std::uint64_t steps_done() const { return steps_; }
    const std::vector<DecodeMember>& members() const { return members_; }

    double next_step_duration(const CostModel& cost) const;
    /// One token for every active member; returns members that just finished.
    std::vector<RequestId> complete_step();

private:
    std::vector<DecodeMember> members_;
    std::size_t active_ = 0;
    std::uint64_t steps_ = 0;
};

struct DecodeTimeline {
    std::vector<double> step_end;
    std::vector<std::size_t> active_per_step;
    // Indexed like the input members.
    std::vector<double> first_token;
    std::vector<double> completion;
};

DecodeTimeline execute_decoding(std::vector<DecodeMember> members, const CostModel& cost, double start);

/// One batch execution on a stage, for exclusivity checks.
struct StageExecution {
    Stage stage = Stage::Prefill;
    double start = 0.0;
    double end = 0.0;
    std::size_t batch_size = 0;
};

struct SimResult {
    MetricsReport report;
    PoolStats pool;
    std::vector<LedgerEntry> ledger;
    std::vector<StageExecution> executions;
    std::uint64_t events_processed = 0;
    bool diverged = false;
    std::uint64_t in_flight = 0;
    // Pool conservation checks that ran (one per event when enabled).
    std::uint64_t invariant_checks = 0;
};

/// Lifetime memory a request may still need from the pool, given its
/// stage. Used for admission so allocate/append can never overflow.
struct Footprint {
    std::uint64_t raw_bytes = 0;
    std::uint64_t compressed_bytes = 0;
    std::uint64_t final_bytes = 0;  // compressed plus every decode token
};

Footprint request_footprint(const RequestSpec& r, const ModelConfig& model, const CompressorSpec& comp);
std::uint64_t admission_commitment(const Footprint& f, PoolMode mode);
std::uint64_t post_compress_commitment(const Footprint& f, PoolMode mode);

/// Runs the prefill -> compress -> decode pipeline over `requests`.
SimResult run(const SimConfig& config, const std::vector<RequestSpec>& requests);

}  // namespace kvsim

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kvsim/mem_pool.hpp"

namespace kvsim {

enum class Stage { Prefill = 0, Compress = 1, Decode = 2 };
inline constexpr std::array<Stage, 3> kStages{Stage::Prefill, Stage::Compress, Stage::Decode};

const char* to_string(Stage s);
inline std::size_t index_of(Stage s) { return static_cast<std::size_t>(s); }

struct FcfsPolicy {
    bool operator==(const FcfsPolicy&) const = default;
};

/// Fixed batch sizes per stage (pXcYdZ). A partial batch is flushed once its
/// oldest entry has waited flush_s, otherwise a short tail never runs.
struct StaticPolicy {
    std::uint32_t prefill = 1;
    std::uint32_t compress = 1;
    std::uint32_t decode = 8;
    double flush_s = 1.0;

    std::uint32_t size_for(Stage s) const;
    bool operator==(const StaticPolicy&) const = default;
};

/// Memory-aware greedy batching.
struct DynamicPolicy {
    std::uint32_t b_min = 1;
    std::uint32_t b_max = 16;
    double w_max_s = 0.2;
    bool aging = true;
    // Let the dispatch threshold follow recent queue depth (never below b_min).
    bool adapt = false;

    bool operator==(const DynamicPolicy&) const = default;
};

using SchedulerPolicy = std::variant<FcfsPolicy, StaticPolicy, DynamicPolicy>;

/// Grammar: "fcfs" | "static:pXcYdZ[,flush_ms=F]" |
/// "dynamic:bmin=A,bmax=B,wmax_ms=C[,aging=on|off][,adapt=on|off]".
SchedulerPolicy parse_policy(const std::string& text);
std::string to_string(const SchedulerPolicy& policy);
void validate(const SchedulerPolicy& policy);

struct QueueEntry {
    RequestId request_id = 0;
    double enqueue_time = 0.0;
    double arrival_time = 0.0;
    // Bytes the pool must still commit if this entry is admitted.
    std::uint64_t estimated_bytes = 0;
};

/// FIFO of requests waiting for one stage.
class StageQueue {
public:
    explicit StageQueue(Stage stage = Stage::Prefill) : stage_(stage) {}

    Stage stage() const { return stage_; }
    void push(QueueEntry e);
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    const QueueEntry& front() const { return entries_.front(); }
    const std::deque<QueueEntry>& entries() const { return entries_; }
    double oldest_wait(double now) const { return entries_.empty() ? 0.0 : now - entries_.front().enqueue_time; }
    // Removes the given members, keeping everything else in FIFO order.
    std::vector<QueueEntry> take(std::span<const RequestId> members);

private:
    Stage stage_;
    std::deque<QueueEntry> entries_;
};

struct BatchDecision {
    Stage stage = Stage::Prefill;
    std::vector<RequestId> members;
    double formed_at = 0.0;
    std::uint64_t total_bytes = 0;
};

/// Minimum queue depth before a Dynamic stage dispatches without waiting.
/// `threshold` overrides the policy's b_min (adapted value).
bool should_dispatch(const StageQueue& queue, const SchedulerPolicy& policy, double now,
                     std::optional<std::uint32_t> threshold = std::nullopt);

/// Largest member count fitting `budget_bytes` (capped at b_max), minimum
/// total bytes among those, earliest arrival on remaining ties. When
/// `aging_wait_s` is set, entries that waited at least that long are taken
/// first in FIFO order as long as each fits. Throws EmptyBatch if nothing fits.
BatchDecision max_feasible_batch(const StageQueue& queue, std::uint64_t budget_bytes, std::uint32_t b_max,
                                 double now = 0.0, std::optional<double> aging_wait_s = std::nullopt);

/// Picks the batch a stage should run now. `budget_bytes` is what the pool
/// can still commit; `pool_idle` means no request holds memory, which lets
/// a FIFO policy shrink a batch that could otherwise never fit.
BatchDecision form_stage_batch(Stage stage, const StageQueue& queue, const SchedulerPolicy& policy,
                               std::uint64_t budget_bytes, double now, bool pool_idle = false);

inline constexpr double kAdjustAlpha = 0.3;

/// B_min <- clamp(round(EMA(depths, alpha = 0.3)), 1, b_max). The EMA is
/// seeded with the first sample. An empty window returns policy.b_min.
std::uint32_t adjust_batch(std::span<const std::size_t> recent_depths, const DynamicPolicy& policy);

}  // namespace kvsim

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvsim/mem_pool.hpp"

namespace kvsim {

inline constexpr double kNotReached = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kTtftSloSeconds = 2.0;

/// Lifecycle timestamps for one request. Unreached stages stay NaN.
struct RequestRecord {
    RequestId request_id = 0;
    double arrival = kNotReached;
    double prefill_start = kNotReached;
    double prefill_end = kNotReached;
    double compress_start = kNotReached;
    double compress_end = kNotReached;
    double first_token = kNotReached;
    double completion = kNotReached;
    std::uint64_t input_tokens = 0;
    std::uint64_t output_tokens = 0;
    // Start of the first decode step this request took part in.
    double decode_start = kNotReached;

    bool completed() const { return completion == completion; }
};

double ttft(const RequestRecord& r);
/// Mean inter-token gap after the first token; nullopt for 1-token outputs.
std::optional<double> tpot(const RequestRecord& r);
double total_latency(const RequestRecord& r);
bool meets_ttft_slo(const RequestRecord& r, double slo_s = kTtftSloSeconds);
/// Time inside stage executions over time in system, for one request.
double request_utilization(const RequestRecord& r);

struct Throughput {
    double tokens_per_s = 0.0;
    double req_per_s = 0.0;
};

/// Makespan is last completion minus first arrival over completed records.
Throughput throughput(std::span<const RequestRecord> records);
double utilization_ratio(std::span<const RequestRecord> records);
/// Linear interpolation between closest ranks; `q` in [0, 1].
double percentile(std::vector<double> values, double q);

struct MemorySummary {
    double avg_bytes = 0.0;
    std::uint64_t peak_bytes = 0;
};

/// Time-weighted mean of the step function through the samples.
MemorySummary summarize_memory(std::span<const MemorySample> trace);

struct Aggregates {
    std::uint64_t requests_total = 0;
    std::uint64_t requests_completed = 0;
    double ttft_mean_s = 0.0;
    double ttft_p50_s = 0.0;
    double ttft_p95_s = 0.0;
    double ttft_p99_s = 0.0;
    double tpot_mean_s = 0.0;
    double latency_mean_s = 0.0;
    double normalized_latency_s = 0.0;
    double throughput_tokens_per_s = 0.0;
    double throughput_req_per_s = 0.0;
    double utilization_ratio = 0.0;
    double prefill_queue_mean_s = 0.0;
    double compress_queue_mean_s = 0.0;
    double decode_queue_mean_s = 0.0;
    double compress_stage_mean_s = 0.0;
    double slo_attainment = 0.0;
    double mem_avg_bytes = 0.0;
    std::uint64_t mem_peak_bytes = 0;

    bool operator==(const Aggregates&) const = default;
};

/// Throws MetricError when nothing completed and `allow_empty` is false.
Aggregates compute_aggregates(std::span<const RequestRecord> records, std::span<const MemorySample> memory,
                              bool allow_empty = true);

struct MetricsReport {
    std::vector<RequestRecord> records;
    Aggregates aggregates;
    std::vector<MemorySample> memory_trace;
    std::string config_hash;
    std::uint64_t seed = 0;
};

/// Column names of summary.csv, in order.
std::vector<std::string> summary_columns();
std::vector<std::string> summary_values(const MetricsReport& report);

void write_requests_csv(std::ostream& out, std::span<const RequestRecord> records);
void write_summary_csv(std::ostream& out, const MetricsReport& report);
void write_memory_csv(std::ostream& out, std::span<const MemorySample> trace);
std::vector<RequestRecord> read_requests_csv(std::istream& in);
std::vector<MemorySample> read_memory_csv(std::istream& in);

/// Writes requests.csv, summary.csv and memory.csv into `out_dir`.
void export_csv(const MetricsReport& report, const std::filesystem::path& out_dir);

}  // namespace kvsim

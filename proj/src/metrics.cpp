#include "kvsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "format_util.hpp"
#include "kvsim/errors.hpp"

namespace kvsim {

using detail::fmt_double;

double ttft(const RequestRecord& r) {
    if (!r.completed() || !(r.first_token == r.first_token)) {
        throw MetricError("request " + std::to_string(r.request_id) + " is incomplete");
    }
    return r.first_token - r.arrival;
}

std::optional<double> tpot(const RequestRecord& r) {
    if (!r.completed()) throw MetricError("request " + std::to_string(r.request_id) + " is incomplete");
    if (r.output_tokens < 2) return std::nullopt;
    return (r.completion - r.first_token) / static_cast<double>(r.output_tokens - 1);
}

double total_latency(const RequestRecord& r) {
    if (!r.completed()) throw MetricError("request " + std::to_string(r.request_id) + " is incomplete");
    return r.completion - r.arrival;
}

bool meets_ttft_slo(const RequestRecord& r, double slo_s) { return ttft(r) <= slo_s; }

double request_utilization(const RequestRecord& r) {
    const double total = total_latency(r);
    const double busy = (r.prefill_end - r.prefill_start) + (r.compress_end - r.compress_start) +
                        (r.completion - r.decode_start);
    if (total <= 0.0) return 1.0;
    return std::clamp(busy / total, 0.0, 1.0);
}

Throughput throughput(std::span<const RequestRecord> records) {
    double first = std::numeric_limits<double>::infinity();
    double last = -std::numeric_limits<double>::infinity();
    std::uint64_t tokens = 0, done = 0;
    for (const auto& r : records) {
        if (!r.completed()) continue;
        first = std::min(first, r.arrival);
        last = std::max(last, r.completion);
        tokens += r.output_tokens;
        ++done;
    }
    if (done == 0) throw MetricError("no completed requests");
    const double makespan = last - first;
    if (!(makespan > 0.0)) throw MetricError("makespan must be positive");
    return {static_cast<double>(tokens) / makespan, static_cast<double>(done) / makespan};
}

double utilization_ratio(std::span<const RequestRecord> records) {
    double sum = 0.0;
    std::uint64_t n = 0;
    for (const auto& r : records) {
        if (!r.completed()) continue;
        sum += request_utilization(r);
        ++n;
    }
    if (n == 0) throw MetricError("no completed requests");
    return sum / static_cast<double>(n);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

MemorySummary summarize_memory(std::span<const MemorySample> trace) {
    MemorySummary s;
    if (trace.empty()) return s;
    for (const auto& m : trace) s.peak_bytes = std::max(s.peak_bytes, m.peak_bytes);
    const double span = trace.back().time_s - trace.front().time_s;
    if (!(span > 0.0)) {
        s.avg_bytes = static_cast<double>(trace.back().current_bytes);
        return s;
    }
    double area = 0.0;
    for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
        area += static_cast<double>(trace[i].current_bytes) * (trace[i + 1].time_s - trace[i].time_s);
    }
    s.avg_bytes = area / span;
    return s;
}

Aggregates compute_aggregates(std::span<const RequestRecord> records, std::span<const MemorySample> memory,
                              bool allow_empty) {
    Aggregates a;
    a.requests_total = records.size();
    const auto mem = summarize_memory(memory);
    a.mem_avg_bytes = mem.avg_bytes;
    a.mem_peak_bytes = mem.peak_bytes;

    std::vector<double> ttfts;
    double tpot_sum = 0.0, latency_sum = 0.0, pq = 0.0, cq = 0.0, dq = 0.0, cstage = 0.0;
    std::uint64_t tpot_n = 0, slo_ok = 0, out_tokens = 0;
    for (const auto& r : records) {
        if (!r.completed()) continue;
        const double t = ttft(r);
        ttfts.push_back(t);
        if (auto p = tpot(r)) {
            tpot_sum += *p;
            ++tpot_n;
        }
        latency_sum += total_latency(r);
        pq += r.prefill_start - r.arrival;
        cq += r.compress_start - r.prefill_end;
        dq += r.decode_start - r.compress_end;
        cstage += r.compress_end - r.prefill_end;
        if (t <= kTtftSloSeconds) ++slo_ok;
        out_tokens += r.output_tokens;
    }
    a.requests_completed = ttfts.size();
    if (ttfts.empty()) {
        if (!allow_empty) throw MetricError("no completed requests");
        return a;
    }
    const double n = static_cast<double>(ttfts.size());
    double ttft_sum = 0.0;
    for (double t : ttfts) ttft_sum += t;
    a.ttft_mean_s = ttft_sum / n;
    a.ttft_p50_s = percentile(ttfts, 0.50);
    a.ttft_p95_s = percentile(ttfts, 0.95);
    a.ttft_p99_s = percentile(ttfts, 0.99);
    a.tpot_mean_s = tpot_n ? tpot_sum / static_cast<double>(tpot_n) : 0.0;
    a.latency_mean_s = latency_sum / n;
    a.normalized_latency_s = a.latency_mean_s / (static_cast<double>(out_tokens) / n);
    const auto tp = throughput(records);
    a.throughput_tokens_per_s = tp.tokens_per_s;
    a.throughput_req_per_s = tp.req_per_s;
    a.utilization_ratio = utilization_ratio(records);
    a.prefill_queue_mean_s = pq / n;
    a.compress_queue_mean_s = cq / n;
    a.decode_queue_mean_s = dq / n;
    a.compress_stage_mean_s = cstage / n;
    a.slo_attainment = static_cast<double>(slo_ok) / n;
    return a;
}

std::vector<std::string> summary_columns() {
    return {"config_hash",           "seed",
            "requests_total",        "requests_completed",
            "ttft_mean_s",           "ttft_p50_s",
            "ttft_p95_s",            "ttft_p99_s",
            "tpot_mean_s",           "latency_mean_s",
            "normalized_latency_s",  "throughput_tokens_per_s",
            "throughput_req_per_s",  "utilization_ratio",
            "prefill_queue_mean_s",  "compress_queue_mean_s",
            "decode_queue_mean_s",   "compress_stage_mean_s",
            "slo_attainment",        "mem_avg_bytes",
            "mem_peak_bytes"};
}

std::vector<std::string> summary_values(const MetricsReport& report) {
    const auto& a = report.aggregates;
    return {report.config_hash,
            std::to_string(report.seed),
            std::to_string(a.requests_total),
            std::to_string(a.requests_completed),
            fmt_double(a.ttft_mean_s),
            fmt_double(a.ttft_p50_s),
            fmt_double(a.ttft_p95_s),
            fmt_double(a.ttft_p99_s),
            fmt_double(a.tpot_mean_s),
            fmt_double(a.latency_mean_s),
            fmt_double(a.normalized_latency_s),
            fmt_double(a.throughput_tokens_per_s),
            fmt_double(a.throughput_req_per_s),
            fmt_double(a.utilization_ratio),
            fmt_double(a.prefill_queue_mean_s),
            fmt_double(a.compress_queue_mean_s),
            fmt_double(a.decode_queue_mean_s),
            fmt_double(a.compress_stage_mean_s),
            fmt_double(a.slo_attainment),
            fmt_double(a.mem_avg_bytes),
            std::to_string(a.mem_peak_bytes)};
}

namespace {

constexpr const char* kRequestsHeader =
    "request_id,arrival_s,prefill_start_s,prefill_end_s,compress_start_s,compress_end_s,first_token_s,"
    "completion_s,input_tokens,output_tokens,ttft_s,tpot_s,decode_start_s";

std::string opt_time(double v) { return v == v ? fmt_double(v) : std::string{}; }

double parse_time(std::string_view s, std::size_t line) {
    if (s.empty()) return kNotReached;
    double v = 0.0;
    if (!detail::parse_double(s, v)) throw ParseError(line, "bad number '" + std::string(s) + "'");
    return v;
}

std::vector<std::string_view> split_csv(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(',', start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace

void write_requests_csv(std::ostream& out, std::span<const RequestRecord> records) {
    out << kRequestsHeader << '\n';
    for (const auto& r : records) {
        std::string ttft_s, tpot_s;
        if (r.completed()) {
            ttft_s = fmt_double(ttft(r));
            if (auto p = tpot(r)) tpot_s = fmt_double(*p);
        }
        out << r.request_id << ',' << opt_time(r.arrival) << ',' << opt_time(r.prefill_start) << ','
            << opt_time(r.prefill_end) << ',' << opt_time(r.compress_start) << ',' << opt_time(r.compress_end) << ','
            << opt_time(r.first_token) << ',' << opt_time(r.completion) << ',' << r.input_tokens << ','
            << r.output_tokens << ',' << ttft_s << ',' << tpot_s << ',' << opt_time(r.decode_start) << '\n';
    }
}

void write_summary_csv(std::ostream& out, const MetricsReport& report) {
    const auto cols = summary_columns();
    const auto vals = summary_values(report);
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (std::size_t i = 0; i < vals.size(); ++i) out << (i ? "," : "") << vals[i];
    out << '\n';
}

void write_memory_csv(std::ostream& out, std::span<const MemorySample> trace) {
    out << "time_s,current_bytes,peak_bytes,live_handles\n";
    for (const auto& m : trace) {
        out << fmt_double(m.time_s) << ',' << m.current_bytes << ',' << m.peak_bytes << ',' << m.live_handles << '\n';
    }
}

std::vector<RequestRecord> read_requests_csv(std::istream& in) {
    std::vector<RequestRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) continue;
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 13) throw ParseError(lineno, "expected 13 columns");
        RequestRecord r;
        if (!detail::parse_u64(f[0], r.request_id)) throw ParseError(lineno, "bad request_id");
        r.arrival = parse_time(f[1], lineno);
        r.prefill_start = parse_time(f[2], lineno);
        r.prefill_end = parse_time(f[3], lineno);
        r.compress_start = parse_time(f[4], lineno);
        r.compress_end = parse_time(f[5], lineno);
        r.first_token = parse_time(f[6], lineno);
        r.completion = parse_time(f[7], lineno);
        if (!detail::parse_u64(f[8], r.input_tokens)) throw ParseError(lineno, "bad input_tokens");
        if (!detail::parse_u64(f[9], r.output_tokens)) throw ParseError(lineno, "bad output_tokens");
        r.decode_start = parse_time(f[12], lineno);
        out.push_back(r);
    }
    return out;
}

std::vector<MemorySample> read_memory_csv(std::istream& in) {
    std::vector<MemorySample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 || line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 4) throw ParseError(lineno, "expected 4 columns");
        MemorySample m;
        if (!detail::parse_double(f[0], m.time_s) || !detail::parse_u64(f[1], m.current_bytes) ||
            !detail::parse_u64(f[2], m.peak_bytes) || !detail::parse_u64(f[3], m.live_handles)) {
            throw ParseError(lineno, "bad memory sample");
        }
        out.push_back(m);
    }
    return out;
}

void export_csv(const MetricsReport& report, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
    auto open = [&](const char* name) {
        std::ofstream f(out_dir / name);
        if (!f) throw IoError("cannot write '" + (out_dir / name).string() + "'");
        return f;
    };
    {
        auto f = open("requests.csv");
        write_requests_csv(f, report.records);
    }
    {
        auto f = open("summary.csv");
        write_summary_csv(f, report);
    }
    {
        auto f = open("memory.csv");
        write_memory_csv(f, report.memory_trace);
    }
}

}  // namespace kvsim

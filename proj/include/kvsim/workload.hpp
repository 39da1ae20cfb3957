#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kvsim/mem_pool.hpp"

namespace kvsim {

struct RequestSpec {
    RequestId request_id = 0;
    double arrival_time = 0.0;
    std::uint64_t image_tokens = 0;
    std::uint64_t text_tokens = 0;
    std::uint64_t max_new_tokens = 1;

    std::uint64_t input_tokens() const { return image_tokens + text_tokens; }
    bool operator==(const RequestSpec&) const = default;
};

enum class CountDist { Fixed, Geometric, Poisson, LogNormal };

const char* to_string(CountDist d);
CountDist parse_count_dist(const std::string& s);

/// Distribution of a non-negative integer count. Draws below `min_value`
/// are raised to it.
struct CountSpec {
    CountDist kind = CountDist::Fixed;
    double mean = 1.0;
    double sigma = 0.5;  // lognormal shape
    std::uint64_t min_value = 0;
};

struct WorkloadProfile {
    std::string name = "custom";
    double rate_req_per_s = 1.0;
    double duration_s = 0.0;
    // Stop after this many requests; 0 means no cap.
    std::uint64_t max_requests = 0;
    std::uint64_t seed = 1;
    CountSpec images_per_request{CountDist::Fixed, 1.0, 0.5, 0};
    std::uint64_t tokens_per_image = 576;
    CountSpec text_tokens{CountDist::Geometric, 32.0, 0.5, 1};
    CountSpec output_tokens{CountDist::LogNormal, 64.0, 0.5, 1};

    void validate() const;
};

inline constexpr std::uint64_t kDefaultTokensPerImage = 576;
inline constexpr double kWordsToTokens = 1.3;

/// "gqa-like", "milebench-like" or "highload".
WorkloadProfile workload_preset(const std::string& name);

/// Poisson arrivals over [0, duration_s), capped at max_requests.
std::vector<RequestSpec> generate(const WorkloadProfile& profile);

/// Trace lines: arrival_s,image_tokens,text_tokens,max_new_tokens. An
/// optional header and '#' comment lines are skipped.
std::vector<RequestSpec> parse_trace(std::istream& in);
std::vector<RequestSpec> load_trace(const std::filesystem::path& path);
void write_trace(std::ostream& out, const std::vector<RequestSpec>& requests);
void save_trace(const std::filesystem::path& path, const std::vector<RequestSpec>& requests);

}  // namespace kvsim

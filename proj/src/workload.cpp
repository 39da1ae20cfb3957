#include "kvsim/workload.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "format_util.hpp"
#include "kvsim/errors.hpp"

namespace kvsim {

const char* to_string(CountDist d) {
    switch (d) {
    case CountDist::Fixed: return "fixed";
    case CountDist::Geometric: return "geometric";
    case CountDist::Poisson: return "poisson";
    case CountDist::LogNormal: return "lognormal";
    }
    return "?";
}

CountDist parse_count_dist(const std::string& s) {
    if (s == "fixed") return CountDist::Fixed;
    if (s == "geometric") return CountDist::Geometric;
    if (s == "poisson") return CountDist::Poisson;
    if (s == "lognormal") return CountDist::LogNormal;
    throw ConfigError("unknown count distribution '" + s + "'");
}

void WorkloadProfile::validate() const {
    if (!(rate_req_per_s > 0.0)) throw ConfigError("workload rate must be > 0");
    if (!(duration_s >= 0.0)) throw ConfigError("workload duration must be >= 0");
    for (const CountSpec* c : {&images_per_request, &text_tokens, &output_tokens}) {
        if (!(c->mean > 0.0)) throw ConfigError("workload distribution means must be > 0");
        if (c->kind == CountDist::LogNormal && !(c->sigma >= 0.0)) throw ConfigError("lognormal sigma must be >= 0");
    }
    if (output_tokens.min_value < 1) throw ConfigError("output tokens minimum must be >= 1");
}

WorkloadProfile workload_preset(const std::string& name) {
    WorkloadProfile p;
    p.name = name;
    if (name == "gqa-like") {
        p.rate_req_per_s = 4.0;
        p.duration_s = 500.0;
        p.images_per_request = {CountDist::Fixed, 1.0, 0.0, 1};
        p.text_tokens = {CountDist::Geometric, 32.0, 0.0, 1};
        p.output_tokens = {CountDist::LogNormal, 64.0, 0.5, 1};
    } else if (name == "milebench-like") {
        p.rate_req_per_s = 6.0;
        p.duration_s = 500.0;
        p.images_per_request = {CountDist::Poisson, 15.2, 0.0, 0};
        p.text_tokens = {CountDist::LogNormal, 422.3 * kWordsToTokens, 0.5, 1};
        p.output_tokens = {CountDist::LogNormal, 64.0, 0.5, 1};
    } else if (name == "highload") {
        p = workload_preset("gqa-like");
        p.name = name;
        p.rate_req_per_s = 20.0;
        p.duration_s = 100.0;
    } else {
        throw ConfigError("unknown workload preset '" + name + "'");
    }
    return p;
}

namespace {

std::uint64_t draw(const CountSpec& spec, std::mt19937_64& rng) {
    double v = 0.0;
    switch (spec.kind) {
    case CountDist::Fixed: v = std::round(spec.mean); break;
    case CountDist::Geometric: {
        // Support {1, 2, ...} with the requested mean.
        if (spec.mean <= 1.0) {
            v = 1.0;
        } else {
            std::geometric_distribution<std::uint64_t> g(1.0 / spec.mean);
            v = static_cast<double>(g(rng)) + 1.0;
        }
        break;
    }
    case CountDist::Poisson: {
        std::poisson_distribution<std::uint64_t> pd(spec.mean);
        v = static_cast<double>(pd(rng));
        break;
    }
    case CountDist::LogNormal: {
        const double mu = std::log(spec.mean) - 0.5 * spec.sigma * spec.sigma;
        std::lognormal_distribution<double> ln(mu, spec.sigma);
        v = std::round(ln(rng));
        break;
    }
    }
    auto n = static_cast<std::uint64_t>(std::max(v, 0.0));
    return std::max(n, spec.min_value);
}

}  // namespace

std::vector<RequestSpec> generate(const WorkloadProfile& profile) {
    profile.validate();
    std::vector<RequestSpec> out;
    // Separate streams so changing a token distribution leaves arrivals alone.
    std::mt19937_64 arrivals(profile.seed);
    std::mt19937_64 sizes(profile.seed ^ 0x9e3779b97f4a7c15ULL);
    std::exponential_distribution<double> gap(profile.rate_req_per_s);
    double t = gap(arrivals);
    while (t < profile.duration_s && (profile.max_requests == 0 || out.size() < profile.max_requests)) {
        RequestSpec r;
        r.request_id = out.size();
        r.arrival_time = t;
        r.image_tokens = draw(profile.images_per_request, sizes) * profile.tokens_per_image;
        r.text_tokens = draw(profile.text_tokens, sizes);
        if (r.image_tokens + r.text_tokens == 0) r.text_tokens = 1;
        r.max_new_tokens = draw(profile.output_tokens, sizes);
        out.push_back(r);
        t += gap(arrivals);
    }
    return out;
}

std::vector<RequestSpec> parse_trace(std::istream& in) {
    std::vector<RequestSpec> out;
    std::string line;
    std::size_t lineno = 0;
    double last_arrival = 0.0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string_view v = line;
        while (!v.empty() && (v.front() == ' ' || v.front() == '\t')) v.remove_prefix(1);
        if (v.empty() || v.front() == '#') continue;
        if (out.empty() && v.rfind("arrival", 0) == 0) continue;

        std::string_view fields[4];
        std::size_t n = 0, start = 0;
        while (true) {
            std::size_t pos = v.find(',', start);
            if (n == 4) throw ParseError(lineno, "expected 4 fields");
            fields[n++] = v.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
            if (pos == std::string_view::npos) break;
            start = pos + 1;
        }
        if (n != 4) throw ParseError(lineno, "expected 4 fields");

        RequestSpec r;
        r.request_id = out.size();
        if (!detail::parse_double(fields[0], r.arrival_time) || !std::isfinite(r.arrival_time) || r.arrival_time < 0.0) {
            throw ParseError(lineno, "bad arrival time '" + std::string(fields[0]) + "'");
        }
        if (!detail::parse_u64(fields[1], r.image_tokens)) throw ParseError(lineno, "bad image_tokens");
        if (!detail::parse_u64(fields[2], r.text_tokens)) throw ParseError(lineno, "bad text_tokens");
        if (!detail::parse_u64(fields[3], r.max_new_tokens)) throw ParseError(lineno, "bad max_new_tokens");
        if (r.image_tokens + r.text_tokens == 0) throw ParseError(lineno, "request has no input tokens");
        if (r.max_new_tokens == 0) throw ParseError(lineno, "max_new_tokens must be >= 1");
        if (!out.empty() && r.arrival_time < last_arrival) throw OrderViolation(lineno);
        last_arrival = r.arrival_time;
        out.push_back(r);
    }
    return out;
}

std::vector<RequestSpec> load_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trace '" + path.string() + "'");
    return parse_trace(in);
}

void write_trace(std::ostream& out, const std::vector<RequestSpec>& requests) {
    out << "arrival_s,image_tokens,text_tokens,max_new_tokens\n";
    for (const auto& r : requests) {
        out << detail::fmt_double(r.arrival_time) << ',' << r.image_tokens << ',' << r.text_tokens << ','
            << r.max_new_tokens << '\n';
    }
}

void save_trace(const std::filesystem::path& path, const std::vector<RequestSpec>& requests) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write trace '" + path.string() + "'");
    write_trace(out, requests);
    if (!out) throw IoError("failed writing trace '" + path.string() + "'");
}

}  // namespace kvsim

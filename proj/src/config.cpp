#include "kvsim/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "format_util.hpp"
#include "kvsim/errors.hpp"

namespace kvsim {

namespace {

std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    if (!detail::parse_double(v, out) || !std::isfinite(out)) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    if (!detail::parse_u64(v, out)) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

std::uint32_t to_u32(const std::string& key, const std::string& v) {
    const auto x = to_u64(key, v);
    if (x > std::numeric_limits<std::uint32_t>::max()) throw ConfigError(key + ": value too large");
    return static_cast<std::uint32_t>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

MapKind to_map_kind(const std::string& v) {
    if (v == "mean" || v == "meanpool") return MapKind::MeanPool;
    if (v == "seeded-linear" || v == "linear") return MapKind::SeededLinear;
    throw ConfigError("compressor.map: expected mean|seeded-linear, got '" + v + "'");
}

const char* map_kind_name(MapKind m) { return m == MapKind::MeanPool ? "mean" : "seeded-linear"; }

void apply_count(CountSpec& c, const std::string& field, const std::string& key, const std::string& v) {
    if (field == "dist") {
        c.kind = parse_count_dist(v);
    } else if (field == "mean") {
        c.mean = to_double(key, v);
    } else if (field == "sigma") {
        c.sigma = to_double(key, v);
    } else if (field == "min") {
        c.min_value = to_u64(key, v);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

std::string fmt(double v) { return detail::fmt_double(v); }

}  // namespace

KeyValues parse_key_values(std::istream& in) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ParseError(lineno, "expected key=value");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        if (key.empty()) throw ParseError(lineno, "empty key");
        kv[key] = trim(std::string_view(t).substr(eq + 1));
    }
    return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    return parse_key_values(in);
}

void merge_into(KeyValues& base, const KeyValues& overrides) {
    for (const auto& [k, v] : overrides) base[k] = v;
}

ExperimentConfig resolve_config(const KeyValues& kv) {
    ExperimentConfig cfg;
    auto get = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        return it->second;
    };

    // Presets first; individual keys below refine them.
    cfg.workload = workload_preset(get("workload.preset").value_or("gqa-like"));
    cfg.sim.model = model_preset(get("model.preset").value_or("llava-1.5-7b"));
    cfg.cost_preset = get("cost.preset").value_or("h100-llava7b-default");
    cfg.sim.cost = cost_preset(cfg.cost_preset);

    std::set<std::string> handled{"workload.preset", "model.preset", "cost.preset"};
    auto take = [&](const std::string& key, const std::function<void(const std::string&)>& apply) {
        if (auto v = get(key)) {
            apply(*v);
        }
        handled.insert(key);
    };

    take("workload.rate", [&](auto& v) { cfg.workload.rate_req_per_s = to_double("workload.rate", v); });
    take("workload.duration_s", [&](auto& v) { cfg.workload.duration_s = to_double("workload.duration_s", v); });
    take("workload.requests", [&](auto& v) {
        cfg.workload.max_requests = to_u64("workload.requests", v);
        // A request count without an explicit horizon means "run until N arrivals".
        if (!get("workload.duration_s")) cfg.workload.duration_s = std::numeric_limits<double>::max();
    });
    take("workload.tokens_per_image", [&](auto& v) { cfg.workload.tokens_per_image = to_u64("workload.tokens_per_image", v); });
    take("workload.trace", [&](auto& v) { cfg.trace_path = v; });

    take("model.num_layers", [&](auto& v) { cfg.sim.model.num_layers = to_u32("model.num_layers", v); });
    take("model.num_kv_heads", [&](auto& v) { cfg.sim.model.num_kv_heads = to_u32("model.num_kv_heads", v); });
    take("model.head_dim", [&](auto& v) { cfg.sim.model.head_dim = to_u32("model.head_dim", v); });
    take("model.bytes_per_element", [&](auto& v) { cfg.sim.model.bytes_per_element = to_u32("model.bytes_per_element", v); });

    take("compressor.factor_k", [&](auto& v) { cfg.sim.compressor.factor_k = to_u32("compressor.factor_k", v); });
    take("compressor.map", [&](auto& v) { cfg.sim.compressor.map_kind = to_map_kind(v); });
    take("compressor.seed", [&](auto& v) { cfg.sim.compressor.seed = to_u64("compressor.seed", v); });

    auto& c = cfg.sim.cost;
    take("cost.compress_mode", [&](auto& v) { c.compress_mode = parse_compress_mode(v); });
    const std::pair<const char*, double*> coefs[] = {
        {"cost.prefill_base_s", &c.prefill_base_s},
        {"cost.prefill_per_token_s", &c.prefill_per_token_s},
        {"cost.compress_base_s", &c.compress_base_s},
        {"cost.compress_per_token_s", &c.compress_per_token_s},
        {"cost.compress_attention_scale_s", &c.compress_attention_scale_s},
        {"cost.decode_step_base_s", &c.decode_step_base_s},
        {"cost.decode_step_per_seq_s", &c.decode_step_per_seq_s},
        {"cost.decode_step_per_ctx_token_s", &c.decode_step_per_ctx_token_s},
    };
    for (const auto& [key, field] : coefs) {
        take(key, [&, k = std::string(key), f = field](auto& v) { *f = to_double(k, v); });
    }

    take("scheduler.policy", [&](auto& v) { cfg.policy_text = v; });
    cfg.sim.policy = parse_policy(cfg.policy_text);
    cfg.policy_text = to_string(cfg.sim.policy);

    take("pool.capacity_gb", [&](auto& v) {
        const double gb = to_double("pool.capacity_gb", v);
        if (!(gb > 0.0)) throw ConfigError("pool.capacity_gb must be > 0");
        cfg.sim.capacity_bytes = static_cast<std::uint64_t>(std::llround(gb * static_cast<double>(kGB)));
    });
    take("pool.capacity_bytes", [&](auto& v) { cfg.sim.capacity_bytes = to_u64("pool.capacity_bytes", v); });
    take("pool.mode", [&](auto& v) { cfg.sim.pool_mode = parse_pool_mode(v); });
    take("engine.coupled", [&](auto& v) { cfg.sim.coupled = to_bool("engine.coupled", v); });
    take("engine.max_events", [&](auto& v) { cfg.sim.max_events = to_u64("engine.max_events", v); });
    take("seed", [&](auto& v) { cfg.sim.seed = to_u64("seed", v); });
    take("out", [&](auto& v) { cfg.out_dir = v; });

    for (const auto& [key, value] : kv) {
        if (handled.count(key)) continue;
        bool ok = false;
        for (const char* prefix : {"workload.images.", "workload.text.", "workload.output."}) {
            const std::string p = prefix;
            if (key.rfind(p, 0) == 0) {
                CountSpec& spec = p == "workload.images." ? cfg.workload.images_per_request
                                  : p == "workload.text." ? cfg.workload.text_tokens
                                                          : cfg.workload.output_tokens;
                apply_count(spec, key.substr(p.size()), key, value);
                ok = true;
            }
        }
        if (!ok) throw ConfigError("unknown config key '" + key + "'");
    }

    cfg.workload.seed = cfg.sim.seed;
    if (!cfg.trace_path) cfg.workload.validate();
    cfg.sim.validate();
    cfg.sim.config_hash = cfg.hash();
    return cfg;
}

std::string ExperimentConfig::canonical() const {
    KeyValues kv;
    if (trace_path) {
        kv["workload.trace"] = trace_path->string();
    } else {
        kv["workload.preset"] = workload.name;
        kv["workload.rate"] = fmt(workload.rate_req_per_s);
        kv["workload.duration_s"] = fmt(workload.duration_s);
        kv["workload.requests"] = std::to_string(workload.max_requests);
        kv["workload.tokens_per_image"] = std::to_string(workload.tokens_per_image);
        const std::pair<const char*, const CountSpec*> counts[] = {
            {"workload.images.", &workload.images_per_request},
            {"workload.text.", &workload.text_tokens},
            {"workload.output.", &workload.output_tokens},
        };
        for (const auto& [p, spec] : counts) {
            const std::string prefix = p;
            kv[prefix + "dist"] = to_string(spec->kind);
            kv[prefix + "mean"] = fmt(spec->mean);
            kv[prefix + "sigma"] = fmt(spec->sigma);
            kv[prefix + "min"] = std::to_string(spec->min_value);
        }
    }
    const auto& m = sim.model;
    kv["model.preset"] = m.name;
    kv["model.num_layers"] = std::to_string(m.num_layers);
    kv["model.num_kv_heads"] = std::to_string(m.num_kv_heads);
    kv["model.head_dim"] = std::to_string(m.head_dim);
    kv["model.bytes_per_element"] = std::to_string(m.bytes_per_element);
    kv["compressor.factor_k"] = std::to_string(sim.compressor.factor_k);
    kv["compressor.map"] = map_kind_name(sim.compressor.map_kind);
    kv["compressor.seed"] = std::to_string(sim.compressor.seed);
    const auto& c = sim.cost;
    kv["cost.preset"] = cost_preset;
    kv["cost.compress_mode"] = to_string(c.compress_mode);
    kv["cost.prefill_base_s"] = fmt(c.prefill_base_s);
    kv["cost.prefill_per_token_s"] = fmt(c.prefill_per_token_s);
    kv["cost.compress_base_s"] = fmt(c.compress_base_s);
    kv["cost.compress_per_token_s"] = fmt(c.compress_per_token_s);
    kv["cost.compress_attention_scale_s"] = fmt(c.compress_attention_scale_s);
    kv["cost.decode_step_base_s"] = fmt(c.decode_step_base_s);
    kv["cost.decode_step_per_seq_s"] = fmt(c.decode_step_per_seq_s);
    kv["cost.decode_step_per_ctx_token_s"] = fmt(c.decode_step_per_ctx_token_s);
    kv["scheduler.policy"] = to_string(sim.policy);
    kv["pool.capacity_bytes"] = std::to_string(sim.capacity_bytes);
    kv["pool.mode"] = to_string(sim.pool_mode);
    kv["engine.coupled"] = sim.coupled ? "true" : "false";
    kv["engine.max_events"] = std::to_string(sim.max_events);
    kv["seed"] = std::to_string(sim.seed);

    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
    return os.str();
}

std::string ExperimentConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::vector<RequestSpec> build_workload(const ExperimentConfig& cfg) {
    if (cfg.trace_path) return load_trace(*cfg.trace_path);
    return generate(cfg.workload);
}

SimResult run_experiment(const ExperimentConfig& cfg, bool check_invariants) {
    SimConfig sim = cfg.sim;
    sim.check_invariants = check_invariants;
    return run(sim, build_workload(cfg));
}

}  // namespace kvsim

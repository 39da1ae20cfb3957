#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>

#include "kvsim/engine.hpp"

namespace kvsim {

/// Flat dotted-key settings, e.g. "cost.prefill_base_s" -> "0.02".
using KeyValues = std::map<std::string, std::string>;

inline constexpr const char* kDefaultDynamicPolicy = "dynamic:bmin=4,bmax=16,wmax_ms=200";

/// Blank lines and '#' comments are ignored; keys are validated later.
KeyValues parse_key_values(std::istream& in);
KeyValues load_key_values(const std::filesystem::path& path);

/// Later layers win, so flags passed after the file override its keys.
void merge_into(KeyValues& base, const KeyValues& overrides);

struct ExperimentConfig {
    WorkloadProfile workload = workload_preset("gqa-like");
    std::optional<std::filesystem::path> trace_path;
    SimConfig sim;
    std::string policy_text = kDefaultDynamicPolicy;
    std::string cost_preset = "h100-llava7b-default";
    std::filesystem::path out_dir = "out";

    /// Canonical key=value listing of every resolved setting (sorted).
    std::string canonical() const;
    /// FNV-1a 64 of canonical(), 16 hex digits.
    std::string hash() const;
};

/// Builds a config from presets plus explicit keys. Throws ConfigError on
/// unknown keys, bad values or missing presets.
ExperimentConfig resolve_config(const KeyValues& kv);

/// Workload for the experiment: the trace if one is set, else generated.
std::vector<RequestSpec> build_workload(const ExperimentConfig& cfg);

SimResult run_experiment(const ExperimentConfig& cfg, bool check_invariants = false);

}  // namespace kvsim

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "kvsim/config.hpp"

namespace kvsim {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

struct SweepPoint {
    double rate = 0.0;
    std::string policy;
    std::uint32_t rep = 0;
    MetricsReport report;
};

/// Every (rate, policy, rep) combination, in that nesting order. Points run
/// independently on up to `jobs` threads; results keep the nesting order.
std::vector<SweepPoint> run_sweep(const KeyValues& base, const std::vector<double>& rates,
                                  const std::vector<std::string>& policies, std::uint32_t reps, unsigned jobs,
                                  bool write_point_artifacts);

void write_sweep_csv(std::ostream& out, const std::vector<SweepPoint>& points);

struct PoolAblation {
    MetricsReport pooled;
    MetricsReport legacy;
    double avg_ratio() const;
};

PoolAblation ablate_pool(const KeyValues& base);

struct BatchingRow {
    std::string policy;
    MetricsReport report;
};

struct BatchingAblation {
    BatchingRow dynamic;
    std::vector<BatchingRow> statics;
    std::size_t best_static = 0;  // lowest mean TTFT
};

inline const std::vector<std::string> kStaticBaselines{"static:p1c1d8", "static:p2c2d8", "static:p3c3d6",
                                                       "static:p4c4d8"};

BatchingAblation ablate_batching(const KeyValues& base);

/// Entry point for the kvsim tool; returns the process exit code.
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace kvsim

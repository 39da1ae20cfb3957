#include "kvsim/cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "format_util.hpp"
#include "kvsim/errors.hpp"

namespace kvsim {

using detail::fmt_double;

namespace {

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

void write_config_file(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    std::ofstream f(dir / "config.resolved");
    if (!f) throw IoError("cannot write '" + (dir / "config.resolved").string() + "'");
    f << "# config_hash=" << cfg.hash() << '\n' << cfg.canonical();
}

void write_artifacts(const ExperimentConfig& cfg, const MetricsReport& report, const std::filesystem::path& dir) {
    export_csv(report, dir);
    write_config_file(cfg, dir);
}

void print_summary(std::ostream& out, const ExperimentConfig& cfg, const SimResult& res) {
    const auto& a = res.report.aggregates;
    out << "policy              " << cfg.policy_text << '\n'
        << "config hash         " << cfg.hash() << "  seed " << cfg.sim.seed << '\n'
        << "requests            " << a.requests_completed << " / " << a.requests_total << " completed"
        << (res.diverged ? "  (event cap hit, run diverged)" : "") << '\n'
        << "ttft mean/p50/p99   " << a.ttft_mean_s << " / " << a.ttft_p50_s << " / " << a.ttft_p99_s << " s\n"
        << "tpot mean           " << a.tpot_mean_s << " s/token\n"
        << "throughput          " << a.throughput_tokens_per_s << " tokens/s, " << a.throughput_req_per_s
        << " req/s\n"
        << "utilization ratio   " << a.utilization_ratio << '\n'
        << "queue p/c/d mean    " << a.prefill_queue_mean_s << " / " << a.compress_queue_mean_s << " / "
        << a.decode_queue_mean_s << " s\n"
        << "ttft <= 2 s         " << a.slo_attainment * 100.0 << " %\n"
        << "kv memory avg/peak  " << a.mem_avg_bytes / 1e9 << " / " << static_cast<double>(a.mem_peak_bytes) / 1e9
        << " GB\n";
}

std::vector<double> parse_rates(const std::string& text) {
    std::vector<double> rates;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        double r = 0.0;
        if (!detail::parse_double(item, r) || !(r > 0.0)) throw ConfigError("bad rate '" + item + "'");
        rates.push_back(r);
    }
    return rates;
}

// Flags shared by every subcommand, mapped onto config keys.
struct CommonFlags {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> keyed;
    std::vector<std::string> sets;

    std::optional<std::string> scheduler, rate, duration, seed, out, cost_preset, pool_mode, capacity, compress_mode,
        compress_factor, requests, workload, trace;
    bool coupled = false;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "Config file (key=value lines)");
        app->add_option("--scheduler", scheduler, "fcfs | static:pXcYdZ | dynamic:bmin=A,bmax=B,wmax_ms=C");
        app->add_option("--rate", rate, "Arrival rate, requests per second");
        app->add_option("--duration", duration, "Workload horizon in seconds");
        app->add_option("--requests", requests, "Cap on generated requests");
        app->add_option("--seed", seed, "Workload seed");
        app->add_option("--out", out, "Output directory (gen-trace: output file)");
        app->add_option("--workload", workload, "gqa-like | milebench-like | highload");
        app->add_option("--trace", trace, "Replay a trace file instead of generating");
        app->add_option("--cost-preset", cost_preset, "Cost model preset");
        app->add_option("--pool-mode", pool_mode, "pooled | legacy");
        app->add_option("--capacity-gb", capacity, "KV pool capacity in GB");
        app->add_option("--compress-mode", compress_mode, "linear | attention");
        app->add_option("--compress-factor", compress_factor, "Compression factor k");
        app->add_flag("--coupled", coupled, "Serialize prefill and decode on one executor");
        app->add_option("--set", sets, "Extra key=value override (repeatable)");
    }

    KeyValues resolve_keys() const {
        KeyValues kv;
        if (!config_path.empty()) kv = load_key_values(config_path);
        KeyValues flags;
        const std::pair<const std::optional<std::string>*, const char*> map[] = {
            {&scheduler, "scheduler.policy"},   {&rate, "workload.rate"},
            {&duration, "workload.duration_s"}, {&requests, "workload.requests"},
            {&seed, "seed"},                    {&out, "out"},
            {&workload, "workload.preset"},     {&trace, "workload.trace"},
            {&cost_preset, "cost.preset"},      {&pool_mode, "pool.mode"},
            {&capacity, "pool.capacity_gb"},    {&compress_mode, "cost.compress_mode"},
            {&compress_factor, "compressor.factor_k"},
        };
        for (const auto& [opt, key] : map) {
            if (*opt) flags[key] = **opt;
        }
        if (coupled) flags["engine.coupled"] = "true";
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            flags[s.substr(0, eq)] = s.substr(eq + 1);
        }
        merge_into(kv, flags);
        return kv;
    }
};

}  // namespace

std::vector<SweepPoint> run_sweep(const KeyValues& base, const std::vector<double>& rates,
                                  const std::vector<std::string>& policies, std::uint32_t reps, unsigned jobs,
                                  bool write_point_artifacts) {
    if (rates.empty()) throw ConfigError("sweep needs at least one rate");
    if (policies.empty()) throw ConfigError("sweep needs at least one policy");
    if (reps < 1) throw ConfigError("sweep needs reps >= 1");

    const ExperimentConfig base_cfg = resolve_config(base);
    std::vector<SweepPoint> points;
    std::vector<ExperimentConfig> configs;
    for (double rate : rates) {
        for (const auto& policy : policies) {
            for (std::uint32_t rep = 0; rep < reps; ++rep) {
                KeyValues kv = base;
                kv["workload.rate"] = fmt_double(rate);
                kv["scheduler.policy"] = policy;
                kv["seed"] = std::to_string(base_cfg.sim.seed + rep);
                configs.push_back(resolve_config(kv));
                points.push_back(SweepPoint{rate, configs.back().policy_text, rep, {}});
            }
        }
    }

    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= points.size()) return;
            try {
                points[i].report = run_experiment(configs[i]).report;
                if (write_point_artifacts) {
                    write_artifacts(configs[i], points[i].report, base_cfg.out_dir / "points" / std::to_string(i));
                }
            } catch (...) {
                std::lock_guard lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    const unsigned n = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(points.size())));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return points;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepPoint>& points) {
    out << "rate,policy,rep";
    for (const auto& c : summary_columns()) out << ',' << c;
    out << '\n';
    for (const auto& p : points) {
        out << fmt_double(p.rate) << ',' << csv_quote(p.policy) << ',' << p.rep;
        for (const auto& v : summary_values(p.report)) out << ',' << v;
        out << '\n';
    }
}

double PoolAblation::avg_ratio() const {
    return pooled.aggregates.mem_avg_bytes / legacy.aggregates.mem_avg_bytes;
}

PoolAblation ablate_pool(const KeyValues& base) {
    if (base.count("pool.mode")) throw ConfigError("pool ablation runs both pool modes; drop --pool-mode");
    PoolAblation out;
    KeyValues kv = base;
    kv["pool.mode"] = "pooled";
    out.pooled = run_experiment(resolve_config(kv)).report;
    kv["pool.mode"] = "legacy";
    out.legacy = run_experiment(resolve_config(kv)).report;
    return out;
}

BatchingAblation ablate_batching(const KeyValues& base) {
    BatchingAblation out;
    KeyValues kv = base;
    const ExperimentConfig base_cfg = resolve_config(base);
    if (!std::holds_alternative<DynamicPolicy>(base_cfg.sim.policy)) kv["scheduler.policy"] = kDefaultDynamicPolicy;
    {
        auto cfg = resolve_config(kv);
        out.dynamic = {cfg.policy_text, run_experiment(cfg).report};
    }
    for (const auto& p : kStaticBaselines) {
        kv["scheduler.policy"] = p;
        auto cfg = resolve_config(kv);
        out.statics.push_back({cfg.policy_text, run_experiment(cfg).report});
    }
    for (std::size_t i = 1; i < out.statics.size(); ++i) {
        if (out.statics[i].report.aggregates.ttft_mean_s < out.statics[out.best_static].report.aggregates.ttft_mean_s) {
            out.best_static = i;
        }
    }
    return out;
}

namespace {

int cmd_run(const CommonFlags& flags, std::ostream& out) {
    const auto cfg = resolve_config(flags.resolve_keys());
    const auto res = run_experiment(cfg);
    write_artifacts(cfg, res.report, cfg.out_dir);
    print_summary(out, cfg, res);
    out << "artifacts           " << cfg.out_dir.string() << '\n';
    return kExitOk;
}

int cmd_sweep(const CommonFlags& flags, const std::string& rates_text, std::vector<std::string> policies,
              std::uint32_t reps, unsigned jobs, std::ostream& out) {
    const KeyValues kv = flags.resolve_keys();
    const auto cfg = resolve_config(kv);
    if (policies.empty()) policies.push_back(cfg.policy_text);
    const auto rates = parse_rates(rates_text);
    const auto points = run_sweep(kv, rates, policies, reps, jobs, true);
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream f(cfg.out_dir / "sweep.csv");
    if (!f) throw IoError("cannot write sweep.csv");
    write_sweep_csv(f, points);
    out << "rate  policy                                        ttft_mean_s  tokens/s   util\n";
    for (const auto& p : points) {
        const auto& a = p.report.aggregates;
        out << p.rate << "  " << p.policy << "  " << a.ttft_mean_s << "  " << a.throughput_tokens_per_s << "  "
            << a.utilization_ratio << '\n';
    }
    out << points.size() << " points -> " << (cfg.out_dir / "sweep.csv").string() << '\n';
    return kExitOk;
}

int cmd_ablate(const CommonFlags& flags, const std::string& which, std::ostream& out) {
    if (which != "pool" && which != "batching") throw ConfigError("--which must be pool or batching");
    const KeyValues kv = flags.resolve_keys();
    const auto cfg = resolve_config(kv);
    if (which == "pool" && kv.count("pool.mode")) {
        throw ConfigError("pool ablation runs both pool modes; drop --pool-mode");
    }
    std::filesystem::create_directories(cfg.out_dir);
    if (which == "pool") {
        const auto ab = ablate_pool(kv);
        std::ofstream f(cfg.out_dir / "ablation_pool.csv");
        if (!f) throw IoError("cannot write ablation_pool.csv");
        f << "mode,mem_avg_bytes,mem_peak_bytes,ttft_mean_s,throughput_tokens_per_s\n";
        for (const auto& [name, rep] : {std::pair{"pooled", &ab.pooled}, std::pair{"legacy", &ab.legacy}}) {
            const auto& a = rep->aggregates;
            f << name << ',' << fmt_double(a.mem_avg_bytes) << ',' << a.mem_peak_bytes << ','
              << fmt_double(a.ttft_mean_s) << ',' << fmt_double(a.throughput_tokens_per_s) << '\n';
        }
        std::ofstream mf(cfg.out_dir / "memory_pooled.csv");
        write_memory_csv(mf, ab.pooled.memory_trace);
        std::ofstream lf(cfg.out_dir / "memory_legacy.csv");
        write_memory_csv(lf, ab.legacy.memory_trace);
        const auto& p = ab.pooled.aggregates;
        const auto& l = ab.legacy.aggregates;
        out << "pooled  avg " << p.mem_avg_bytes / 1e9 << " GB  peak " << static_cast<double>(p.mem_peak_bytes) / 1e9
            << " GB\n"
            << "legacy  avg " << l.mem_avg_bytes / 1e9 << " GB  peak " << static_cast<double>(l.mem_peak_bytes) / 1e9
            << " GB\n"
            << "avg ratio pooled/legacy " << ab.avg_ratio() << "  peak delta "
            << (static_cast<double>(l.mem_peak_bytes) - static_cast<double>(p.mem_peak_bytes)) / 1e9 << " GB\n";
    } else {
        const auto ab = ablate_batching(kv);
        std::ofstream f(cfg.out_dir / "ablation_batching.csv");
        if (!f) throw IoError("cannot write ablation_batching.csv");
        f << "policy,ttft_mean_s,throughput_tokens_per_s,ttft_ratio_vs_dynamic,throughput_ratio_vs_dynamic,best_static\n";
        const auto& d = ab.dynamic.report.aggregates;
        auto row = [&](const BatchingRow& r, bool best) {
            const auto& a = r.report.aggregates;
            f << csv_quote(r.policy) << ',' << fmt_double(a.ttft_mean_s) << ',' << fmt_double(a.throughput_tokens_per_s)
              << ',' << fmt_double(a.ttft_mean_s / d.ttft_mean_s) << ','
              << fmt_double(a.throughput_tokens_per_s / d.throughput_tokens_per_s) << ',' << (best ? 1 : 0) << '\n';
            out << r.policy << "  ttft " << a.ttft_mean_s << " s (" << a.ttft_mean_s / d.ttft_mean_s
                << "x dynamic)  throughput " << a.throughput_tokens_per_s << " tok/s ("
                << a.throughput_tokens_per_s / d.throughput_tokens_per_s << "x dynamic)" << (best ? "  <- best static" : "")
                << '\n';
        };
        row(ab.dynamic, false);
        for (std::size_t i = 0; i < ab.statics.size(); ++i) row(ab.statics[i], i == ab.best_static);
    }
    return kExitOk;
}

int cmd_gen_trace(const CommonFlags& flags, std::ostream& out) {
    KeyValues kv = flags.resolve_keys();
    const bool to_file = kv.count("out") > 0;
    const auto cfg = resolve_config(kv);
    if (cfg.trace_path) throw ConfigError("gen-trace generates a workload; drop --trace");
    const auto requests = generate(cfg.workload);
    if (to_file) {
        save_trace(cfg.out_dir, requests);
        out << requests.size() << " requests -> " << cfg.out_dir.string() << '\n';
    } else {
        write_trace(out, requests);
    }
    return kExitOk;
}

}  // namespace

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Discrete-event simulator for KV-cache-compressing multimodal LLM serving"};
    app.require_subcommand(1);

    CommonFlags run_flags, sweep_flags, ablate_flags, trace_flags;
    auto* run = app.add_subcommand("run", "Run one simulation and export CSV artifacts");
    run_flags.attach(run);

    auto* sweep = app.add_subcommand("sweep", "Run a rate x policy grid and write sweep.csv");
    sweep_flags.attach(sweep);
    std::string rates = "1,2,3,4,5,6,7,8,9,10";
    std::vector<std::string> policies;
    std::uint32_t reps = 1;
    unsigned jobs = 1;
    sweep->add_option("--rates", rates, "Comma-separated arrival rates");
    sweep->add_option("--policy", policies, "Scheduler policy (repeatable)");
    sweep->add_option("--reps", reps, "Repetitions per point (seed, seed+1, ...)");
    sweep->add_option("--jobs", jobs, "Parallel worker threads");

    auto* ablate = app.add_subcommand("ablate", "Paired runs isolating the memory pool or dynamic batching");
    ablate_flags.attach(ablate);
    std::string which;
    ablate->add_option("--which", which, "pool | batching")->required();

    auto* gen = app.add_subcommand("gen-trace", "Write a generated workload as a trace file");
    trace_flags.attach(gen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (run->parsed()) return cmd_run(run_flags, out);
        if (sweep->parsed()) return cmd_sweep(sweep_flags, rates, policies, reps, jobs, out);
        if (ablate->parsed()) return cmd_ablate(ablate_flags, which, out);
        if (gen->parsed()) return cmd_gen_trace(trace_flags, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const OrderViolation& e) {
        err << "trace error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace kvsim

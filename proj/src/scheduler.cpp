#include "kvsim/scheduler.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kvsim/errors.hpp"

namespace kvsim {

const char* to_string(Stage s) {
    switch (s) {
    case Stage::Prefill: return "prefill";
    case Stage::Compress: return "compress";
    case Stage::Decode: return "decode";
    }
    return "?";
}

std::uint32_t StaticPolicy::size_for(Stage s) const {
    switch (s) {
    case Stage::Prefill: return prefill;
    case Stage::Compress: return compress;
    case Stage::Decode: return decode;
    }
    return 1;
}

namespace {

template <typename T>
T parse_number(std::string_view text, const std::string& what) {
    T value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last || text.empty()) {
        throw ConfigError("scheduler policy: bad " + what + " '" + std::string(text) + "'");
    }
    return value;
}

bool parse_switch(std::string_view v, const std::string& key) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("scheduler policy: " + key + " must be on|off");
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::string format_ms(double seconds) {
    double ms = seconds * 1000.0;
    std::ostringstream os;
    os << ms;
    return os.str();
}

// "p1c1d8" -> {1, 1, 8}
StaticPolicy parse_static_sizes(std::string_view s) {
    StaticPolicy p;
    if (s.size() < 6 || s[0] != 'p') throw ConfigError("static policy must look like pXcYdZ, got '" + std::string(s) + "'");
    std::size_t c = s.find('c');
    std::size_t d = s.find('d');
    if (c == std::string_view::npos || d == std::string_view::npos || !(0 < c && c < d)) {
        throw ConfigError("static policy must look like pXcYdZ, got '" + std::string(s) + "'");
    }
    p.prefill = parse_number<std::uint32_t>(s.substr(1, c - 1), "prefill size");
    p.compress = parse_number<std::uint32_t>(s.substr(c + 1, d - c - 1), "compress size");
    p.decode = parse_number<std::uint32_t>(s.substr(d + 1), "decode size");
    return p;
}

}  // namespace

SchedulerPolicy parse_policy(const std::string& text) {
    std::string_view t = text;
    if (t == "fcfs") return FcfsPolicy{};

    if (t.rfind("static:", 0) == 0) {
        auto parts = split(t.substr(7), ',');
        StaticPolicy p = parse_static_sizes(parts[0]);
        for (std::size_t i = 1; i < parts.size(); ++i) {
            auto eq = parts[i].find('=');
            if (eq == std::string_view::npos) throw ConfigError("static policy: expected key=value, got '" + std::string(parts[i]) + "'");
            auto key = parts[i].substr(0, eq);
            auto val = parts[i].substr(eq + 1);
            if (key == "flush_ms") {
                p.flush_s = parse_number<double>(val, "flush_ms") / 1000.0;
            } else {
                throw ConfigError("static policy: unknown key '" + std::string(key) + "'");
            }
        }
        validate(p);
        return p;
    }

    if (t == "dynamic" || t.rfind("dynamic:", 0) == 0) {
        DynamicPolicy p;
        if (t.size() > 8) {
            bool seen_min = false, seen_max = false, seen_wait = false;
            for (auto kv : split(t.substr(8), ',')) {
                auto eq = kv.find('=');
                if (eq == std::string_view::npos) throw ConfigError("dynamic policy: expected key=value, got '" + std::string(kv) + "'");
                auto key = kv.substr(0, eq);
                auto val = kv.substr(eq + 1);
                if (key == "bmin") {
                    p.b_min = parse_number<std::uint32_t>(val, "bmin");
                    seen_min = true;
                } else if (key == "bmax") {
                    p.b_max = parse_number<std::uint32_t>(val, "bmax");
                    seen_max = true;
                } else if (key == "wmax_ms") {
                    p.w_max_s = parse_number<double>(val, "wmax_ms") / 1000.0;
                    seen_wait = true;
                } else if (key == "aging") {
                    p.aging = parse_switch(val, "aging");
                } else if (key == "adapt") {
                    p.adapt = parse_switch(val, "adapt");
                } else {
                    throw ConfigError("dynamic policy: unknown key '" + std::string(key) + "'");
                }
            }
            if (!(seen_min && seen_max && seen_wait)) {
                throw ConfigError("dynamic policy needs bmin, bmax and wmax_ms");
            }
        }
        validate(p);
        return p;
    }
    throw ConfigError("unknown scheduler policy '" + text + "' (expected fcfs, static:pXcYdZ or dynamic:...)");
}

std::string to_string(const SchedulerPolicy& policy) {
    struct Visitor {
        std::string operator()(const FcfsPolicy&) const { return "fcfs"; }
        std::string operator()(const StaticPolicy& p) const {
            std::string s = "static:p" + std::to_string(p.prefill) + "c" + std::to_string(p.compress) + "d" +
                            std::to_string(p.decode);
            if (p.flush_s != StaticPolicy{}.flush_s) s += ",flush_ms=" + format_ms(p.flush_s);
            return s;
        }
        std::string operator()(const DynamicPolicy& p) const {
            std::string s = "dynamic:bmin=" + std::to_string(p.b_min) + ",bmax=" + std::to_string(p.b_max) +
                            ",wmax_ms=" + format_ms(p.w_max_s) + ",aging=" + (p.aging ? "on" : "off");
            if (p.adapt) s += ",adapt=on";
            return s;
        }
    };
    return std::visit(Visitor{}, policy);
}

void validate(const SchedulerPolicy& policy) {
    if (const auto* s = std::get_if<StaticPolicy>(&policy)) {
        if (s->prefill < 1 || s->compress < 1 || s->decode < 1) throw ConfigError("static batch sizes must be >= 1");
        if (!(s->flush_s >= 0.0)) throw ConfigError("static flush_ms must be >= 0");
    } else if (const auto* d = std::get_if<DynamicPolicy>(&policy)) {
        if (d->b_min < 1 || d->b_min > d->b_max) throw ConfigError("dynamic policy needs 1 <= bmin <= bmax");
        if (!(d->w_max_s >= 0.0)) throw ConfigError("dynamic wmax_ms must be >= 0");
    }
}

void StageQueue::push(QueueEntry e) { entries_.push_back(e); }

std::vector<QueueEntry> StageQueue::take(std::span<const RequestId> members) {
    std::vector<QueueEntry> taken;
    taken.reserve(members.size());
    for (RequestId id : members) {
        auto it = std::find_if(entries_.begin(), entries_.end(), [id](const QueueEntry& e) { return e.request_id == id; });
        if (it == entries_.end()) throw InvalidState("request " + std::to_string(id) + " is not queued for " + to_string(stage_));
        taken.push_back(*it);
        entries_.erase(it);
    }
    return taken;
}

bool should_dispatch(const StageQueue& queue, const SchedulerPolicy& policy, double now,
                     std::optional<std::uint32_t> threshold) {
    if (queue.empty()) return false;
    if (std::holds_alternative<FcfsPolicy>(policy)) return true;
    if (const auto* s = std::get_if<StaticPolicy>(&policy)) {
        return queue.size() >= s->size_for(queue.stage()) || now >= queue.front().enqueue_time + s->flush_s;
    }
    const auto& d = std::get<DynamicPolicy>(policy);
    const std::uint32_t b_min = threshold.value_or(d.b_min);
    return queue.size() >= b_min || now >= queue.front().enqueue_time + d.w_max_s;
}

BatchDecision max_feasible_batch(const StageQueue& queue, std::uint64_t budget_bytes, std::uint32_t b_max,
                                 double now, std::optional<double> aging_wait_s) {
    BatchDecision out;
    out.stage = queue.stage();
    out.formed_at = now;
    const auto& entries = queue.entries();

    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<bool> chosen(entries.size(), false);
    std::uint64_t remaining = budget_bytes;

    auto take = [&](std::size_t i) {
        chosen[i] = true;
        remaining -= entries[i].estimated_bytes;
        out.members.push_back(entries[i].request_id);
        out.total_bytes += entries[i].estimated_bytes;
    };

    if (aging_wait_s) {
        for (std::size_t i = 0; i < entries.size() && out.members.size() < b_max; ++i) {
            if (now >= entries[i].enqueue_time + *aging_wait_s && entries[i].estimated_bytes <= remaining) take(i);
        }
    }

    // Smallest first maximizes count and, for that count, minimizes bytes.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (entries[a].estimated_bytes != entries[b].estimated_bytes) {
            return entries[a].estimated_bytes < entries[b].estimated_bytes;
        }
        return entries[a].arrival_time < entries[b].arrival_time;
    });
    for (std::size_t i : order) {
        if (out.members.size() >= b_max) break;
        if (chosen[i]) continue;
        if (entries[i].estimated_bytes > remaining) break;
        take(i);
    }
    if (out.members.empty()) throw EmptyBatch();
    return out;
}

namespace {

// First `want` entries in FIFO order, provided all of them fit.
BatchDecision fifo_batch(const StageQueue& queue, std::size_t want, std::uint64_t budget, double now, bool pool_idle) {
    BatchDecision out;
    out.stage = queue.stage();
    out.formed_at = now;
    const auto& entries = queue.entries();
    want = std::min(want, entries.size());
    std::uint64_t total = 0;
    std::size_t fit = 0;
    for (; fit < want; ++fit) {
        if (entries[fit].estimated_bytes > budget - total) break;
        total += entries[fit].estimated_bytes;
    }
    // All-or-nothing unless nothing else holds memory, otherwise a batch
    // larger than the whole pool would deadlock the stage.
    if (fit < want && !(pool_idle && fit > 0)) throw EmptyBatch();
    for (std::size_t i = 0; i < fit; ++i) out.members.push_back(entries[i].request_id);
    out.total_bytes = total;
    return out;
}

}  // namespace

BatchDecision form_stage_batch(Stage stage, const StageQueue& queue, const SchedulerPolicy& policy,
                               std::uint64_t budget_bytes, double now, bool pool_idle) {
    if (queue.stage() != stage) throw InvalidState("queue/stage mismatch");
    if (queue.empty()) throw EmptyBatch();
    if (std::holds_alternative<FcfsPolicy>(policy)) return fifo_batch(queue, 1, budget_bytes, now, pool_idle);
    if (const auto* s = std::get_if<StaticPolicy>(&policy)) {
        // Anti-stall flush takes whatever is waiting, up to the fixed size.
        return fifo_batch(queue, s->size_for(stage), budget_bytes, now, pool_idle);
    }
    const auto& d = std::get<DynamicPolicy>(policy);
    return max_feasible_batch(queue, budget_bytes, d.b_max, now,
                              d.aging ? std::optional<double>(d.w_max_s) : std::nullopt);
}

std::uint32_t adjust_batch(std::span<const std::size_t> recent_depths, const DynamicPolicy& policy) {
    if (recent_depths.empty()) return policy.b_min;
    double ema = static_cast<double>(recent_depths.front());
    for (std::size_t i = 1; i < recent_depths.size(); ++i) {
        ema = kAdjustAlpha * static_cast<double>(recent_depths[i]) + (1.0 - kAdjustAlpha) * ema;
    }
    const double rounded = std::round(ema);
    return static_cast<std::uint32_t>(std::clamp(rounded, 1.0, static_cast<double>(policy.b_max)));
}

}  // namespace kvsim

#include "kvsim/engine.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <queue>
#include <unordered_map>

#include "kvsim/errors.hpp"

namespace kvsim {

const char* to_string(EventKind k) {
    switch (k) {
    case EventKind::Arrival: return "arrival";
    case EventKind::StageStart: return "stage_start";
    case EventKind::StageComplete: return "stage_complete";
    case EventKind::DecodeStep: return "decode_step";
    case EventKind::RequestComplete: return "request_complete";
    case EventKind::Wakeup: return "wakeup";
    }
    return "?";
}

void SimConfig::validate() const {
    model.validate();
    compressor.validate();
    cost.validate();
    kvsim::validate(policy);
    if (capacity_bytes == 0) throw ConfigError("pool capacity must be > 0");
    if (max_events == 0) throw ConfigError("max_events must be > 0");
}

DecodeBatch::DecodeBatch(std::vector<DecodeMember> members) : members_(std::move(members)) {
    for (const auto& m : members_) {
        if (!m.finished()) ++active_;
    }
}

std::uint64_t DecodeBatch::active_context_tokens() const {
    std::uint64_t total = 0;
    for (const auto& m : members_) {
        if (!m.finished()) total += m.context_tokens + m.emitted;
    }
    return total;
}

double DecodeBatch::next_step_duration(const CostModel& cost) const {
    return decode_step_duration(cost, active_, active_context_tokens());
}

std::vector<RequestId> DecodeBatch::complete_step() {
    std::vector<RequestId> finished;
    for (auto& m : members_) {
        if (m.finished()) continue;
        ++m.emitted;
        if (m.finished()) {
            finished.push_back(m.request_id);
            --active_;
        }
    }
    ++steps_;
    return finished;
}

DecodeTimeline execute_decoding(std::vector<DecodeMember> members, const CostModel& cost, double start) {
    DecodeTimeline tl;
    tl.first_token.assign(members.size(), kNotReached);
    tl.completion.assign(members.size(), kNotReached);
    std::unordered_map<RequestId, std::size_t> index;
    for (std::size_t i = 0; i < members.size(); ++i) index[members[i].request_id] = i;

    DecodeBatch batch(std::move(members));
    double t = start;
    while (!batch.done()) {
        const std::size_t active = batch.active();
        t += batch.next_step_duration(cost);
        auto finished = batch.complete_step();
        tl.step_end.push_back(t);
        tl.active_per_step.push_back(active);
        if (batch.steps_done() == 1) {
            for (auto& ft : tl.first_token) ft = t;
        }
        for (RequestId id : finished) tl.completion[index[id]] = t;
    }
    return tl;
}

Footprint request_footprint(const RequestSpec& r, const ModelConfig& model, const CompressorSpec& comp) {
    const KVCacheSpec raw = split_modalities(r.image_tokens, r.text_tokens);
    const KVCacheSpec compressed = compressed_spec(raw, comp);
    Footprint f;
    f.raw_bytes = kv_bytes(model, raw.total_tokens());
    f.compressed_bytes = kv_bytes(model, compressed.total_tokens());
    f.final_bytes = kv_bytes(model, compressed.total_tokens() + r.max_new_tokens);
    return f;
}

std::uint64_t admission_commitment(const Footprint& f, PoolMode mode) {
    if (mode == PoolMode::LegacyZombie) return f.raw_bytes + f.final_bytes;
    return std::max(f.raw_bytes, f.final_bytes);
}

std::uint64_t post_compress_commitment(const Footprint& f, PoolMode mode) {
    if (mode == PoolMode::LegacyZombie) return f.raw_bytes + f.final_bytes;
    return f.final_bytes;
}

namespace {

struct EventOrder {
    bool operator()(const Event& a, const Event& b) const {
        if (a.time != b.time) return a.time > b.time;
        return a.seq > b.seq;
    }
};

struct RequestState {
    RequestSpec spec;
    RequestRecord record;
    Footprint footprint;
    KVCacheSpec raw_spec;
    KVCacheSpec compressed_spec;
    std::uint64_t commitment = 0;
    HandleId handle = 0;
    bool has_handle = false;
};

struct Batch {
    Stage stage = Stage::Prefill;
    std::vector<RequestId> members;
    double start = 0.0;
};

constexpr std::size_t kAdaptWindow = 16;

class Simulation {
public:
    Simulation(const SimConfig& cfg, const std::vector<RequestSpec>& requests)
        : cfg_(cfg),
          pool_(cfg.model, cfg.capacity_bytes, cfg.pool_mode),
          queues_{StageQueue(Stage::Prefill), StageQueue(Stage::Compress), StageQueue(Stage::Decode)},
          links_{StageLink(Stage::Prefill, Stage::Prefill), StageLink(Stage::Prefill, Stage::Compress),
                 StageLink(Stage::Compress, Stage::Decode)} {
        pool_.set_ledger_enabled(cfg.keep_ledger);
        if (const auto* d = std::get_if<DynamicPolicy>(&cfg_.policy)) {
            thresholds_.fill(d->b_min);
        }
        states_.reserve(requests.size());
        double last = 0.0;
        for (std::size_t i = 0; i < requests.size(); ++i) {
            const auto& r = requests[i];
            if (r.arrival_time < last) throw ConfigError("requests must be sorted by arrival time");
            last = r.arrival_time;
            if (r.max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
            RequestState s;
            s.spec = r;
            s.spec.request_id = i;
            s.record.request_id = r.request_id;
            s.record.arrival = r.arrival_time;
            s.record.input_tokens = r.input_tokens();
            s.record.output_tokens = r.max_new_tokens;
            s.raw_spec = split_modalities(r.image_tokens, r.text_tokens);
            s.compressed_spec = compressed_spec(s.raw_spec, cfg.compressor);
            s.footprint = request_footprint(r, cfg.model, cfg.compressor);
            if (admission_commitment(s.footprint, cfg.pool_mode) > cfg.capacity_bytes) {
                throw SimError("request " + std::to_string(r.request_id) + " needs " +
                               std::to_string(admission_commitment(s.footprint, cfg.pool_mode)) +
                               " bytes, more than the pool capacity");
            }
            states_.push_back(std::move(s));
        }
    }

    SimResult run() {
        for (std::size_t i = 0; i < states_.size(); ++i) {
            push(states_[i].spec.arrival_time, EventKind::Arrival, Stage::Prefill, i);
        }
        if (!states_.empty()) pool_.snapshot(states_.front().spec.arrival_time);
        std::uint64_t last_mutation = pool_.mutation_count();

        while (!events_.empty()) {
            if (result_.events_processed >= cfg_.max_events) {
                result_.diverged = true;
                break;
            }
            Event ev = events_.top();
            events_.pop();
            now_ = ev.time;
            ++result_.events_processed;
            handle(ev);
            dispatch_all();
            if (pool_.mutation_count() != last_mutation) {
                pool_.snapshot(now_);
                last_mutation = pool_.mutation_count();
            }
            if (cfg_.check_invariants) check_invariants();
        }
        if (!result_.diverged && completed_ != states_.size()) {
            throw SimError("pipeline stalled with " + std::to_string(states_.size() - completed_) +
                           " requests unfinished");
        }

        result_.in_flight = states_.size() - completed_;
        result_.pool = pool_.stats();
        auto& report = result_.report;
        report.records.reserve(states_.size());
        for (const auto& s : states_) report.records.push_back(s.record);
        report.memory_trace.assign(pool_.trace().begin(), pool_.trace().end());
        report.aggregates = compute_aggregates(report.records, report.memory_trace);
        report.seed = cfg_.seed;
        report.config_hash = cfg_.config_hash;
        if (cfg_.keep_ledger) result_.ledger.assign(pool_.ledger().begin(), pool_.ledger().end());
        return std::move(result_);
    }

private:
    void push(double t, EventKind kind, Stage stage, std::uint64_t subject, std::uint64_t step = 0) {
        events_.push(Event{t, seq_++, kind, stage, subject, step});
    }

    std::size_t executor_of(Stage s) const {
        if (cfg_.coupled && s == Stage::Decode) return index_of(Stage::Prefill);
        return index_of(s);
    }

    void enqueue(Stage stage, RequestId id, std::uint64_t estimated) {
        auto& link = links_[index_of(stage)];
        link.push(id);
        // The consumer drains its link in order as soon as work is handed over.
        while (!link.empty()) {
            RequestId next = link.pop();
            const auto& s = states_[next];
            queues_[index_of(stage)].push(QueueEntry{next, now_, s.spec.arrival_time, estimated});
        }
    }

    void handle(const Event& ev) {
        switch (ev.kind) {
        case EventKind::Arrival: {
            auto& s = states_[ev.subject];
            s.commitment = admission_commitment(s.footprint, cfg_.pool_mode);
            enqueue(Stage::Prefill, ev.subject, s.commitment);
            break;
        }
        case EventKind::StageStart: on_stage_start(ev); break;
        case EventKind::StageComplete: on_stage_complete(ev); break;
        case EventKind::DecodeStep: on_decode_step(ev); break;
        case EventKind::RequestComplete: on_request_complete(ev.subject); break;
        case EventKind::Wakeup: wakeups_[index_of(ev.stage)].reset(); break;
        }
    }

    void on_stage_start(const Event& ev) {
        Batch& b = batches_.at(ev.subject);
        b.start = now_;
        if (b.stage == Stage::Prefill) {
            std::vector<std::uint64_t> tokens;
            for (RequestId id : b.members) {
                states_[id].record.prefill_start = now_;
                tokens.push_back(states_[id].spec.input_tokens());
            }
            push(now_ + prefill_duration(cfg_.cost, tokens), EventKind::StageComplete, b.stage, ev.subject);
        } else if (b.stage == Stage::Compress) {
            std::vector<std::uint64_t> tokens;
            for (RequestId id : b.members) {
                states_[id].record.compress_start = now_;
                tokens.push_back(states_[id].raw_spec.total_tokens());
            }
            push(now_ + compress_duration(cfg_.cost, cfg_.model, tokens), EventKind::StageComplete, b.stage,
                 ev.subject);
        } else {
            std::vector<DecodeMember> members;
            for (RequestId id : b.members) {
                auto& s = states_[id];
                s.record.decode_start = now_;
                members.push_back(DecodeMember{id, s.compressed_spec.total_tokens(), s.spec.max_new_tokens, 0});
            }
            decode_.emplace(std::move(members));
            push(now_ + decode_->next_step_duration(cfg_.cost), EventKind::DecodeStep, b.stage, ev.subject, 1);
        }
    }

    void finish_batch(std::uint64_t batch_id) {
        const Batch& b = batches_.at(batch_id);
        result_.executions.push_back(StageExecution{b.stage, b.start, now_, b.members.size()});
        busy_[executor_of(b.stage)] = false;
        batches_.erase(batch_id);
    }

    void on_stage_complete(const Event& ev) {
        Batch b = batches_.at(ev.subject);
        finish_batch(ev.subject);
        if (b.stage == Stage::Prefill) {
            for (RequestId id : b.members) {
                auto& s = states_[id];
                s.record.prefill_end = now_;
                s.handle = pool_.allocate(id, s.raw_spec, now_).handle_id;
                s.has_handle = true;
                enqueue(Stage::Compress, id, 0);
            }
        } else {
            for (RequestId id : b.members) {
                auto& s = states_[id];
                s.record.compress_end = now_;
                pool_.transition_compressed(s.handle, s.compressed_spec, now_);
                const std::uint64_t after = post_compress_commitment(s.footprint, cfg_.pool_mode);
                committed_ -= s.commitment - after;
                s.commitment = after;
                enqueue(Stage::Decode, id, 0);
            }
        }
    }

    void on_decode_step(const Event& ev) {
        for (const auto& m : decode_->members()) {
            if (!m.finished()) pool_.append_decode_tokens(states_[m.request_id].handle, 1, now_);
        }
        if (ev.step_index == 1) {
            for (const auto& m : decode_->members()) states_[m.request_id].record.first_token = now_;
        }
        for (RequestId id : decode_->complete_step()) {
            push(now_, EventKind::RequestComplete, Stage::Decode, id);
        }
        if (decode_->done()) {
            decode_.reset();
            finish_batch(ev.subject);
        } else {
            push(now_ + decode_->next_step_duration(cfg_.cost), EventKind::DecodeStep, Stage::Decode, ev.subject,
                 ev.step_index + 1);
        }
    }

    void on_request_complete(RequestId id) {
        auto& s = states_[id];
        s.record.completion = now_;
        pool_.release(s.handle, now_);
        committed_ -= s.commitment;
        s.commitment = 0;
        ++completed_;
    }

    std::optional<double> wait_limit() const {
        if (const auto* st = std::get_if<StaticPolicy>(&cfg_.policy)) return st->flush_s;
        if (const auto* d = std::get_if<DynamicPolicy>(&cfg_.policy)) return d->w_max_s;
        return std::nullopt;
    }

    bool ready(Stage stage) {
        const auto& q = queues_[index_of(stage)];
        if (q.empty() || busy_[executor_of(stage)]) return false;
        std::optional<std::uint32_t> threshold;
        if (const auto* d = std::get_if<DynamicPolicy>(&cfg_.policy); d && d->adapt) threshold = thresholds_[index_of(stage)];
        if (should_dispatch(q, cfg_.policy, now_, threshold)) return true;
        if (auto w = wait_limit()) {
            const double at = q.front().enqueue_time + *w;
            auto& pending = wakeups_[index_of(stage)];
            if (!pending || *pending > at) {
                pending = at;
                push(at, EventKind::Wakeup, stage, 0);
            }
        }
        return false;
    }

    bool try_dispatch(Stage stage) {
        auto& q = queues_[index_of(stage)];
        const std::uint64_t budget = cfg_.capacity_bytes - committed_;
        BatchDecision decision;
        try {
            decision = form_stage_batch(stage, q, cfg_.policy, budget, now_, committed_ == 0);
        } catch (const EmptyBatch&) {
            // Blocked on memory; a later release re-triggers dispatch.
            return false;
        }
        if (const auto* d = std::get_if<DynamicPolicy>(&cfg_.policy); d && d->adapt) {
            auto& window = depth_window_[index_of(stage)];
            window.push_back(q.size());
            if (window.size() > kAdaptWindow) window.pop_front();
            std::vector<std::size_t> depths(window.begin(), window.end());
            thresholds_[index_of(stage)] = std::max(d->b_min, adjust_batch(depths, *d));
        }
        auto taken = q.take(decision.members);
        std::uint64_t bytes = 0;
        for (const auto& e : taken) bytes += e.estimated_bytes;
        if (bytes > budget) throw SimError("scheduler formed a batch over its memory budget");
        committed_ += bytes;

        const std::uint64_t id = next_batch_++;
        batches_.emplace(id, Batch{stage, decision.members, now_});
        busy_[executor_of(stage)] = true;
        push(now_, EventKind::StageStart, stage, id);
        return true;
    }

    void dispatch_all() {
        if (cfg_.coupled) {
            // Shared executor: serve whichever of prefill/decode has waited longer.
            const bool pre = ready(Stage::Prefill);
            const bool dec = ready(Stage::Decode);
            if (pre && dec) {
                const bool decode_first = queues_[index_of(Stage::Decode)].front().enqueue_time <=
                                          queues_[index_of(Stage::Prefill)].front().enqueue_time;
                if (decode_first) {
                    if (!try_dispatch(Stage::Decode)) try_dispatch(Stage::Prefill);
                } else if (!try_dispatch(Stage::Prefill)) {
                    try_dispatch(Stage::Decode);
                }
            } else if (pre) {
                try_dispatch(Stage::Prefill);
            } else if (dec) {
                try_dispatch(Stage::Decode);
            }
            if (ready(Stage::Compress)) try_dispatch(Stage::Compress);
            return;
        }
        for (Stage s : kStages) {
            if (ready(s)) try_dispatch(s);
        }
    }

    void check_invariants() {
        ++result_.invariant_checks;
        const auto& st = pool_.stats();
        if (pool_.recount_bytes() != st.current_bytes) throw SimError("pool ledger does not balance");
        if (st.current_bytes > committed_) throw SimError("pool holds more bytes than were committed");
        if (committed_ > cfg_.capacity_bytes) throw SimError("commitments exceed pool capacity");
        if (st.peak_bytes > st.capacity_bytes) throw SimError("pool peak exceeds capacity");
    }

    const SimConfig& cfg_;
    KVCachePool pool_;
    std::array<StageQueue, 3> queues_;
    std::array<StageLink, 3> links_;
    std::array<bool, 3> busy_{false, false, false};
    std::array<std::optional<double>, 3> wakeups_{};
    std::array<std::uint32_t, 3> thresholds_{1, 1, 1};
    std::array<std::deque<std::size_t>, 3> depth_window_{};
    std::vector<RequestState> states_;
    std::unordered_map<std::uint64_t, Batch> batches_;
    std::optional<DecodeBatch> decode_;
    std::priority_queue<Event, std::vector<Event>, EventOrder> events_;
    std::uint64_t seq_ = 0;
    std::uint64_t next_batch_ = 0;
    std::uint64_t committed_ = 0;
    std::uint64_t completed_ = 0;
    double now_ = 0.0;
    SimResult result_;
};

}  // namespace

SimResult run(const SimConfig& config, const std::vector<RequestSpec>& requests) {
    config.validate();
    Simulation sim(config, requests);
    return sim.run();
}

}  // namespace kvsim

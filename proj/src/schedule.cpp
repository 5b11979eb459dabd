#include "optimus/schedule.hpp"

#include <iostream>
#include <sstream>

namespace optimus {

const char* schedule_kind_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::gpipe: return "gpipe";
        case ScheduleKind::one_f_one_b: return "1f1b";
        case ScheduleKind::interleaved_one_f_one_b: return "interleaved-1f1b";
    }
    return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "gpipe") return ScheduleKind::gpipe;
    if (s == "1f1b") return ScheduleKind::one_f_one_b;
    if (s == "interleaved-1f1b") return ScheduleKind::interleaved_one_f_one_b;
    throw ConfigError(strcat_("unknown schedule kind '", s,
                              "' (expected gpipe, 1f1b, or interleaved-1f1b)"));
}

namespace {

std::vector<ScheduleEvent> single_stage_events(int m) {
    std::vector<ScheduleEvent> ev;
    for (int mb = 0; mb < m; ++mb) {
        ev.push_back({Phase::forward, mb, 0});
        ev.push_back({Phase::backward, mb, 0});
    }
    return ev;
}

std::vector<ScheduleEvent> gpipe_events(int rank, int pp, int m) {
    (void)rank;
    (void)pp;
    std::vector<ScheduleEvent> ev;
    for (int mb = 0; mb < m; ++mb) ev.push_back({Phase::forward, mb, 0});
    for (int mb = 0; mb < m; ++mb) ev.push_back({Phase::backward, mb, 0});
    return ev;
}

std::vector<ScheduleEvent> one_f_one_b_events(int rank, int pp, int m) {
    const int warmup = std::min(pp - 1 - rank, m);
    std::vector<ScheduleEvent> ev;
    for (int mb = 0; mb < warmup; ++mb) ev.push_back({Phase::forward, mb, 0});
    for (int mb = warmup; mb < m; ++mb) {
        ev.push_back({Phase::forward, mb, 0});
        ev.push_back({Phase::backward, mb - warmup, 0});
    }
    for (int mb = m - warmup; mb < m; ++mb) ev.push_back({Phase::backward, mb, 0});
    return ev;
}

// the interleaved order walks a single virtual counter k over m*v slots per
// phase: slots advance through microbatches in groups of pp, cycling the
// virtual stages within each group of pp*v slots (backwards visit the
// virtual stages in reverse)
ScheduleEvent interleaved_slot(int k, int pp, int v, Phase phase) {
    const int group = pp * v;
    const int in_group = k % group;
    int vstage = in_group / pp;
    if (phase == Phase::backward) vstage = v - 1 - vstage;
    const int mb = (k / group) * pp + in_group % pp;
    return {phase, mb, vstage};
}

std::vector<ScheduleEvent> interleaved_events(int rank, int pp, int m, int v) {
    const int total = m * v;
    const int warmup = std::min((pp - 1 - rank) * 2 + (v - 1) * pp, total);
    std::vector<ScheduleEvent> ev;
    int f = 0, b = 0;
    for (; f < warmup; ++f) ev.push_back(interleaved_slot(f, pp, v, Phase::forward));
    for (; f < total; ++f, ++b) {
        ev.push_back(interleaved_slot(f, pp, v, Phase::forward));
        ev.push_back(interleaved_slot(b, pp, v, Phase::backward));
    }
    for (; b < total; ++b) ev.push_back(interleaved_slot(b, pp, v, Phase::backward));
    return ev;
}

}  // namespace

PipelineSchedule pp_build_schedule(ScheduleKind kind, int pp, int m, int v) {
    check(pp >= 1 && m >= 1, "pp_build_schedule: PP and M must be positive");
    PipelineSchedule s;
    s.kind = kind;
    s.pp = pp;
    s.m = m;
    s.v = 1;
    if (kind == ScheduleKind::one_f_one_b && m < pp)
        std::cerr << "[schedule] warning: 1f1b with M=" << m << " < PP=" << pp
                  << " leaves the pipeline mostly idle\n";
    s.per_rank.resize((size_t)pp);
    if (pp == 1) {
        s.per_rank[0] = single_stage_events(m);
        return s;
    }
    switch (kind) {
        case ScheduleKind::gpipe:
            for (int r = 0; r < pp; ++r) s.per_rank[(size_t)r] = gpipe_events(r, pp, m);
            break;
        case ScheduleKind::one_f_one_b:
            for (int r = 0; r < pp; ++r) s.per_rank[(size_t)r] = one_f_one_b_events(r, pp, m);
            break;
        case ScheduleKind::interleaved_one_f_one_b:
            check(v >= 1, "pp_build_schedule: V must be positive");
            check(m % pp == 0, strcat_("pp_build_schedule: interleaved-1f1b needs M divisible by "
                                       "PP, got M=", m, " PP=", pp));
            s.v = v;
            for (int r = 0; r < pp; ++r) s.per_rank[(size_t)r] = interleaved_events(r, pp, m, v);
            break;
    }
    return s;
}

ScheduleCheck check_schedule(const PipelineSchedule& s) {
    ScheduleCheck res;
    res.peak_in_flight.assign((size_t)s.pp, 0);
    const int chunks = s.total_chunks();
    // per-rank multiplicity of each (phase, mb, vstage)
    for (int r = 0; r < s.pp; ++r) {
        std::vector<int> fwd_seen((size_t)(s.m * s.v), 0), bwd_seen((size_t)(s.m * s.v), 0);
        for (const ScheduleEvent& e : s.per_rank[(size_t)r]) {
            if (e.microbatch < 0 || e.microbatch >= s.m || e.vstage < 0 || e.vstage >= s.v) {
                res.reason = strcat_("rank ", r, ": event out of range (mb=", e.microbatch,
                                     ", vstage=", e.vstage, ")");
                return res;
            }
            auto& seen = e.phase == Phase::forward ? fwd_seen : bwd_seen;
            seen[(size_t)(e.microbatch * s.v + e.vstage)]++;
        }
        for (int i = 0; i < s.m * s.v; ++i)
            if (fwd_seen[(size_t)i] != 1 || bwd_seen[(size_t)i] != 1) {
                res.reason = strcat_("rank ", r, ": microbatch ", i / s.v, " vstage ", i % s.v,
                                     " scheduled ", fwd_seen[(size_t)i], " forwards and ",
                                     bwd_seen[(size_t)i], " backwards (want 1 and 1)");
                return res;
            }
    }
    // replay: run every rank's head event when its dependencies are satisfied
    std::vector<size_t> cursor((size_t)s.pp, 0);
    std::vector<char> fwd_done((size_t)(s.m * chunks), 0), bwd_done((size_t)(s.m * chunks), 0);
    std::vector<int> in_flight((size_t)s.pp, 0);
    auto fidx = [&](int mb, int chunk) { return (size_t)(mb * chunks + chunk); };
    bool progressed = true;
    while (progressed) {
        progressed = false;
        for (int r = 0; r < s.pp; ++r) {
            while (cursor[(size_t)r] < s.per_rank[(size_t)r].size()) {
                const ScheduleEvent& e = s.per_rank[(size_t)r][cursor[(size_t)r]];
                const int chunk = s.chunk_of(r, e.vstage);
                bool ready;
                if (e.phase == Phase::forward) {
                    ready = chunk == 0 || fwd_done[fidx(e.microbatch, chunk - 1)];
                } else {
                    ready = fwd_done[fidx(e.microbatch, chunk)] &&
                            (chunk == chunks - 1 || bwd_done[fidx(e.microbatch, chunk + 1)]);
                }
                if (!ready) break;
                if (e.phase == Phase::forward) {
                    fwd_done[fidx(e.microbatch, chunk)] = 1;
                    in_flight[(size_t)r]++;
                    res.peak_in_flight[(size_t)r] =
                        std::max(res.peak_in_flight[(size_t)r], in_flight[(size_t)r]);
                } else {
                    bwd_done[fidx(e.microbatch, chunk)] = 1;
                    in_flight[(size_t)r]--;
                }
                cursor[(size_t)r]++;
                progressed = true;
            }
        }
    }
    for (int r = 0; r < s.pp; ++r)
        if (cursor[(size_t)r] < s.per_rank[(size_t)r].size()) {
            const ScheduleEvent& e = s.per_rank[(size_t)r][cursor[(size_t)r]];
            res.reason = strcat_("stuck: rank ", r, " cannot run ", phase_name(e.phase),
                                 "(mb=", e.microbatch, ", vstage=", e.vstage, ")");
            return res;
        }
    res.ok = true;
    return res;
}

std::string schedule_csv(const PipelineSchedule& s) {
    std::ostringstream out;
    out << "rank,slot,phase,microbatch,vstage\n";
    for (int r = 0; r < s.pp; ++r)
        for (size_t i = 0; i < s.per_rank[(size_t)r].size(); ++i) {
            const ScheduleEvent& e = s.per_rank[(size_t)r][i];
            out << r << ',' << i << ',' << phase_name(e.phase) << ',' << e.microbatch << ','
                << e.vstage << '\n';
        }
    return out.str();
}

}  // namespace optimus

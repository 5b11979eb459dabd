#pragma once

#include <string>
#include <vector>

#include "optimus/common.hpp"

namespace optimus {

enum class Phase { forward, backward };

inline const char* phase_name(Phase p) { return p == Phase::forward ? "F" : "B"; }

enum class ScheduleKind { gpipe, one_f_one_b, interleaved_one_f_one_b };

const char* schedule_kind_name(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

struct ScheduleEvent {
    Phase phase;
    int microbatch = 0;
    int vstage = 0;  // virtual stage index on this rank; global chunk = vstage*PP + rank

    bool operator==(const ScheduleEvent&) const = default;
};

struct PipelineSchedule {
    ScheduleKind kind = ScheduleKind::gpipe;
    int pp = 1;
    int m = 1;
    int v = 1;  // virtual stages per rank (>1 only for interleaved)
    std::vector<std::vector<ScheduleEvent>> per_rank;

    int total_chunks() const { return pp * v; }
    // global pipeline chunk executed by (rank, vstage); chunks are striped
    // round-robin so consecutive chunks live on consecutive ranks
    int chunk_of(int rank, int vstage) const { return vstage * pp + rank; }
};

// kind-specific event orders: gpipe (all forwards then all backwards), 1f1b
// (warmup of PP-1-rank forwards, steady alternation, cooldown), interleaved
// 1f1b over v virtual stages per rank. PP=1 always degenerates to strict
// F(m),B(m) alternation over a single chunk.
PipelineSchedule pp_build_schedule(ScheduleKind kind, int pp, int m, int v = 2);

struct ScheduleCheck {
    bool ok = false;
    std::string reason;              // empty when ok
    std::vector<int> peak_in_flight;  // per rank: max forwards not yet backwarded
};

// replays the per-rank event lists against the dependency rules: a forward of
// (m, chunk) needs the forward of (m, chunk-1); a backward needs the matching
// forward and the backward of (m, chunk+1); every (m, vstage) must appear
// exactly once per phase per rank
ScheduleCheck check_schedule(const PipelineSchedule& s);

// per-rank timeline rows: rank,slot,phase,microbatch,vstage
std::string schedule_csv(const PipelineSchedule& s);

}  // namespace optimus

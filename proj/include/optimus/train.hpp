#pragma once

#include <string>
#include <vector>

#include "optimus/model.hpp"
#include "optimus/reliability.hpp"
#include "optimus/schedule.hpp"

namespace optimus {

// thrown by a rank whose node is killed by the failure plan; it unwinds the
// whole world and reaches the driver through World::run
struct HardNodeFailure : Error {
    int node;
    int64_t step;
    HardNodeFailure(int node_, int64_t step_)
        : Error(strcat_("hard failure: node ", node_, " died at step ", step_)),
          node(node_),
          step(step_) {}
};

// raised after the collective NaN scan agrees on a sick node; like a hard
// failure it ends the attempt before the optimizer step or any checkpoint
struct SoftNodeFailure : Error {
    int node;
    int64_t step;
    SoftNodeFailure(int node_, int64_t step_)
        : Error(strcat_("soft failure: node ", node_, " produced NaN at step ", step_)),
          node(node_),
          step(step_) {}
};

// everything that determines a run; two runs with equal configs produce
// byte-identical metrics files and checkpoints
struct RunConfig {
    ModelConfig model;
    Topology topo;
    ScheduleKind schedule = ScheduleKind::one_f_one_b;
    int microbatches = 1;
    int v_stages = 1;
    ShardMode optim = ShardMode::so;
    AdamWConfig adamw;
    uint64_t seed = 0;
    int64_t steps = 10;
    int64_t global_batch = 8;  // instances per step across all dp ranks
    int64_t ckpt_every = 0;    // dual-slot full checkpoints; 0 disables
    int64_t persist_every = 0; // model-only checkpoints; 0 disables
    std::string data_dir;      // preprocessed shards; empty = synthetic tokens
    std::string run_dir;       // metrics and checkpoints land here
    std::vector<InjectedFailure> failures;
    std::vector<int> buffer_nodes;  // spare physical node ids for relaunches
    bool lockstep = true;           // deterministic rank scheduling

    // test hook: clip the byte stream of the full checkpoint written at
    // crash_step, as if power were lost mid-write
    int64_t crash_step = 0;
    int64_t crash_at_byte = -1;

    void validate() const;
};

// process exit codes double as the outcome enum
enum class RunOutcome : int {
    ok = 0,
    config_error = 2,
    soft_failure = 3,
    hard_failure = 4,
    buffers_exhausted = 5,
};

const char* run_outcome_name(RunOutcome o);

struct RunResult {
    RunOutcome outcome = RunOutcome::ok;
    int64_t steps_done = 0;
    int relaunches = 0;
    std::vector<int> failed_nodes;  // in failure order, repeats possible
    double final_loss = 0;
    std::string message;  // single line; empty on success
};

// rank d's [G/DP, C] slice of step's global batch, a pure function of
// (seed, step, row) so every topology slices the same logical batch. Rows are
// counting runs from random starts: learnable, and uniform over the vocab
TensorI synthetic_batch(int64_t vocab, int64_t context, int64_t global_batch, int dp, int dp_rank,
                        uint64_t seed, int64_t step);

std::string metrics_path(const RunConfig& cfg);
std::string checkpoint_root(const RunConfig& cfg);

// the driver: builds the world, runs the job, and on node failure rebuilds it
// with a buffer node promoted, resuming from the newest valid checkpoint
RunResult run_training(const RunConfig& cfg);

}  // namespace optimus

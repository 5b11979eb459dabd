#pragma once

#include <string>
#include <vector>

#include "optimus/comm.hpp"
#include "optimus/tensor.hpp"

namespace optimus {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double peak_lr = 4e-4;
    double min_lr = 4e-5;
    int64_t warmup_steps = 2500;
    int64_t total_steps = 100000;
    double clip_norm = 1.0;
    bool clip_after_warmup_only = true;
    bool round_weights_bf16 = true;  // distributed copy is bf16-rounded after each step

    void validate() const;
};

// linear warmup from 0 to peak, then cosine decay to min; clamps to min past
// total_steps
double lr_at_step(int64_t step, const AdamWConfig& cfg);

// how a parameter replica is laid out across the process grid
enum class ReplicationClass {
    non_expert,  // identical on every DP x EP replica
    expert,      // identical across DP only; each EP rank holds different experts
};

enum class ShardMode { ddp, so, epso };

const char* shard_mode_name(ShardMode m);
ShardMode parse_shard_mode(const std::string& s);

// one parameter tensor on this rank; weight/grad storage stays with the caller
struct ParamSlot {
    std::string name;
    TensorF* weight = nullptr;
    TensorF* grad = nullptr;
    ReplicationClass cls = ReplicationClass::non_expert;
    bool tp_sharded = false;  // each TP rank holds a distinct shard of this tensor
};

struct SliceRange {
    int64_t begin = 0;
    int64_t end = 0;

    int64_t size() const { return end - begin; }
};

// contiguous per-rank slice of a flattened parameter; equal shares with the
// remainder on the last rank
SliceRange shard_slice(int64_t numel, int group_size, int position);

struct ShardPlan {
    ShardMode mode = ShardMode::ddp;
    struct Entry {
        SliceRange own;        // this rank's slice
        bool over_dp_ep = false;  // owning group: false -> DP, true -> fused DP x EP
    };
    std::vector<Entry> entries;  // parallel to the ParamSlot list
};

ShardPlan build_shard_plan(RankCtx& ctx, const std::vector<ParamSlot>& params, ShardMode mode);

// whether this rank's copy of a parameter counts toward the global grad norm
// (replicated copies must be counted exactly once across the world)
bool counts_toward_norm(ShardMode mode, ReplicationClass cls, bool tp_sharded,
                        const RankCoord& coord);

// fp32 master + moments for one owned slice
struct AdamWState {
    std::vector<float> master, exp_avg, exp_avg_sq;
};

// one decoupled-weight-decay step on a slice: wd on the master first, then the
// bias-corrected moment update; all arithmetic in double, moments stored fp32.
// weight_out receives the master, bf16-rounded when round_bf16 is set.
void adamw_update(AdamWState& st, const float* grad, int64_t n, double lr, int64_t step,
                  const AdamWConfig& cfg, float* weight_out, bool round_bf16);

struct StepStats {
    int64_t step = 0;      // index used for this update (0-based)
    double lr = 0;
    double grad_norm = 0;  // global pre-clip norm over synced grads
    double clip_scale = 1.0;
};

// synchronizes gradients (mean), clips by global norm, updates owned slices,
// and re-shares the updated weights so every replica stays bitwise identical
class ShardedOptimizer {
  public:
    ShardedOptimizer(RankCtx& ctx, const AdamWConfig& cfg, std::vector<ParamSlot> params,
                     ShardMode mode);

    StepStats step();

    int64_t state_bytes() const;  // 12 bytes per owned element
    int64_t steps_done() const { return step_count_; }
    const ShardPlan& plan() const { return plan_; }

    // checkpoint access: owned-slice masters and moments, in parameter order
    std::vector<AdamWState>& states() { return states_; }
    void set_step_count(int64_t n) { step_count_ = n; }

  private:
    RankCtx& ctx_;
    AdamWConfig cfg_;
    std::vector<ParamSlot> params_;
    ShardMode mode_;
    ShardPlan plan_;
    std::vector<AdamWState> states_;
    int64_t step_count_ = 0;
};

// per-rank byte breakdown of the 16P training-state budget under a sharding
// mode; P split by replication class since they shard differently
struct MemoryReport {
    double weights_bytes = 0, grads_bytes = 0, master_bytes = 0, optim_bytes = 0;
    double total_bytes = 0;
    double capacity_bytes = 0;
    bool feasible = true;
};

MemoryReport memory_report(int64_t p_expert, int64_t p_non_expert, ShardMode mode, int dp, int ep,
                           double capacity_gb = 64.0);
std::string memory_report_json(const MemoryReport& r);

}  // namespace optimus

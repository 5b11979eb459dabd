#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "optimus/comm.hpp"
#include "optimus/optim.hpp"
#include "optimus/tensor.hpp"

namespace optimus {

// thrown by an injected mid-write crash; everything already flushed stays on
// disk, everything after the crash point is lost
struct CrashError : Error {
    using Error::Error;
};

// simulated power loss for checkpoint writes: every byte a commit writes is
// counted through one shared plan, and whichever writer crosses `at_byte`
// dies on the spot. Offsets are deterministic under lockstep worlds.
struct CrashPlan {
    int64_t at_byte = -1;  // -1 never fires
    std::atomic<int64_t> written{0};
};

// ---- record files ------------------------------------------------------------------

// named tensors in one binary file: a fixed header, one length-prefixed record
// per tensor, and a trailing crc32 over everything before the footer
enum class RecDtype : uint32_t { f32 = 0, bf16 = 1 };

struct TensorRecord {
    std::string name;
    RecDtype dtype = RecDtype::f32;
    std::vector<int64_t> dims;
    std::string bytes;  // little-endian payload

    int64_t numel() const;
    std::vector<float> as_f32() const;  // widens bf16 payloads
};

// accumulates records in memory and writes the whole file on finish, so an
// injected crash clips the byte stream at an exact offset
class RecordFileWriter {
  public:
    RecordFileWriter(std::string path, CrashPlan* crash = nullptr);

    void add_f32(const std::string& name, const std::vector<int64_t>& dims, const float* p,
                 int64_t n);
    void add_bf16(const std::string& name, const std::vector<int64_t>& dims, const float* p,
                  int64_t n);  // rounds to nearest even

    struct Written {
        int64_t bytes = 0;  // total file size including the footer
        uint32_t crc = 0;   // checksum stored in the footer
    };
    Written finish();  // write + fsync + close

  private:
    std::string path_;
    CrashPlan* crash_;
    uint32_t count_ = 0;
    std::string body_;
};

// reads and fully validates one record file (magic, version, bounds, checksum)
std::vector<TensorRecord> read_record_file(const std::string& path);

// ---- shard layout ------------------------------------------------------------------

// model shards are the distinct (pp, ep, tp) coordinates; the dp axis holds
// replicas of each shard
int model_shard_count(const Topology& t);
int model_shard_index(const Topology& t, const RankCoord& c);

// which dp replica writes a given model shard: round-robin so the write load
// spreads evenly across data-parallel peers
int scattered_writer(int model_shard, int dp);

// ---- checkpoint manifests ----------------------------------------------------------

struct CkptShardStat {
    std::string file;  // basename within the checkpoint directory
    int model_shard = 0;
    int writer_rank = 0;
    int64_t bytes = 0;  // full file size including the footer
    uint32_t crc = 0;   // checksum stored in the file footer
};

struct CkptManifest {
    int64_t step = -1;
    int64_t opt_steps = 0;
    bool full = true;  // full training state vs weights-only
    std::string timestamp;
    std::string mode;  // optimizer sharding mode; empty for weights-only
    int dp = 1, tp = 1, ep = 1, pp = 1;
    std::vector<CkptShardStat> shards;
};

CkptManifest load_ckpt_manifest(const std::string& path);

// ---- checkpoint set ----------------------------------------------------------------

struct ResumePoint {
    enum class Kind { none, full_slot, model_only };
    Kind kind = Kind::none;
    int slot = 0;      // meaningful for full_slot
    int64_t step = -1;
    std::string dir;
};

// two rotating full-state slots plus an append-only directory of weights-only
// checkpoints. A slot is committed by its marker file, which is written last
// (temp file, fsync, rename), so a crash at any byte offset leaves either the
// old slot intact or the new slot fully valid -- never a half-trusted one.
class CheckpointSet {
  public:
    explicit CheckpointSet(std::string root);

    const std::string& root() const { return root_; }
    std::string slot_dir(int slot) const;            // slot is 1 or 2
    std::string persistent_dir(int64_t step) const;  // weights-only, never rotated

    bool slot_valid(int slot) const;   // marker present and every checksum holds
    int64_t slot_step(int slot) const; // -1 when the slot is not valid
    int pick_write_slot() const;       // the invalid slot, else the older one

    // collective over the whole world. Full state per model shard: bf16
    // weights, fp32 master, fp32 first and second moments, bf16 grads --
    // 16 bytes per parameter. Optimizer slices owned elsewhere in the group
    // are gathered so a shard's file is complete on its own. Returns the
    // slot written.
    int write_full(RankCtx& ctx, const std::vector<ParamSlot>& params, ShardedOptimizer& opt,
                   int64_t step, CrashPlan* crash = nullptr);

    // collective; bf16 weights only (2 bytes per parameter). Returns the
    // directory written.
    std::string write_model_only(RankCtx& ctx, const std::vector<ParamSlot>& params, int64_t step,
                                 CrashPlan* crash = nullptr);

    // newest valid full slot, else newest valid weights-only checkpoint,
    // else a cold start; checksums are verified before a slot is chosen
    ResumePoint find_resume() const;

    // collective. Each shard file is read by exactly one rank and replicated
    // to peers; weights and grads land in the param tensors, masters and
    // moments in the optimizer's owned slices, and the step counter is
    // restored. Returns how many shard files this rank read.
    int restore_full(RankCtx& ctx, const std::vector<ParamSlot>& params, ShardedOptimizer& opt,
                     int slot) const;

    // collective; weights only, from a slot or a weights-only directory.
    // Construct a fresh optimizer afterwards to resume with clean state.
    int restore_model_only(RankCtx& ctx, const std::vector<ParamSlot>& params,
                           const std::string& dir) const;

  private:
    std::string root_;
};

// ---- failure handling --------------------------------------------------------------

// scans the local loss and gradients for NaN/Inf and reduces the verdict so
// every rank agrees; returns the flagged physical node id, or -1 when healthy.
// Call before any checkpoint write so poisoned state never reaches disk.
int detect_soft_failure(RankCtx& ctx, double loss, const std::vector<ParamSlot>& params);

// two interchangeable ways to hand one rank's tensor to the whole group;
// both leave every member bitwise identical to the root. zero_allreduce
// requires t to be pre-shaped identically on every member.
enum class ReplicateVia { broadcast, zero_allreduce };
void replicate_tensor(RankCtx& ctx, const ProcessGroup& group, int root, TensorF& t,
                      ReplicateVia via);

enum class FailureKind { hard, soft_nan };

const char* failure_kind_name(FailureKind k);
FailureKind parse_failure_kind(const std::string& s);

// one scripted fault for tests and drills
struct InjectedFailure {
    int64_t step = 0;
    int node = 0;
    FailureKind kind = FailureKind::hard;
};

std::vector<InjectedFailure> load_failure_plan(const std::string& path);
void save_failure_plan(const std::string& path, const std::vector<InjectedFailure>& plan);

// cluster roster: physical node ids serving each slot, spares in promotion
// order, and nodes retired by earlier failures
struct NodePlan {
    std::vector<int> active;
    std::vector<int> buffers;
    std::vector<int> excluded;

    void validate() const;  // non-empty active, no node listed twice
};

// retires the failed node and promotes the first buffer into its slot, so the
// relaunched world keeps an identical topology; nullopt when no spare is left
std::optional<NodePlan> relaunch_plan(const NodePlan& cur, int failed_node);

}  // namespace optimus

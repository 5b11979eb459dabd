#pragma once

#include <algorithm>

#include "optimus/comm.hpp"
#include "optimus/kernels.hpp"
#include "optimus/moe.hpp"

namespace optimus {

// ---- tensor-parallel linear primitives ---------------------------------------------

// column-parallel: w_shard holds this rank's output columns, [in, out/TP].
// Every rank consumes the full input, so the forward needs no communication;
// the input gradient sums the per-shard contributions across TP.
TensorF tp_col_linear(const TensorF& x, const TensorF& w_shard);
TensorF tp_col_linear_input_grad(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& dy,
                                 const TensorF& w_shard);

// row-parallel: w_shard holds this rank's input rows, [in/TP, out], and x_shard
// the matching slice of the features. Partial products are allreduced in the
// forward; the input gradient stays local.
TensorF tp_row_linear(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& x_shard,
                      const TensorF& w_shard);
TensorF tp_row_linear_input_grad(const TensorF& dy, const TensorF& w_shard);

// deterministic shard initializers: element (r,c) of the logical [in, out]
// matrix always draws the same normal sample, so any TP width materializes
// slices of one logical parameter
TensorF init_full(std::vector<int64_t> shape, uint64_t seed, uint64_t tag, double stddev);
TensorF init_col_shard(int64_t in, int64_t out, int tp, int tp_rank, uint64_t seed, uint64_t tag,
                       double stddev);
TensorF init_row_shard(int64_t in, int64_t out, int tp, int tp_rank, uint64_t seed, uint64_t tag,
                       double stddev);

// ---- activation retention ledger ----------------------------------------------------

// counts bytes of activations a rank is holding for later backwards; peak is
// what a schedule comparison cares about
struct ActLedger {
    int64_t live = 0;
    int64_t peak = 0;

    void charge(int64_t b) {
        live += b;
        peak = std::max(peak, live);
    }
    void release(int64_t b) { live -= b; }
};

namespace detail {
inline void led_charge(ActLedger* led, int64_t b) {
    if (led) led->charge(b);
}
inline void led_release(ActLedger* led, int64_t b) {
    if (led) led->release(b);
}
}  // namespace detail

// ---- rmsnorm block -------------------------------------------------------------------

// checkpointing drops the cached per-row statistics and recomputes them in the
// backward from the stored input; the arithmetic is identical either way, so
// gradients stay bitwise equal
struct NormRec {
    TensorF x;
    std::vector<double> inv;  // 1/rms per row (empty when checkpointed)
    std::vector<double> var;  // mean-square + eps per row
    bool ckpt = false;
    int64_t held = 0;
};

TensorF norm_forward(const TensorF& x, const TensorF& w, bool ckpt, NormRec& rec, ActLedger* led);
// returns dx; accumulates into dw
TensorF norm_backward(const TensorF& w, TensorF& dw, NormRec& rec, const TensorF& dy,
                      ActLedger* led);

// ---- causal multi-head attention (TP over heads) -------------------------------------

// local shards: wq/wk/wv are column-parallel [H, heads_local*D], wo is
// row-parallel [heads_local*D, H]; heads_local = heads / TP
struct AttnParams {
    TensorF wq, wk, wv, wo;
};

struct AttnGrads {
    TensorF wq, wk, wv, wo;
};

struct AttnRec {
    TensorF x;            // [S, H]
    TensorF q, k, v;      // [S, heads_local*D]
    TensorF probs;        // [B*heads_local, C, C], rows are causal distributions
    TensorF ctx;          // [S, heads_local*D]
    bool ckpt = false;
    int64_t held = 0;
};

// x is [S, H] with S = B*seq; sequences are contiguous row blocks of length seq
TensorF attention_forward(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& x,
                          const AttnParams& w, int64_t head_size, int64_t seq, bool ckpt,
                          AttnRec& rec, ActLedger* led);
// returns dx; accumulates into g
TensorF attention_backward(RankCtx& ctx, const ProcessGroup& tp_group, const AttnParams& w,
                           int64_t head_size, int64_t seq, AttnRec& rec, const TensorF& dy,
                           AttnGrads& g, ActLedger* led);

// ---- dense SiLU-GLU MLP (TP over the intermediate dim) -------------------------------

struct MlpParams {
    TensorF gate, up;  // column-parallel [H, I/TP]
    TensorF down;      // row-parallel [I/TP, H]
};

struct MlpGrads {
    TensorF gate, up, down;
};

struct MlpRec {
    TensorF x, g, u, h;  // input, gate/up pre-activations, gated product
    int64_t held = 0;
};

TensorF dense_mlp_forward(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& x,
                          const MlpParams& w, MlpRec& rec, ActLedger* led);
TensorF dense_mlp_backward(RankCtx& ctx, const ProcessGroup& tp_group, const MlpParams& w,
                           MlpRec& rec, const TensorF& dy, MlpGrads& g, ActLedger* led);

// ---- sparse MoE block adapter ---------------------------------------------------------

struct MoeParamGrads {
    TensorF router, gate, up, down;
};

struct MoeRec {
    TensorF x;                // [S, H]
    FastMoeState<float> st;   // dropped when checkpointed, rebuilt in backward
    double aux = 0;           // balancing loss of this invocation
    bool ckpt = false;
    int64_t held = 0;
};

int64_t moe_state_bytes(const FastMoeState<float>& st);

// running tally of tokens routed to each local expert, summed over block
// invocations until reset; feeds routing diagnostics in the training metrics
struct ExpertTally {
    std::vector<int64_t> tokens;  // [NR], sized on first accumulate
    int64_t calls = 0;

    void accumulate(const TensorI& token_counts);
    void reset();
};

// expert weights are replicated across TP, so every TP peer runs the identical
// computation; EP collectives happen inside fast_moe
TensorF moe_block_forward(RankCtx& ctx, const ProcessGroup& ep_group, const TensorF& x,
                          const ExpertWeights<float>& w, const MoeConfig& cfg, bool fur,
                          bool ckpt, MoeRec& rec, ActLedger* led, ExpertTally* tally = nullptr);
TensorF moe_block_backward(RankCtx& ctx, const ProcessGroup& ep_group,
                           const ExpertWeights<float>& w, const MoeConfig& cfg, bool fur,
                           double aux_coeff, MoeRec& rec, const TensorF& dy, MoeParamGrads& g,
                           ActLedger* led);

}  // namespace optimus

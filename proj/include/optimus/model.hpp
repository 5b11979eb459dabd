#pragma once

#include <string>
#include <vector>

#include "optimus/blocks.hpp"
#include "optimus/optim.hpp"
#include "optimus/schedule.hpp"

namespace optimus {

// which block types re-derive their internals in the backward instead of
// keeping them resident between the passes
struct SacPolicy {
    bool checkpoint_norm = false;
    bool checkpoint_attention = false;
    bool checkpoint_moe = false;

    bool any() const { return checkpoint_norm || checkpoint_attention || checkpoint_moe; }
};

struct ModelConfig {
    int64_t layers = 2;
    int64_t hidden = 64;
    int64_t heads = 4;
    int64_t head_size = 16;
    int64_t intermediate = 128;
    int64_t experts = 0;  // 0 = dense MLP in every layer
    int64_t top_k = 0;
    int64_t vocab = 50304;
    int64_t context = 4096;
    double aux_loss_coeff = 0.01;
    bool normalize_topk = false;
    bool force_uniform_routing = false;  // test hook: round-robin instead of learned routing
    SacPolicy sac{};

    bool dense() const { return experts == 0; }
    void validate() const;
    MoeConfig moe_config(int ep) const;
};

// named configurations; unknown names raise ConfigError
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

struct ParamCount {
    int64_t total = 0;
    int64_t active = 0;  // what one token actually touches
};

ParamCount count_params(const ModelConfig& cfg);

// contiguous layer span of pipeline chunk `chunk` when the stack is cut into
// n_chunks pieces; spans may be empty when layers < n_chunks
SliceRange chunk_layer_range(int64_t layers, int n_chunks, int chunk);

// ---- per-rank parameter storage --------------------------------------------------------

struct LayerParams {
    TensorF norm1_w, norm2_w;    // rmsnorm gains, init 1.0
    AttnParams attn;             // TP shards
    MlpParams mlp;               // dense models
    ExpertWeights<float> moe;    // MoE models (router + this EP rank's experts)
};

struct LayerGrads {
    TensorF norm1_w, norm2_w;
    AttnGrads attn;
    MlpGrads mlp;
    MoeParamGrads moe;
};

struct ChunkParams {
    int chunk_id = 0;
    SliceRange layer_span{};     // global layer indices [begin, end)
    bool has_embed = false;      // first chunk owns the embedding
    bool has_head = false;       // last chunk owns the final norm and lm head
    TensorF embed;               // [vocab, hidden]
    TensorF final_norm_w;        // [hidden]
    TensorF head;                // [hidden, vocab]
    std::vector<LayerParams> layers;
};

struct ChunkGrads {
    TensorF embed, final_norm_w, head;
    std::vector<LayerGrads> layers;
};

// the slice of a transformer one rank holds: one chunk per virtual pipeline
// stage, TP/EP shards inside each layer. Construction is deterministic from
// (config, seed): every topology materializes slices of the same logical
// parameters.
class Model {
  public:
    Model(const ModelConfig& cfg, const Topology& topo, const RankCoord& coord, uint64_t seed,
          int v_stages = 1);

    const ModelConfig& config() const { return cfg_; }
    const MoeConfig& moe_config() const { return moe_cfg_; }
    int n_chunks() const { return n_chunks_; }
    int v_stages() const { return v_; }
    // index into chunks/grads, or -1 when this rank does not own the chunk
    int local_chunk(int chunk_id) const;

    // stable slot order shared by all ranks of a pipeline stage
    std::vector<ParamSlot> param_slots();
    void zero_grads();
    void scale_grads(float s);

    std::vector<ChunkParams> chunks;
    std::vector<ChunkGrads> grads;

    // routed-token tally across MoE invocations; the training loop resets it
    // per step and reads it for the routing fields of the metrics line
    ExpertTally routing_tally;

  private:
    ModelConfig cfg_;
    Topology topo_;
    RankCoord coord_;
    MoeConfig moe_cfg_;
    int v_ = 1;
    int n_chunks_ = 1;
};

// ---- activation records and the chunk-level passes -------------------------------------

struct EmbedRec {
    TensorI tokens;
    int64_t held = 0;
};

struct LossRec {
    TensorF probs;   // [B*C, vocab] softmax rows
    TensorI tokens;
    double ce = 0;
    int64_t held = 0;
};

struct LayerRec {
    NormRec n1;
    AttnRec at;
    NormRec n2;
    MlpRec mlp;
    MoeRec moe;
};

struct ChunkRec {
    EmbedRec emb;
    std::vector<LayerRec> layers;
    NormRec fin;
    TensorF head_in;  // final-norm output feeding the lm head
    int64_t head_held = 0;
    LossRec loss;
    double aux = 0;  // sum of this chunk's per-layer balancing losses
};

// runs one chunk's blocks for one microbatch. The embedding chunk reads
// mb_tokens and ignores x; the head chunk returns logits [B*C, vocab]; other
// chunks return hidden states [B*C, H].
TensorF chunk_forward(RankCtx& ctx, Model& m, int local_idx, const TensorF& x,
                      const TensorI& mb_tokens, int64_t seq, ChunkRec& rec, ActLedger* led);
// dy is dlogits for the head chunk; returns dx for the chunk input
TensorF chunk_backward(RankCtx& ctx, Model& m, int local_idx, const TensorF& dy, int64_t seq,
                       ChunkRec& rec, ActLedger* led);

// next-token cross-entropy, mean over the B*(C-1) predicted positions
double ce_loss_forward(const TensorF& logits, const TensorI& tokens, LossRec& rec, ActLedger* led);
TensorF ce_loss_backward(LossRec& rec, ActLedger* led);

// ---- whole-model entry points -----------------------------------------------------------

struct ForwardLossResult {
    double ce = 0;
    double aux = 0;     // summed over layers
    TensorF logits;
};

// forward only, no gradients; needs every chunk resident (single pipeline stage)
ForwardLossResult forward_loss(RankCtx& ctx, Model& m, const TensorI& batch);

struct PpLossParts {
    double ce_sum = 0;   // sum over microbatches of per-microbatch mean CE
    double aux_sum = 0;  // sum over microbatches of this rank's layer aux losses
};

// executes the schedule's per-rank event list: forwards/backwards per
// microbatch with activations and gradients moving between stages as p2p mail.
// Gradients are accumulated over microbatches and scaled by 1/M at the end.
PpLossParts pp_forward_backward(RankCtx& ctx, Model& m, const PipelineSchedule& sched,
                                const TensorI& batch, ActLedger* led = nullptr);

struct StepMetrics {
    int64_t step = 0;
    double loss = 0;  // ce + aux_loss_coeff * aux
    double ce = 0;
    double aux = 0;
    double grad_norm = 0;
    double lr = 0;
    double tokens_per_s = 0;
};

// one JSON line: {"step":..,"loss":..,"aux_loss":..,"grad_norm":..,"lr":..,"tokens_per_s":..}
std::string metrics_jsonl(const StepMetrics& m);

// forward+backward over the schedule, then the sharded optimizer step; loss
// figures are averaged over all replicas for logging
StepMetrics train_step(RankCtx& ctx, Model& m, ShardedOptimizer& opt,
                       const PipelineSchedule& sched, const TensorI& batch,
                       ActLedger* led = nullptr);

}  // namespace optimus

#include "optimus/blocks.hpp"

#include <cmath>

namespace optimus {

// ---- tensor-parallel linear primitives ---------------------------------------------

TensorF tp_col_linear(const TensorF& x, const TensorF& w_shard) {
    return matmul(x, w_shard);
}

TensorF tp_col_linear_input_grad(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& dy,
                                 const TensorF& w_shard) {
    return allreduce(ctx, tp_group, matmul_nt(dy, w_shard));
}

TensorF tp_row_linear(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& x_shard,
                      const TensorF& w_shard) {
    return allreduce(ctx, tp_group, matmul(x_shard, w_shard));
}

TensorF tp_row_linear_input_grad(const TensorF& dy, const TensorF& w_shard) {
    return matmul_nt(dy, w_shard);
}

TensorF init_full(std::vector<int64_t> shape, uint64_t seed, uint64_t tag, double stddev) {
    return normal_init<float>(std::move(shape), seed, tag, stddev);
}

TensorF init_col_shard(int64_t in, int64_t out, int tp, int tp_rank, uint64_t seed, uint64_t tag,
                       double stddev) {
    check(out % tp == 0, strcat_("col shard: output dim ", out, " not divisible by tp ", tp));
    const int64_t w = out / tp;
    TensorF t({in, w});
    for (int64_t r = 0; r < in; ++r)
        for (int64_t c = 0; c < w; ++c)
            t(r, c) = (float)(stddev * normal_at(seed, tag, (uint64_t)(r * out + tp_rank * w + c)));
    return t;
}

TensorF init_row_shard(int64_t in, int64_t out, int tp, int tp_rank, uint64_t seed, uint64_t tag,
                       double stddev) {
    check(in % tp == 0, strcat_("row shard: input dim ", in, " not divisible by tp ", tp));
    const int64_t h = in / tp;
    TensorF t({h, out});
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < out; ++c)
            t(r, c) = (float)(stddev * normal_at(seed, tag, (uint64_t)((tp_rank * h + r) * out + c)));
    return t;
}

// ---- rmsnorm block -------------------------------------------------------------------

namespace {

// shared by forward, cached backward, and checkpointed recompute so every path
// produces identical doubles
void norm_row_stats(const float* xp, int64_t h, double& var, double& inv) {
    double ss = 0.0;
    for (int64_t j = 0; j < h; ++j) ss += (double)xp[j] * (double)xp[j];
    var = ss / (double)h + kRmsNormEps;
    inv = 1.0 / std::sqrt(var);
}

}  // namespace

TensorF norm_forward(const TensorF& x, const TensorF& w, bool ckpt, NormRec& rec, ActLedger* led) {
    check(x.rank() == 2 && w.rank() == 1 && x.dim(1) == w.dim(0), "norm: x [R,H], w [H]");
    const int64_t rows = x.dim(0), h = x.dim(1);
    TensorF out({rows, h});
    rec.ckpt = ckpt;
    rec.x = x;
    if (!ckpt) {
        rec.inv.resize((size_t)rows);
        rec.var.resize((size_t)rows);
    }
    for (int64_t i = 0; i < rows; ++i) {
        const float* xp = x.data() + i * h;
        double var, inv;
        norm_row_stats(xp, h, var, inv);
        if (!ckpt) {
            rec.inv[(size_t)i] = inv;
            rec.var[(size_t)i] = var;
        }
        float* op = out.data() + i * h;
        for (int64_t j = 0; j < h; ++j) op[j] = (float)((double)xp[j] * inv * (double)w(j));
    }
    rec.held = (int64_t)rec.x.bytes() + (int64_t)((rec.inv.size() + rec.var.size()) * sizeof(double));
    detail::led_charge(led, rec.held);
    return out;
}

TensorF norm_backward(const TensorF& w, TensorF& dw, NormRec& rec, const TensorF& dy,
                      ActLedger* led) {
    const TensorF& x = rec.x;
    check(x.same_shape(dy), "norm backward: shape mismatch");
    const int64_t rows = x.dim(0), h = x.dim(1);
    TensorF dx({rows, h});
    for (int64_t i = 0; i < rows; ++i) {
        const float* xp = x.data() + i * h;
        const float* dp = dy.data() + i * h;
        double var, inv;
        if (rec.ckpt) {
            norm_row_stats(xp, h, var, inv);
        } else {
            var = rec.var[(size_t)i];
            inv = rec.inv[(size_t)i];
        }
        double dot = 0.0;  // sum_j dy_j * w_j * x_j
        for (int64_t j = 0; j < h; ++j) dot += (double)dp[j] * (double)w(j) * (double)xp[j];
        float* op = dx.data() + i * h;
        for (int64_t j = 0; j < h; ++j) {
            op[j] = (float)((double)dp[j] * (double)w(j) * inv -
                            (double)xp[j] * dot * inv / (var * (double)h));
            dw(j) += (float)((double)dp[j] * (double)xp[j] * inv);
        }
    }
    detail::led_release(led, rec.held);
    rec = NormRec{};
    return dx;
}

// ---- causal multi-head attention ------------------------------------------------------

namespace {

// the full local-head computation up to the context rows; forward and
// checkpointed backward both run exactly this
void attn_compute(const TensorF& x, const AttnParams& w, int64_t head_size, int64_t seq,
                  TensorF& q, TensorF& k, TensorF& v, TensorF& probs, TensorF& ctx_rows) {
    const int64_t s = x.dim(0);
    const int64_t hd = w.wq.dim(1);
    const int64_t heads = hd / head_size;
    const int64_t b = s / seq;
    const double scale = 1.0 / std::sqrt((double)head_size);

    q = matmul(x, w.wq);
    k = matmul(x, w.wk);
    v = matmul(x, w.wv);
    probs = TensorF({b * heads, seq, seq});
    ctx_rows = TensorF({s, hd});
    std::vector<double> sc((size_t)seq);
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t hi = 0; hi < heads; ++hi) {
            const int64_t bh = bi * heads + hi;
            for (int64_t i = 0; i < seq; ++i) {
                const float* qp = q.data() + (bi * seq + i) * hd + hi * head_size;
                double mx = -1e300;
                for (int64_t j = 0; j <= i; ++j) {
                    const float* kp = k.data() + (bi * seq + j) * hd + hi * head_size;
                    double dot = 0.0;
                    for (int64_t d = 0; d < head_size; ++d) dot += (double)qp[d] * (double)kp[d];
                    sc[(size_t)j] = dot * scale;
                    mx = std::max(mx, sc[(size_t)j]);
                }
                double sum = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    sc[(size_t)j] = std::exp(sc[(size_t)j] - mx);
                    sum += sc[(size_t)j];
                }
                float* cp = ctx_rows.data() + (bi * seq + i) * hd + hi * head_size;
                for (int64_t j = 0; j <= i; ++j) {
                    const float p = (float)(sc[(size_t)j] / sum);
                    probs(bh, i, j) = p;
                    const float* vp = v.data() + (bi * seq + j) * hd + hi * head_size;
                    for (int64_t d = 0; d < head_size; ++d) cp[d] += p * vp[d];
                }
            }
        }
    }
}

int64_t attn_rec_bytes(const AttnRec& rec) {
    return (int64_t)(rec.x.bytes() + rec.q.bytes() + rec.k.bytes() + rec.v.bytes() +
                     rec.probs.bytes() + rec.ctx.bytes());
}

}  // namespace

TensorF attention_forward(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& x,
                          const AttnParams& w, int64_t head_size, int64_t seq, bool ckpt,
                          AttnRec& rec, ActLedger* led) {
    check(x.rank() == 2, "attention: x must be [S,H]");
    check(x.dim(0) % seq == 0, strcat_("attention: rows ", x.dim(0), " not a multiple of seq ", seq));
    check(w.wq.dim(1) % head_size == 0, "attention: local width must hold whole heads");
    rec.ckpt = ckpt;
    rec.x = x;
    TensorF q, k, v, probs, ctx_rows;
    attn_compute(x, w, head_size, seq, q, k, v, probs, ctx_rows);
    TensorF out = tp_row_linear(ctx, tp_group, ctx_rows, w.wo);
    if (!ckpt) {
        rec.q = std::move(q);
        rec.k = std::move(k);
        rec.v = std::move(v);
        rec.probs = std::move(probs);
        rec.ctx = std::move(ctx_rows);
        rec.held = attn_rec_bytes(rec);
    } else {
        rec.held = (int64_t)rec.x.bytes();
    }
    detail::led_charge(led, rec.held);
    return out;
}

TensorF attention_backward(RankCtx& ctx, const ProcessGroup& tp_group, const AttnParams& w,
                           int64_t head_size, int64_t seq, AttnRec& rec, const TensorF& dy,
                           AttnGrads& g, ActLedger* led) {
    const TensorF& x = rec.x;
    const int64_t s = x.dim(0);
    const int64_t hd = w.wq.dim(1);
    const int64_t heads = hd / head_size;
    const int64_t b = s / seq;
    const double scale = 1.0 / std::sqrt((double)head_size);

    TensorF q, k, v, probs, ctx_rows;
    if (rec.ckpt) {
        attn_compute(x, w, head_size, seq, q, k, v, probs, ctx_rows);
    } else {
        q = std::move(rec.q);
        k = std::move(rec.k);
        v = std::move(rec.v);
        probs = std::move(rec.probs);
        ctx_rows = std::move(rec.ctx);
    }

    // row-parallel output projection
    TensorF dctx = tp_row_linear_input_grad(dy, w.wo);
    add_inplace(g.wo, matmul_tn(ctx_rows, dy));

    TensorF dq({s, hd}), dk({s, hd}), dv({s, hd});
    std::vector<double> dpr((size_t)seq), ds((size_t)seq);
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t hi = 0; hi < heads; ++hi) {
            const int64_t bh = bi * heads + hi;
            for (int64_t i = 0; i < seq; ++i) {
                const float* dcp = dctx.data() + (bi * seq + i) * hd + hi * head_size;
                double dot = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    const float* vp = v.data() + (bi * seq + j) * hd + hi * head_size;
                    double acc = 0.0;
                    for (int64_t d = 0; d < head_size; ++d) acc += (double)dcp[d] * (double)vp[d];
                    dpr[(size_t)j] = acc;
                    const double p = (double)probs(bh, i, j);
                    dot += p * acc;
                    float* dvp = dv.data() + (bi * seq + j) * hd + hi * head_size;
                    for (int64_t d = 0; d < head_size; ++d) dvp[d] += (float)p * dcp[d];
                }
                // softmax backward over the causal prefix, then the score factors
                const float* qp = q.data() + (bi * seq + i) * hd + hi * head_size;
                float* dqp = dq.data() + (bi * seq + i) * hd + hi * head_size;
                for (int64_t j = 0; j <= i; ++j) {
                    ds[(size_t)j] = (double)probs(bh, i, j) * (dpr[(size_t)j] - dot) * scale;
                    const float* kp = k.data() + (bi * seq + j) * hd + hi * head_size;
                    float* dkp = dk.data() + (bi * seq + j) * hd + hi * head_size;
                    for (int64_t d = 0; d < head_size; ++d) {
                        dqp[d] += (float)(ds[(size_t)j] * (double)kp[d]);
                        dkp[d] += (float)(ds[(size_t)j] * (double)qp[d]);
                    }
                }
            }
        }
    }

    add_inplace(g.wq, matmul_tn(x, dq));
    add_inplace(g.wk, matmul_tn(x, dk));
    add_inplace(g.wv, matmul_tn(x, dv));

    // one column-parallel input reduction for all three projections
    TensorF dx_local = matmul_nt(dq, w.wq);
    add_inplace(dx_local, matmul_nt(dk, w.wk));
    add_inplace(dx_local, matmul_nt(dv, w.wv));
    TensorF dx = allreduce(ctx, tp_group, dx_local);

    detail::led_release(led, rec.held);
    rec = AttnRec{};
    return dx;
}

// ---- dense SiLU-GLU MLP ---------------------------------------------------------------

TensorF dense_mlp_forward(RankCtx& ctx, const ProcessGroup& tp_group, const TensorF& x,
                          const MlpParams& w, MlpRec& rec, ActLedger* led) {
    rec.x = x;
    rec.g = tp_col_linear(x, w.gate);
    rec.u = tp_col_linear(x, w.up);
    rec.h = silu_glu(rec.g, rec.u);
    TensorF out = tp_row_linear(ctx, tp_group, rec.h, w.down);
    rec.held = (int64_t)(rec.x.bytes() + rec.g.bytes() + rec.u.bytes() + rec.h.bytes());
    detail::led_charge(led, rec.held);
    return out;
}

TensorF dense_mlp_backward(RankCtx& ctx, const ProcessGroup& tp_group, const MlpParams& w,
                           MlpRec& rec, const TensorF& dy, MlpGrads& g, ActLedger* led) {
    TensorF dh = tp_row_linear_input_grad(dy, w.down);
    add_inplace(g.down, matmul_tn(rec.h, dy));
    auto [dg, du] = silu_glu_backward(rec.g, rec.u, dh);
    add_inplace(g.gate, matmul_tn(rec.x, dg));
    add_inplace(g.up, matmul_tn(rec.x, du));
    TensorF dx_local = matmul_nt(dg, w.gate);
    add_inplace(dx_local, matmul_nt(du, w.up));
    TensorF dx = allreduce(ctx, tp_group, dx_local);
    detail::led_release(led, rec.held);
    rec = MlpRec{};
    return dx;
}

// ---- sparse MoE block adapter -----------------------------------------------------------

int64_t moe_state_bytes(const FastMoeState<float>& st) {
    const RoutingArtifacts& a = st.art;
    int64_t n = 0;
    n += (int64_t)(st.input_local.bytes() + st.gathered.bytes());
    n += (int64_t)(st.routing.logits.bytes() + st.routing.probs.bytes() +
                   st.routing.weights.bytes() + st.routing.indices.bytes());
    n += (int64_t)(st.weights_g.bytes() + st.indices_g.bytes());
    n += (int64_t)(a.token_counts.bytes() + a.partial_token_counts.bytes() + a.partial_cum.bytes() +
                   a.cum_token_counts.bytes() + a.expert_counts.bytes() +
                   a.cum_expert_counts.bytes() + a.input_indices.bytes() +
                   a.output_indices.bytes() + a.selected_k.bytes() + a.counter.bytes());
    n += (int64_t)(st.mlp.mlp_in.bytes() + st.mlp.gate_out.bytes() + st.mlp.up_out.bytes() +
                   st.mlp.mul_out.bytes());
    n += (int64_t)(st.mlp_out.bytes() + st.mean_probs.bytes() + st.sel_counts.bytes());
    return n;
}

void ExpertTally::accumulate(const TensorI& token_counts) {
    if (tokens.size() != (size_t)token_counts.numel()) tokens.assign((size_t)token_counts.numel(), 0);
    for (int64_t e = 0; e < token_counts.numel(); ++e) tokens[(size_t)e] += token_counts.data()[e];
    ++calls;
}

void ExpertTally::reset() {
    tokens.assign(tokens.size(), 0);
    calls = 0;
}

TensorF moe_block_forward(RankCtx& ctx, const ProcessGroup& ep_group, const TensorF& x,
                          const ExpertWeights<float>& w, const MoeConfig& cfg, bool fur,
                          bool ckpt, MoeRec& rec, ActLedger* led, ExpertTally* tally) {
    rec.ckpt = ckpt;
    TensorF out = fast_moe_forward<float>(ctx, ep_group, x, w, cfg, fur, &rec.st);
    rec.aux = moe_aux_loss(rec.st);
    if (tally) tally->accumulate(rec.st.art.token_counts);
    if (ckpt) {
        rec.x = x;
        rec.st = FastMoeState<float>{};
        rec.held = (int64_t)rec.x.bytes();
    } else {
        rec.held = moe_state_bytes(rec.st);
    }
    detail::led_charge(led, rec.held);
    return out;
}

TensorF moe_block_backward(RankCtx& ctx, const ProcessGroup& ep_group,
                           const ExpertWeights<float>& w, const MoeConfig& cfg, bool fur,
                           double aux_coeff, MoeRec& rec, const TensorF& dy, MoeParamGrads& g,
                           ActLedger* led) {
    FastMoeState<float> rebuilt;
    const FastMoeState<float>* st = &rec.st;
    if (rec.ckpt) {
        // replay the forward (including its EP collectives) from the stored input
        fast_moe_forward<float>(ctx, ep_group, rec.x, w, cfg, fur, &rebuilt);
        st = &rebuilt;
    }
    TensorF apg = moe_aux_probs_grad(*st, aux_coeff);
    MoeGrads<float> mg = fast_moe_backward<float>(ctx, ep_group, *st, w, dy, &apg);
    add_inplace(g.router, mg.router);
    add_inplace(g.gate, mg.gate);
    add_inplace(g.up, mg.up);
    add_inplace(g.down, mg.down);
    detail::led_release(led, rec.held);
    rec = MoeRec{};
    return std::move(mg.input);
}

}  // namespace optimus

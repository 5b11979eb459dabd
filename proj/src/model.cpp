#include "optimus/model.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

namespace optimus {

// ---- configuration -----------------------------------------------------------------

void ModelConfig::validate() const {
    check(layers >= 1 && hidden >= 1 && heads >= 1 && head_size >= 1 && intermediate >= 1,
          "model: dimensions must be positive");
    check(vocab >= 2, strcat_("model: vocab ", vocab, " is too small"));
    check(context >= 2, strcat_("model: context ", context, " is too small"));
    check(experts >= 0, "model: experts cannot be negative");
    if (experts > 0)
        check(top_k >= 1 && top_k <= experts,
              strcat_("model: top_k ", top_k, " out of range for ", experts, " experts"));
    check(aux_loss_coeff >= 0, "model: aux_loss_coeff cannot be negative");
}

MoeConfig ModelConfig::moe_config(int ep) const {
    MoeConfig mc;
    mc.n_experts = experts;
    mc.top_k = top_k;
    mc.hidden = hidden;
    mc.intermediate = intermediate;
    mc.ep = ep;
    mc.normalize_topk = normalize_topk;
    return mc;
}

ModelConfig preset(const std::string& name) {
    ModelConfig c;
    c.vocab = 50304;
    c.context = 4096;
    if (name == "mula-1b") {
        c.layers = 16, c.hidden = 2048, c.heads = 16, c.head_size = 128;
        c.intermediate = 8192, c.experts = 0, c.top_k = 0;
    } else if (name == "mula-7b-a1b") {
        c.layers = 16, c.hidden = 2048, c.heads = 16, c.head_size = 128;
        c.intermediate = 1024, c.experts = 64, c.top_k = 8;
    } else if (name == "mula-20b-a2b") {
        c.layers = 32, c.hidden = 2048, c.heads = 16, c.head_size = 128;
        c.intermediate = 1024, c.experts = 96, c.top_k = 8;
    } else if (name == "mula-100b-a7b") {
        c.layers = 48, c.hidden = 3072, c.heads = 24, c.head_size = 128;
        c.intermediate = 1536, c.experts = 144, c.top_k = 8;
    } else if (name == "mula-220b-a10b") {
        c.layers = 64, c.hidden = 3072, c.heads = 24, c.head_size = 128;
        c.intermediate = 1536, c.experts = 240, c.top_k = 8;
    } else if (name == "mula-tiny") {
        c.layers = 2, c.hidden = 64, c.heads = 4, c.head_size = 16;
        c.intermediate = 128, c.experts = 8, c.top_k = 2;
        c.vocab = 257, c.context = 32;
    } else {
        throw ConfigError(strcat_("unknown preset '", name, "'"));
    }
    return c;
}

std::vector<std::string> preset_names() {
    return {"mula-1b",      "mula-7b-a1b",   "mula-20b-a2b",
            "mula-100b-a7b", "mula-220b-a10b", "mula-tiny"};
}

ParamCount count_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t hd = cfg.heads * cfg.head_size;
    const int64_t attn = 3 * cfg.hidden * hd + hd * cfg.hidden;  // q,k,v projections + output
    const int64_t norms = 2 * cfg.hidden;
    const int64_t embed = cfg.vocab * cfg.hidden;
    const int64_t head = cfg.hidden * cfg.vocab;
    int64_t layer_total, layer_active;
    if (cfg.dense()) {
        const int64_t mlp = 3 * cfg.hidden * cfg.intermediate;
        layer_total = layer_active = attn + norms + mlp;
    } else {
        const int64_t router = cfg.hidden * cfg.experts;
        const int64_t per_expert = 3 * cfg.hidden * cfg.intermediate;
        layer_total = attn + norms + router + cfg.experts * per_expert;
        layer_active = attn + norms + router + cfg.top_k * per_expert;
    }
    ParamCount pc;
    pc.total = embed + head + cfg.hidden + cfg.layers * layer_total;
    pc.active = embed + head + cfg.hidden + cfg.layers * layer_active;
    return pc;
}

SliceRange chunk_layer_range(int64_t layers, int n_chunks, int chunk) {
    check(n_chunks >= 1 && chunk >= 0 && chunk < n_chunks, "chunk_layer_range: chunk out of range");
    return {layers * chunk / n_chunks, layers * (chunk + 1) / n_chunks};
}

// ---- model construction ---------------------------------------------------------------

Model::Model(const ModelConfig& cfg, const Topology& topo, const RankCoord& coord, uint64_t seed,
             int v_stages)
    : cfg_(cfg), topo_(topo), coord_(coord), v_(v_stages) {
    cfg_.validate();
    check(v_ >= 1, "model: v_stages must be positive");
    n_chunks_ = topo.pp * v_;
    check(cfg.heads % topo.tp == 0,
          strcat_("model: ", cfg.heads, " heads not divisible by tp ", topo.tp));
    if (cfg.dense())
        check(cfg.intermediate % topo.tp == 0,
              strcat_("model: intermediate ", cfg.intermediate, " not divisible by tp ", topo.tp));
    else
        moe_cfg_ = cfg.moe_config(topo.ep);

    const int64_t h = cfg.hidden;
    const int64_t hd = cfg.heads * cfg.head_size;
    const int tp = topo.tp;
    const double sd = 0.02;

    for (int vs = 0; vs < v_; ++vs) {
        const int c = vs * topo.pp + coord.pp;
        ChunkParams cp;
        ChunkGrads cg;
        cp.chunk_id = c;
        cp.layer_span = chunk_layer_range(cfg.layers, n_chunks_, c);
        cp.has_embed = (c == 0);
        cp.has_head = (c == n_chunks_ - 1);
        if (cp.has_embed) {
            cp.embed = init_full({cfg.vocab, h}, seed, fnv1a("embed"), sd);
            cg.embed = TensorF({cfg.vocab, h});
        }
        for (int64_t gl = cp.layer_span.begin; gl < cp.layer_span.end; ++gl) {
            LayerParams lp;
            LayerGrads lg;
            lp.norm1_w = TensorF::full({h}, 1.0f);
            lp.norm2_w = TensorF::full({h}, 1.0f);
            lg.norm1_w = TensorF({h});
            lg.norm2_w = TensorF({h});
            const std::string base = strcat_("L", gl, ".");
            lp.attn.wq = init_col_shard(h, hd, tp, coord.tp, seed, fnv1a(base + "attn.wq"), sd);
            lp.attn.wk = init_col_shard(h, hd, tp, coord.tp, seed, fnv1a(base + "attn.wk"), sd);
            lp.attn.wv = init_col_shard(h, hd, tp, coord.tp, seed, fnv1a(base + "attn.wv"), sd);
            lp.attn.wo = init_row_shard(hd, h, tp, coord.tp, seed, fnv1a(base + "attn.wo"), sd);
            lg.attn.wq = TensorF({h, hd / tp});
            lg.attn.wk = TensorF({h, hd / tp});
            lg.attn.wv = TensorF({h, hd / tp});
            lg.attn.wo = TensorF({hd / tp, h});
            if (cfg.dense()) {
                const int64_t iw = cfg.intermediate / tp;
                lp.mlp.gate =
                    init_col_shard(h, cfg.intermediate, tp, coord.tp, seed, fnv1a(base + "mlp.gate"), sd);
                lp.mlp.up =
                    init_col_shard(h, cfg.intermediate, tp, coord.tp, seed, fnv1a(base + "mlp.up"), sd);
                lp.mlp.down =
                    init_row_shard(cfg.intermediate, h, tp, coord.tp, seed, fnv1a(base + "mlp.down"), sd);
                lg.mlp.gate = TensorF({h, iw});
                lg.mlp.up = TensorF({h, iw});
                lg.mlp.down = TensorF({iw, h});
            } else {
                // experts are replicated across TP and sliced across EP; the whole
                // layer draws from one per-layer stream so every topology agrees
                lp.moe = init_expert_weights<float>(moe_cfg_, coord.ep,
                                                    hash_mix(seed, fnv1a(base + "moe")), sd);
                const int64_t nr = moe_cfg_.experts_per_rank();
                lg.moe.router = TensorF({h, cfg.experts});
                lg.moe.gate = TensorF({nr, h, cfg.intermediate});
                lg.moe.up = TensorF({nr, h, cfg.intermediate});
                lg.moe.down = TensorF({nr, cfg.intermediate, h});
            }
            cp.layers.push_back(std::move(lp));
            cg.layers.push_back(std::move(lg));
        }
        if (cp.has_head) {
            cp.final_norm_w = TensorF::full({h}, 1.0f);
            cp.head = init_full({h, cfg.vocab}, seed, fnv1a("head"), sd);
            cg.final_norm_w = TensorF({h});
            cg.head = TensorF({h, cfg.vocab});
        }
        chunks.push_back(std::move(cp));
        grads.push_back(std::move(cg));
    }
}

int Model::local_chunk(int chunk_id) const {
    for (size_t i = 0; i < chunks.size(); ++i)
        if (chunks[i].chunk_id == chunk_id) return (int)i;
    return -1;
}

std::vector<ParamSlot> Model::param_slots() {
    std::vector<ParamSlot> out;
    auto add = [&out](std::string name, TensorF& w, TensorF& g, ReplicationClass cls,
                      bool tp_sharded) {
        out.push_back({std::move(name), &w, &g, cls, tp_sharded});
    };
    const auto ne = ReplicationClass::non_expert;
    const auto ex = ReplicationClass::expert;
    for (size_t ci = 0; ci < chunks.size(); ++ci) {
        ChunkParams& cp = chunks[ci];
        ChunkGrads& cg = grads[ci];
        if (cp.has_embed) add("embed", cp.embed, cg.embed, ne, false);
        for (size_t i = 0; i < cp.layers.size(); ++i) {
            const int64_t gl = cp.layer_span.begin + (int64_t)i;
            LayerParams& lp = cp.layers[i];
            LayerGrads& lg = cg.layers[i];
            const std::string base = strcat_("L", gl, ".");
            add(base + "norm1", lp.norm1_w, lg.norm1_w, ne, false);
            add(base + "attn.wq", lp.attn.wq, lg.attn.wq, ne, true);
            add(base + "attn.wk", lp.attn.wk, lg.attn.wk, ne, true);
            add(base + "attn.wv", lp.attn.wv, lg.attn.wv, ne, true);
            add(base + "attn.wo", lp.attn.wo, lg.attn.wo, ne, true);
            add(base + "norm2", lp.norm2_w, lg.norm2_w, ne, false);
            if (cfg_.dense()) {
                add(base + "mlp.gate", lp.mlp.gate, lg.mlp.gate, ne, true);
                add(base + "mlp.up", lp.mlp.up, lg.mlp.up, ne, true);
                add(base + "mlp.down", lp.mlp.down, lg.mlp.down, ne, true);
            } else {
                add(base + "moe.router", lp.moe.router, lg.moe.router, ne, false);
                add(base + "moe.gate", lp.moe.gate, lg.moe.gate, ex, false);
                add(base + "moe.up", lp.moe.up, lg.moe.up, ex, false);
                add(base + "moe.down", lp.moe.down, lg.moe.down, ex, false);
            }
        }
        if (cp.has_head) {
            add("final_norm", cp.final_norm_w, cg.final_norm_w, ne, false);
            add("head", cp.head, cg.head, ne, false);
        }
    }
    return out;
}

namespace {

template <typename F>
void visit_grads(std::vector<ChunkGrads>& grads, F fn) {
    for (ChunkGrads& cg : grads) {
        fn(cg.embed);
        fn(cg.final_norm_w);
        fn(cg.head);
        for (LayerGrads& lg : cg.layers) {
            fn(lg.norm1_w);
            fn(lg.norm2_w);
            fn(lg.attn.wq);
            fn(lg.attn.wk);
            fn(lg.attn.wv);
            fn(lg.attn.wo);
            fn(lg.mlp.gate);
            fn(lg.mlp.up);
            fn(lg.mlp.down);
            fn(lg.moe.router);
            fn(lg.moe.gate);
            fn(lg.moe.up);
            fn(lg.moe.down);
        }
    }
}

}  // namespace

void Model::zero_grads() {
    visit_grads(grads, [](TensorF& t) { std::fill(t.vec().begin(), t.vec().end(), 0.0f); });
}

void Model::scale_grads(float s) {
    visit_grads(grads, [s](TensorF& t) {
        if (t.numel()) scale_inplace(t, s);
    });
}

// ---- chunk passes ----------------------------------------------------------------------

TensorF chunk_forward(RankCtx& ctx, Model& m, int local_idx, const TensorF& x_in,
                      const TensorI& mb_tokens, int64_t seq, ChunkRec& rec, ActLedger* led) {
    ChunkParams& cp = m.chunks[(size_t)local_idx];
    const ModelConfig& cfg = m.config();
    const int64_t h = cfg.hidden;

    TensorF x;
    if (cp.has_embed) {
        check(mb_tokens.rank() == 2, "chunk_forward: tokens must be [B,C]");
        const int64_t rows = mb_tokens.numel();
        x = TensorF({rows, h});
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t tok = mb_tokens.data()[r];
            check(tok >= 0 && tok < cfg.vocab, strcat_("chunk_forward: token id ", tok,
                                                       " outside vocab ", cfg.vocab));
            std::memcpy(x.data() + r * h, cp.embed.data() + tok * h, sizeof(float) * (size_t)h);
        }
        rec.emb.tokens = mb_tokens;
        rec.emb.held = (int64_t)rec.emb.tokens.bytes();
        detail::led_charge(led, rec.emb.held);
    } else {
        check(x_in.rank() == 2 && x_in.dim(1) == h, "chunk_forward: x must be [S,H]");
        x = x_in;
    }

    const ProcessGroup tp = ctx.tp_group();
    const ProcessGroup ep = ctx.ep_group();
    rec.layers.clear();
    rec.layers.resize(cp.layers.size());
    rec.aux = 0;
    for (size_t i = 0; i < cp.layers.size(); ++i) {
        LayerParams& lp = cp.layers[i];
        LayerRec& lr = rec.layers[i];
        TensorF n1 = norm_forward(x, lp.norm1_w, cfg.sac.checkpoint_norm, lr.n1, led);
        TensorF a = attention_forward(ctx, tp, n1, lp.attn, cfg.head_size, seq,
                                      cfg.sac.checkpoint_attention, lr.at, led);
        add_inplace(a, x);  // residual: x1 = x + attn(norm(x))
        TensorF n2 = norm_forward(a, lp.norm2_w, cfg.sac.checkpoint_norm, lr.n2, led);
        TensorF blk;
        if (cfg.dense()) {
            blk = dense_mlp_forward(ctx, tp, n2, lp.mlp, lr.mlp, led);
        } else {
            blk = moe_block_forward(ctx, ep, n2, lp.moe, m.moe_config(), cfg.force_uniform_routing,
                                    cfg.sac.checkpoint_moe, lr.moe, led, &m.routing_tally);
            rec.aux += lr.moe.aux;
        }
        add_inplace(blk, a);  // residual: x2 = x1 + block(norm(x1))
        x = std::move(blk);
    }

    if (cp.has_head) {
        rec.head_in = norm_forward(x, cp.final_norm_w, cfg.sac.checkpoint_norm, rec.fin, led);
        rec.head_held = (int64_t)rec.head_in.bytes();
        detail::led_charge(led, rec.head_held);
        return matmul(rec.head_in, cp.head);
    }
    return x;
}

TensorF chunk_backward(RankCtx& ctx, Model& m, int local_idx, const TensorF& dy, int64_t seq,
                       ChunkRec& rec, ActLedger* led) {
    ChunkParams& cp = m.chunks[(size_t)local_idx];
    ChunkGrads& cg = m.grads[(size_t)local_idx];
    const ModelConfig& cfg = m.config();
    const ProcessGroup tp = ctx.tp_group();
    const ProcessGroup ep = ctx.ep_group();

    TensorF dx;
    if (cp.has_head) {
        // dy is dlogits here
        add_inplace(cg.head, matmul_tn(rec.head_in, dy));
        TensorF dfin = matmul_nt(dy, cp.head);
        detail::led_release(led, rec.head_held);
        rec.head_in = TensorF{};
        rec.head_held = 0;
        dx = norm_backward(cp.final_norm_w, cg.final_norm_w, rec.fin, dfin, led);
    } else {
        dx = dy;
    }

    for (size_t ri = cp.layers.size(); ri-- > 0;) {
        LayerParams& lp = cp.layers[ri];
        LayerGrads& lg = cg.layers[ri];
        LayerRec& lr = rec.layers[ri];
        TensorF dblk;
        if (cfg.dense()) {
            dblk = dense_mlp_backward(ctx, tp, lp.mlp, lr.mlp, dx, lg.mlp, led);
        } else {
            dblk = moe_block_backward(ctx, ep, lp.moe, m.moe_config(), cfg.force_uniform_routing,
                                      cfg.aux_loss_coeff, lr.moe, dx, lg.moe, led);
        }
        TensorF dn2 = norm_backward(lp.norm2_w, lg.norm2_w, lr.n2, dblk, led);
        add_inplace(dx, dn2);  // d(x1)
        TensorF datt = attention_backward(ctx, tp, lp.attn, cfg.head_size, seq, lr.at, dx,
                                          lg.attn, led);
        TensorF dn1 = norm_backward(lp.norm1_w, lg.norm1_w, lr.n1, datt, led);
        add_inplace(dx, dn1);  // d(x0)
    }

    if (cp.has_embed) {
        const int64_t h = cfg.hidden;
        const int64_t rows = rec.emb.tokens.numel();
        for (int64_t r = 0; r < rows; ++r) {
            float* gp = cg.embed.data() + rec.emb.tokens.data()[r] * h;
            const float* dp = dx.data() + r * h;
            for (int64_t c = 0; c < h; ++c) gp[c] += dp[c];
        }
        detail::led_release(led, rec.emb.held);
        rec.emb = EmbedRec{};
    }
    return dx;
}

// ---- loss -------------------------------------------------------------------------------

double ce_loss_forward(const TensorF& logits, const TensorI& tokens, LossRec& rec,
                       ActLedger* led) {
    check(tokens.rank() == 2, "ce_loss: tokens must be [B,C]");
    const int64_t b = tokens.dim(0), c = tokens.dim(1), v = logits.dim(1);
    check(logits.rank() == 2 && logits.dim(0) == b * c, "ce_loss: logits must be [B*C, vocab]");
    check(c >= 2, "ce_loss: need at least two positions per sequence");
    const int64_t npred = b * (c - 1);

    rec.probs = TensorF({b * c, v});
    rec.tokens = tokens;
    double ce = 0.0;
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t i = 0; i < c; ++i) {
            const int64_t row = bi * c + i;
            const float* lp = logits.data() + row * v;
            double mx = (double)lp[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, (double)lp[j]);
            double sum = 0.0;
            for (int64_t j = 0; j < v; ++j) sum += std::exp((double)lp[j] - mx);
            float* pp = rec.probs.data() + row * v;
            for (int64_t j = 0; j < v; ++j) pp[j] = (float)(std::exp((double)lp[j] - mx) / sum);
            if (i + 1 < c) {
                const int64_t tgt = tokens(bi, i + 1);
                check(tgt >= 0 && tgt < v, "ce_loss: target outside vocab");
                ce += mx + std::log(sum) - (double)lp[tgt];
            }
        }
    }
    ce /= (double)npred;
    rec.ce = ce;
    rec.held = (int64_t)(rec.probs.bytes() + rec.tokens.bytes());
    detail::led_charge(led, rec.held);
    return ce;
}

TensorF ce_loss_backward(LossRec& rec, ActLedger* led) {
    const int64_t b = rec.tokens.dim(0), c = rec.tokens.dim(1), v = rec.probs.dim(1);
    const double inv = 1.0 / (double)(b * (c - 1));
    TensorF dlogits({b * c, v});
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t i = 0; i + 1 < c; ++i) {
            const int64_t row = bi * c + i;
            const float* pp = rec.probs.data() + row * v;
            float* dp = dlogits.data() + row * v;
            for (int64_t j = 0; j < v; ++j) dp[j] = (float)((double)pp[j] * inv);
            dp[rec.tokens(bi, i + 1)] -= (float)inv;
        }
    }
    detail::led_release(led, rec.held);
    rec = LossRec{};
    return dlogits;
}

// ---- whole-model entry points --------------------------------------------------------------

ForwardLossResult forward_loss(RankCtx& ctx, Model& m, const TensorI& batch) {
    check((int)m.chunks.size() == m.n_chunks(),
          "forward_loss: every pipeline chunk must be resident (pp=1)");
    const int64_t seq = batch.dim(1);
    ForwardLossResult res;
    TensorF x;
    std::vector<ChunkRec> recs(m.chunks.size());
    for (size_t li = 0; li < m.chunks.size(); ++li) {
        x = chunk_forward(ctx, m, (int)li, x, batch, seq, recs[li], nullptr);
        res.aux += recs[li].aux;
    }
    LossRec lrec;
    res.ce = ce_loss_forward(x, batch, lrec, nullptr);
    res.logits = std::move(x);
    return res;
}

namespace {

TensorI slice_rows(const TensorI& t, int64_t r0, int64_t n) {
    TensorI out({n, t.dim(1)});
    std::memcpy(out.data(), t.data() + r0 * t.dim(1), sizeof(int64_t) * (size_t)(n * t.dim(1)));
    return out;
}

// unique mail tag per (microbatch, chunk boundary, direction)
int64_t pipe_tag(int mb, int boundary, bool backward) {
    return ((int64_t)mb * 4096 + boundary) * 2 + (backward ? 1 : 0);
}

}  // namespace

PpLossParts pp_forward_backward(RankCtx& ctx, Model& m, const PipelineSchedule& sched,
                                const TensorI& batch, ActLedger* led) {
    const Topology& topo = ctx.topology();
    check(sched.pp == topo.pp, strcat_("pipeline: schedule built for pp=", sched.pp,
                                       " but topology has pp=", topo.pp));
    check(sched.v == m.v_stages(),
          strcat_("pipeline: schedule v=", sched.v, " but model holds v=", m.v_stages()));
    check(batch.rank() == 2, "pipeline: batch must be [B,C]");
    const int64_t rows = batch.dim(0), seq = batch.dim(1);
    check(rows % sched.m == 0,
          strcat_("pipeline: batch rows ", rows, " not divisible by m=", sched.m));
    const int64_t mb_rows = rows / sched.m;

    m.zero_grads();
    std::vector<std::vector<ChunkRec>> recs(m.chunks.size());
    for (auto& r : recs) r.resize((size_t)sched.m);

    PpLossParts parts;
    const ProcessGroup pp = ctx.pp_group();
    const int me = ctx.coord().pp;
    const int last = sched.total_chunks() - 1;
    for (const ScheduleEvent& ev : sched.per_rank[(size_t)me]) {
        const int chunk = sched.chunk_of(me, ev.vstage);
        const int li = m.local_chunk(chunk);
        check(li >= 0, strcat_("pipeline: rank has no chunk ", chunk));
        ChunkRec& rec = recs[(size_t)li][(size_t)ev.microbatch];
        TensorI mb_tokens = slice_rows(batch, (int64_t)ev.microbatch * mb_rows, mb_rows);
        if (ev.phase == Phase::forward) {
            TensorF x;
            if (chunk > 0)
                x = recv<float>(ctx, pp.ranks[(size_t)((chunk - 1) % sched.pp)],
                                pipe_tag(ev.microbatch, chunk - 1, false));
            TensorF y = chunk_forward(ctx, m, li, x, mb_tokens, seq, rec, led);
            parts.aux_sum += rec.aux;
            if (chunk == last)
                parts.ce_sum += ce_loss_forward(y, mb_tokens, rec.loss, led);
            else
                send(ctx, pp.ranks[(size_t)((chunk + 1) % sched.pp)],
                     pipe_tag(ev.microbatch, chunk, false), y);
        } else {
            TensorF dy = (chunk == last)
                             ? ce_loss_backward(rec.loss, led)
                             : recv<float>(ctx, pp.ranks[(size_t)((chunk + 1) % sched.pp)],
                                           pipe_tag(ev.microbatch, chunk, true));
            TensorF dx = chunk_backward(ctx, m, li, dy, seq, rec, led);
            if (chunk > 0)
                send(ctx, pp.ranks[(size_t)((chunk - 1) % sched.pp)],
                     pipe_tag(ev.microbatch, chunk - 1, true), dx);
        }
    }

    // microbatch gradients were summed; one scale keeps large-batch semantics
    m.scale_grads(1.0f / (float)sched.m);
    return parts;
}

std::string metrics_jsonl(const StepMetrics& m) {
    std::ostringstream os;
    os << std::setprecision(12);
    os << "{\"step\":" << m.step << ",\"loss\":" << m.loss << ",\"aux_loss\":" << m.aux
       << ",\"grad_norm\":" << m.grad_norm << ",\"lr\":" << m.lr
       << ",\"tokens_per_s\":" << m.tokens_per_s << "}";
    return os.str();
}

StepMetrics train_step(RankCtx& ctx, Model& m, ShardedOptimizer& opt,
                       const PipelineSchedule& sched, const TensorI& batch, ActLedger* led) {
    const auto t0 = std::chrono::steady_clock::now();
    PpLossParts parts = pp_forward_backward(ctx, m, sched, batch, led);

    // loss figures for logging: stages hold disjoint pieces, TP peers identical
    // copies, so sum everything and divide by copies x microbatches
    TensorD sums({2});
    sums(0) = parts.ce_sum;
    sums(1) = parts.aux_sum;
    TensorD tot = allreduce(ctx, ctx.world_group(), sums);
    const Topology& topo = ctx.topology();
    const double denom = (double)(topo.dp * topo.ep * topo.tp) * (double)sched.m;

    StepStats st = opt.step();
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::max(1e-9, std::chrono::duration<double>(t1 - t0).count());

    StepMetrics out;
    out.step = st.step;
    out.ce = tot(0) / denom;
    out.aux = tot(1) / denom;
    out.loss = out.ce + m.config().aux_loss_coeff * out.aux;
    out.grad_norm = st.grad_norm;
    out.lr = st.lr;
    out.tokens_per_s = (double)(batch.numel() * topo.dp * topo.ep) / secs;
    return out;
}

}  // namespace optimus

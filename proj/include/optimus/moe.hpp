#pragma once

#include <iostream>
#include <utility>

#include "optimus/comm.hpp"
#include "optimus/kernels.hpp"

namespace optimus {

// ---- config / weights ------------------------------------------------------------

struct MoeConfig {
    int64_t n_experts = 8;
    int64_t top_k = 2;
    int64_t hidden = 64;
    int64_t intermediate = 128;
    int ep = 1;
    int64_t token_block = 8;       // tokens per logical counting thread
    bool normalize_topk = false;   // renormalize top-k weights to sum to 1

    int64_t experts_per_rank() const { return n_experts / ep; }
    void validate() const {
        check(n_experts >= 1 && top_k >= 1 && hidden >= 1 && intermediate >= 1 && ep >= 1,
              "moe: config fields must be positive");
        check(top_k <= n_experts, "moe: top_k cannot exceed n_experts");
        check(n_experts % ep == 0, strcat_("moe: n_experts ", n_experts,
                                           " must divide evenly over ep ", ep));
        check(token_block >= 1, "moe: token_block must be positive");
    }
};

// per-rank expert slice plus the replicated router
template <typename T>
struct ExpertWeights {
    Tensor<T> router;  // [H, N]
    Tensor<T> gate;    // [NR, H, I]
    Tensor<T> up;      // [NR, H, I]
    Tensor<T> down;    // [NR, I, H]
};

template <typename T>
struct MoeGrads {
    Tensor<T> router, gate, up, down;
    Tensor<T> input;  // [S, H]
};

// ---- routing ------------------------------------------------------------------------

template <typename T>
struct RouteResult {
    Tensor<T> logits;   // [S, N]
    Tensor<T> probs;    // [S, N]
    Tensor<T> weights;  // [S, K] final combine weights
    TensorI indices;    // [S, K] expert ids
};

template <typename T>
RouteResult<T> route(const Tensor<T>& input, const Tensor<T>& router_w, const MoeConfig& cfg) {
    cfg.validate();
    check(input.rank() == 2 && input.dim(1) == cfg.hidden,
          strcat_("route: input must be [S,", cfg.hidden, "], got ", input.shape_str()));
    check(router_w.rank() == 2 && router_w.dim(0) == cfg.hidden &&
              router_w.dim(1) == cfg.n_experts,
          "route: router weight must be [H,N]");
    RouteResult<T> r;
    r.logits = matmul(input, router_w);
    r.probs = softmax(r.logits);
    auto [values, indices] = topk(r.probs, cfg.top_k);
    r.weights = std::move(values);
    r.indices = std::move(indices);
    if (cfg.normalize_topk) {
        for (int64_t s = 0; s < r.weights.dim(0); ++s) {
            T sum = 0;
            for (int64_t k = 0; k < cfg.top_k; ++k) sum += r.weights(s, k);
            for (int64_t k = 0; k < cfg.top_k; ++k) r.weights(s, k) /= sum;
        }
    }
    return r;
}

// forced uniform routing: token t takes experts (t*K+j) mod N at weight 1/K,
// bypassing the learned router (the router still runs for its statistics)
template <typename T>
std::pair<Tensor<T>, TensorI> fur_route(int64_t s_tokens, const MoeConfig& cfg) {
    cfg.validate();
    Tensor<T> weights({s_tokens, cfg.top_k});
    TensorI indices({s_tokens, cfg.top_k});
    for (int64_t t = 0; t < s_tokens; ++t)
        for (int64_t k = 0; k < cfg.top_k; ++k) {
            weights(t, k) = (T)(1.0 / (double)cfg.top_k);
            indices(t, k) = (t * cfg.top_k + k) % cfg.n_experts;
        }
    if ((s_tokens * cfg.top_k) % cfg.n_experts != 0)
        std::cerr << "[optimus] warning: forced uniform routing is uneven: " << s_tokens << "*"
                  << cfg.top_k << " selections do not divide over " << cfg.n_experts
                  << " experts (max-min spread is 1)\n";
    return {std::move(weights), std::move(indices)};
}

// ---- token counting and index generation ----------------------------------------------

// Integer bookkeeping produced from the gathered routing table. All fields are
// functions of (indices, rank, cfg); the partial_* layouts additionally depend on
// the token_block choice, the rest do not.
struct RoutingArtifacts {
    int64_t t_total = 0;           // gathered token count T
    int64_t th = 0;                // logical counting threads = ceil(T / token_block)
    int64_t rt = 0;                // rows routed to this rank's experts
    TensorI token_counts;          // [NR] tokens per local expert
    TensorI partial_token_counts;  // [NR*TH] per (expert, thread) counts
    TensorI partial_cum;           // [NR*TH+1] exclusive prefix over partial counts
    TensorI cum_token_counts;      // [NR+1] expert group boundaries in gathered rows
    TensorI expert_counts;         // [T] local selections per token
    TensorI cum_expert_counts;     // [T+1]
    TensorI input_indices;         // [RT] row -> source token
    TensorI output_indices;        // [RT] row -> slot in token-major order
    TensorI selected_k;            // [RT] row -> top-k column of that selection
    TensorI counter;               // [NR, TH] final write cursors (diagnostic)
};

inline RoutingArtifacts count_tokens(const TensorI& indices, int ep_rank, const MoeConfig& cfg) {
    cfg.validate();
    check(indices.rank() == 2 && indices.dim(1) == cfg.top_k,
          strcat_("count_tokens: indices must be [T,", cfg.top_k, "], got ", indices.shape_str()));
    check(ep_rank >= 0 && ep_rank < cfg.ep, "count_tokens: ep_rank out of range");
    const int64_t t_total = indices.dim(0);
    const int64_t nr = cfg.experts_per_rank();
    const int64_t tbs = cfg.token_block;
    const int64_t th = (t_total + tbs - 1) / tbs;
    const int64_t n_start = (int64_t)ep_rank * nr;

    RoutingArtifacts art;
    art.t_total = t_total;
    art.th = th;
    art.partial_token_counts = TensorI({nr * th});
    art.expert_counts = TensorI({t_total});
    for (int64_t tid = 0; tid < th; ++tid) {
        for (int64_t i = 0; i < tbs; ++i) {
            const int64_t t = tid * tbs + i;
            if (t >= t_total) break;
            for (int64_t k = 0; k < cfg.top_k; ++k) {
                const int64_t n = indices(t, k);
                check(n >= 0 && n < cfg.n_experts,
                      strcat_("count_tokens: expert id ", n, " out of range [0,", cfg.n_experts,
                              ") at token ", t));
                if (n >= n_start && n < n_start + nr) {
                    art.partial_token_counts(((n - n_start) * th + tid))++;
                    art.expert_counts(t)++;
                }
            }
        }
    }
    art.partial_cum = prefix_sum(art.partial_token_counts);
    art.cum_expert_counts = prefix_sum(art.expert_counts);
    art.cum_token_counts = TensorI({nr + 1});
    for (int64_t ln = 0; ln <= nr; ++ln)
        art.cum_token_counts(ln) = art.partial_cum(ln * th);
    art.token_counts = TensorI({nr});
    for (int64_t ln = 0; ln < nr; ++ln)
        art.token_counts(ln) = art.cum_token_counts(ln + 1) - art.cum_token_counts(ln);
    art.rt = art.cum_token_counts(nr);
    return art;
}

// fills input_indices / output_indices / selected_k from the counting results
inline void generate_indices(const TensorI& indices, int ep_rank, const MoeConfig& cfg,
                             RoutingArtifacts& art) {
    const int64_t nr = cfg.experts_per_rank();
    const int64_t tbs = cfg.token_block;
    const int64_t th = art.th;
    const int64_t n_start = (int64_t)ep_rank * nr;
    art.input_indices = TensorI({art.rt});
    art.output_indices = TensorI({art.rt});
    art.selected_k = TensorI({art.rt});
    art.counter = TensorI({nr, th});
    for (int64_t ln = 0; ln < nr; ++ln)
        for (int64_t tid = 0; tid < th; ++tid) art.counter(ln, tid) = art.partial_cum(ln * th + tid);
    TensorI seen({art.t_total});  // selections of each token already placed
    for (int64_t tid = 0; tid < th; ++tid) {
        for (int64_t i = 0; i < tbs; ++i) {
            const int64_t t = tid * tbs + i;
            if (t >= art.t_total) break;
            for (int64_t k = 0; k < cfg.top_k; ++k) {
                const int64_t n = indices(t, k);
                if (n < n_start || n >= n_start + nr) continue;
                const int64_t ln = n - n_start;
                const int64_t row = art.counter(ln, tid)++;  // expert-sorted row
                const int64_t pos = art.cum_expert_counts(t) + seen(t);  // token-sorted slot
                art.input_indices(row) = t;
                art.output_indices(pos) = row;
                art.selected_k(pos) = k;
                seen(t)++;
            }
        }
    }
}

// ---- token gather (EP communication) ---------------------------------------------------

template <typename T>
Tensor<T> gather_tokens(RankCtx& ctx, const ProcessGroup& ep_group, const Tensor<T>& local) {
    return allgather(ctx, ep_group, local);
}

// backward of gather_tokens: every rank contributed S rows, so sum the full-grad
// copies and keep our chunk
template <typename T>
Tensor<T> gather_tokens_backward(RankCtx& ctx, const ProcessGroup& ep_group,
                                 const Tensor<T>& gathered_grad) {
    return reducescatter(ctx, ep_group, gathered_grad);
}

// ---- expert computation -----------------------------------------------------------------

template <typename T>
struct ExpertMlpCache {
    Tensor<T> mlp_in;    // [RT, H]
    Tensor<T> gate_out;  // [RT, I]
    Tensor<T> up_out;    // [RT, I]
    Tensor<T> mul_out;   // [RT, I]
};

// grouped MLP over the expert-sorted rows: silu(x Wg) * (x Wu) -> Wd
template <typename T>
Tensor<T> expert_forward(const Tensor<T>& gathered, const RoutingArtifacts& art,
                         const ExpertWeights<T>& w, ExpertMlpCache<T>* cache) {
    const int64_t h = gathered.dim(1);
    Tensor<T> mlp_in({art.rt, h});
    for (int64_t r = 0; r < art.rt; ++r)
        std::memcpy(mlp_in.data() + r * h, gathered.data() + art.input_indices(r) * h,
                    sizeof(T) * (size_t)h);
    Tensor<T> gate_out = grouped_mm(mlp_in, w.gate, art.cum_token_counts);
    Tensor<T> up_out = grouped_mm(mlp_in, w.up, art.cum_token_counts);
    Tensor<T> mul_out = silu_glu(gate_out, up_out);
    Tensor<T> mlp_out = grouped_mm(mul_out, w.down, art.cum_token_counts);
    if (cache) {
        cache->mlp_in = std::move(mlp_in);
        cache->gate_out = std::move(gate_out);
        cache->up_out = std::move(up_out);
        cache->mul_out = std::move(mul_out);
    }
    return mlp_out;
}

// ---- output reduction --------------------------------------------------------------------

// combine expert rows back into token rows: out[t] = sum_k weights[t,k] * row(t,k);
// output_indices maps each token-sorted slot to its expert-sorted row
template <typename T>
Tensor<T> output_reduction_forward(const Tensor<T>& mlp_out, const Tensor<T>& weights,
                                   const RoutingArtifacts& art) {
    check(mlp_out.rank() == 2 && mlp_out.dim(0) == art.rt, "output_reduction: mlp_out must be [RT,H]");
    check(weights.rank() == 2 && weights.dim(0) == art.t_total,
          "output_reduction: weights must be [T,K]");
    const int64_t h = mlp_out.dim(1);
    Tensor<T> out({art.t_total, h});
    for (int64_t t = 0; t < art.t_total; ++t) {
        T* op = out.data() + t * h;
        for (int64_t j = art.cum_expert_counts(t); j < art.cum_expert_counts(t + 1); ++j) {
            const int64_t r = art.output_indices(j);
            const T wv = weights(t, art.selected_k(j));
            const T* mp = mlp_out.data() + r * h;
            for (int64_t c = 0; c < h; ++c) op[c] += wv * mp[c];
        }
    }
    return out;
}

// returns (mlp_out_grad [RT,H], weights_grad [T,K])
template <typename T>
std::pair<Tensor<T>, Tensor<T>> output_reduction_backward(const Tensor<T>& output_grad,
                                                          const Tensor<T>& mlp_out,
                                                          const Tensor<T>& weights,
                                                          const RoutingArtifacts& art) {
    check(output_grad.rank() == 2 && output_grad.dim(0) == art.t_total,
          "output_reduction_backward: output_grad must be [T,H]");
    const int64_t h = output_grad.dim(1);
    Tensor<T> mlp_out_grad({art.rt, h});
    Tensor<T> weights_grad({art.t_total, weights.dim(1)});
    for (int64_t t = 0; t < art.t_total; ++t) {
        const T* gp = output_grad.data() + t * h;
        for (int64_t j = art.cum_expert_counts(t); j < art.cum_expert_counts(t + 1); ++j) {
            const int64_t r = art.output_indices(j);
            const int64_t k = art.selected_k(j);
            const T wv = weights(t, k);
            T* mg = mlp_out_grad.data() + r * h;
            const T* mp = mlp_out.data() + r * h;
            double dot = 0;
            for (int64_t c = 0; c < h; ++c) {
                mg[c] = wv * gp[c];
                dot += (double)gp[c] * (double)mp[c];
            }
            weights_grad(t, k) += (T)dot;
        }
    }
    return {std::move(mlp_out_grad), std::move(weights_grad)};
}

// ---- fused block -----------------------------------------------------------------------

template <typename T>
struct FastMoeState {
    MoeConfig cfg;
    bool fur = false;
    RoutingArtifacts art;
    Tensor<T> input_local;  // [S, H]
    Tensor<T> gathered;     // [T, H]
    RouteResult<T> routing; // local router outputs
    Tensor<T> weights_g;    // [T, K]
    TensorI indices_g;      // [T, K]
    ExpertMlpCache<T> mlp;
    Tensor<T> mlp_out;      // [RT, H]
    Tensor<T> mean_probs;   // [N] mean local router prob per expert
    TensorI sel_counts;     // [N] selections per expert over the gathered tokens
};

// aux balancing loss of one invocation: N * sum_e f_e p_e with f from selection
// fractions over the gathered tokens (constant) and p from local router probs
template <typename T>
double moe_aux_loss(const FastMoeState<T>& st) {
    const int64_t n = st.cfg.n_experts;
    const double total = (double)st.art.t_total * (double)st.cfg.top_k;
    double acc = 0;
    for (int64_t e = 0; e < n; ++e)
        acc += ((double)st.sel_counts(e) / total) * (double)st.mean_probs(e);
    return (double)n * acc;
}

// d(aux)/d(probs): coeff * N * f_e / S into every row
template <typename T>
Tensor<T> moe_aux_probs_grad(const FastMoeState<T>& st, double coeff) {
    const int64_t s = st.input_local.dim(0);
    const int64_t n = st.cfg.n_experts;
    const double total = (double)st.art.t_total * (double)st.cfg.top_k;
    Tensor<T> g({s, n});
    for (int64_t e = 0; e < n; ++e) {
        const T v = (T)(coeff * (double)n * ((double)st.sel_counts(e) / total) / (double)s);
        for (int64_t row = 0; row < s; ++row) g(row, e) = v;
    }
    return g;
}

template <typename T>
Tensor<T> fast_moe_forward(RankCtx& ctx, const ProcessGroup& ep_group, const Tensor<T>& input,
                           const ExpertWeights<T>& w, const MoeConfig& cfg, bool fur,
                           FastMoeState<T>* state) {
    cfg.validate();
    check(cfg.ep == ep_group.size(), "fast_moe: cfg.ep must match the EP group size");
    check(input.rank() == 2 && input.dim(1) == cfg.hidden, "fast_moe: input must be [S,H]");
    FastMoeState<T> st;
    st.cfg = cfg;
    st.fur = fur;
    st.input_local = input;

    // stage 1: route locally, then gather tokens and routing across EP
    st.routing = route(input, w.router, cfg);
    Tensor<T> weights_local = st.routing.weights;
    TensorI indices_local = st.routing.indices;
    if (fur) {
        auto [fw, fi] = fur_route<T>(input.dim(0), cfg);
        weights_local = std::move(fw);
        indices_local = std::move(fi);
    }
    st.gathered = gather_tokens(ctx, ep_group, input);
    st.weights_g = allgather(ctx, ep_group, weights_local);
    st.indices_g = allgather(ctx, ep_group, indices_local);

    // stages 2+3: counting and index generation on the gathered table
    st.art = count_tokens(st.indices_g, ctx.coord().ep, cfg);
    generate_indices(st.indices_g, ctx.coord().ep, cfg, st.art);

    // stage 4: grouped expert MLP
    st.mlp_out = expert_forward(st.gathered, st.art, w, &st.mlp);

    // stage 5: weighted combine per token, then return tokens to their owners
    Tensor<T> combined = output_reduction_forward(st.mlp_out, st.weights_g, st.art);
    Tensor<T> out = reducescatter(ctx, ep_group, combined);

    // balancing statistics
    st.mean_probs = Tensor<T>({cfg.n_experts});
    for (int64_t row = 0; row < st.routing.probs.dim(0); ++row)
        for (int64_t e = 0; e < cfg.n_experts; ++e) st.mean_probs(e) += st.routing.probs(row, e);
    scale_inplace(st.mean_probs, (T)(1.0 / (double)st.routing.probs.dim(0)));
    st.sel_counts = TensorI({cfg.n_experts});
    for (int64_t i = 0; i < st.indices_g.numel(); ++i) st.sel_counts(st.indices_g.data()[i])++;

    if (state) *state = std::move(st);
    return out;
}

template <typename T>
MoeGrads<T> fast_moe_backward(RankCtx& ctx, const ProcessGroup& ep_group,
                              const FastMoeState<T>& st, const ExpertWeights<T>& w,
                              const Tensor<T>& output_grad, const Tensor<T>* aux_probs_grad) {
    const MoeConfig& cfg = st.cfg;
    check(output_grad.same_shape(st.input_local), "fast_moe_backward: output_grad must be [S,H]");

    // backward of the final reducescatter is an allgather of the local grads
    Tensor<T> dout_full = allgather(ctx, ep_group, output_grad);

    auto [mlp_out_grad, weights_grad_full] =
        output_reduction_backward(dout_full, st.mlp_out, st.weights_g, st.art);

    // stage 4 backward through the grouped MLP
    Tensor<T> dmul = grouped_mm_nt(mlp_out_grad, w.down, st.art.cum_token_counts);
    Tensor<T> down_grad = grouped_mm_weight_grad(st.mlp.mul_out, mlp_out_grad,
                                                 st.art.cum_token_counts, cfg.experts_per_rank());
    auto [dgate_out, dup_out] = silu_glu_backward(st.mlp.gate_out, st.mlp.up_out, dmul);
    Tensor<T> gate_grad = grouped_mm_weight_grad(st.mlp.mlp_in, dgate_out, st.art.cum_token_counts,
                                                 cfg.experts_per_rank());
    Tensor<T> up_grad = grouped_mm_weight_grad(st.mlp.mlp_in, dup_out, st.art.cum_token_counts,
                                               cfg.experts_per_rank());
    Tensor<T> dmlp_in = grouped_mm_nt(dgate_out, w.gate, st.art.cum_token_counts);
    add_inplace(dmlp_in, grouped_mm_nt(dup_out, w.up, st.art.cum_token_counts));

    const int64_t h = cfg.hidden;
    Tensor<T> dgathered({st.art.t_total, h});
    for (int64_t r = 0; r < st.art.rt; ++r) {
        T* gp = dgathered.data() + st.art.input_indices(r) * h;
        const T* mp = dmlp_in.data() + r * h;
        for (int64_t c = 0; c < h; ++c) gp[c] += mp[c];
    }

    // backward of the two gathers: sum the per-rank contributions, keep our chunk
    MoeGrads<T> g;
    g.input = reducescatter(ctx, ep_group, dgathered);
    Tensor<T> weights_grad_local = reducescatter(ctx, ep_group, weights_grad_full);

    // router path: only the learned weights feed back into the probabilities
    const int64_t s = st.input_local.dim(0);
    Tensor<T> dprobs({s, cfg.n_experts});
    if (!st.fur) {
        if (cfg.normalize_topk) {
            for (int64_t row = 0; row < s; ++row) {
                double raw_sum = 0, dot = 0;
                for (int64_t k = 0; k < cfg.top_k; ++k)
                    raw_sum += (double)st.routing.probs(row, st.routing.indices(row, k));
                for (int64_t k = 0; k < cfg.top_k; ++k)
                    dot += (double)weights_grad_local(row, k) * (double)st.routing.weights(row, k);
                for (int64_t k = 0; k < cfg.top_k; ++k)
                    dprobs(row, st.routing.indices(row, k)) +=
                        (T)(((double)weights_grad_local(row, k) - dot) / raw_sum);
            }
        } else {
            for (int64_t row = 0; row < s; ++row)
                for (int64_t k = 0; k < cfg.top_k; ++k)
                    dprobs(row, st.routing.indices(row, k)) += weights_grad_local(row, k);
        }
    }
    if (aux_probs_grad) add_inplace(dprobs, *aux_probs_grad);
    Tensor<T> dlogits = softmax_backward(st.routing.probs, dprobs);
    g.router = matmul_tn(st.input_local, dlogits);
    add_inplace(g.input, matmul_nt(dlogits, w.router));

    // expert weights see every rank's loss through the gathered rows; rescale to
    // the mean-over-ranks objective the optimizer reduces toward
    const T inv_ep = (T)(1.0 / (double)cfg.ep);
    scale_inplace(gate_grad, inv_ep);
    scale_inplace(up_grad, inv_ep);
    scale_inplace(down_grad, inv_ep);
    g.gate = std::move(gate_grad);
    g.up = std::move(up_grad);
    g.down = std::move(down_grad);
    return g;
}

// ---- dense per-token reference ------------------------------------------------------------

// oracle path: for each token, run each selected expert's MLP densely
template <typename T>
Tensor<T> reference_moe_forward(const Tensor<T>& input, const ExpertWeights<T>& all_experts,
                                const Tensor<T>& weights, const TensorI& indices,
                                const MoeConfig& cfg) {
    check(all_experts.gate.dim(0) == cfg.n_experts,
          "reference_moe: needs the full expert set on one rank");
    const int64_t t_total = input.dim(0), h = cfg.hidden, inter = cfg.intermediate;
    Tensor<T> out({t_total, h});
    for (int64_t t = 0; t < t_total; ++t) {
        Tensor<T> x({1, h});
        std::memcpy(x.data(), input.data() + t * h, sizeof(T) * (size_t)h);
        for (int64_t k = 0; k < cfg.top_k; ++k) {
            const int64_t e = indices(t, k);
            Tensor<T> wg({h, inter}), wu({h, inter}), wd({inter, h});
            std::memcpy(wg.data(), all_experts.gate.data() + e * h * inter,
                        sizeof(T) * (size_t)(h * inter));
            std::memcpy(wu.data(), all_experts.up.data() + e * h * inter,
                        sizeof(T) * (size_t)(h * inter));
            std::memcpy(wd.data(), all_experts.down.data() + e * inter * h,
                        sizeof(T) * (size_t)(h * inter));
            Tensor<T> y = matmul(silu_glu(matmul(x, wg), matmul(x, wu)), wd);
            const T wv = weights(t, k);
            for (int64_t c = 0; c < h; ++c) out(t, c) += wv * y(0, c);
        }
    }
    return out;
}

// convenience: deterministic expert/router weights for tests and the bench path
template <typename T>
ExpertWeights<T> init_expert_weights(const MoeConfig& cfg, int ep_rank, uint64_t seed,
                                     double stddev = 0.02) {
    const int64_t nr = cfg.experts_per_rank();
    ExpertWeights<T> w;
    w.router = normal_init<T>({cfg.hidden, cfg.n_experts}, seed, fnv1a("moe.router"), stddev);
    // slice this rank's experts out of the full deterministic stream so every
    // topology sees the same logical expert parameters
    Tensor<T> gate_full = normal_init<T>({cfg.n_experts, cfg.hidden, cfg.intermediate}, seed,
                                         fnv1a("moe.gate"), stddev);
    Tensor<T> up_full = normal_init<T>({cfg.n_experts, cfg.hidden, cfg.intermediate}, seed,
                                       fnv1a("moe.up"), stddev);
    Tensor<T> down_full = normal_init<T>({cfg.n_experts, cfg.intermediate, cfg.hidden}, seed,
                                         fnv1a("moe.down"), stddev);
    const int64_t e0 = (int64_t)ep_rank * nr;
    w.gate = Tensor<T>({nr, cfg.hidden, cfg.intermediate});
    w.up = Tensor<T>({nr, cfg.hidden, cfg.intermediate});
    w.down = Tensor<T>({nr, cfg.intermediate, cfg.hidden});
    const int64_t block = cfg.hidden * cfg.intermediate;
    std::memcpy(w.gate.data(), gate_full.data() + e0 * block, sizeof(T) * (size_t)(nr * block));
    std::memcpy(w.up.data(), up_full.data() + e0 * block, sizeof(T) * (size_t)(nr * block));
    std::memcpy(w.down.data(), down_full.data() + e0 * block, sizeof(T) * (size_t)(nr * block));
    return w;
}

// JSON debug dump of the integer routing state (golden-file friendly)
std::string routing_artifacts_json(const RoutingArtifacts& art);

}  // namespace optimus

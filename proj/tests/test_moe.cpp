#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "optimus/moe.hpp"
#include "test_util.hpp"

using namespace optimus;

namespace {

// the running four-token example: routing table for T=4 gathered tokens, K=2,
// N=4 experts over EP=2 (rank 0 hosts experts {0,1}, rank 1 hosts {2,3})
TensorI four_token_routing() {
    return TensorI({4, 2}, {0, 1, 0, 2, 1, 3, 2, 3});
}

MoeConfig four_token_cfg(int64_t token_block = 8) {
    MoeConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.hidden = 4;
    cfg.intermediate = 4;
    cfg.ep = 2;
    cfg.token_block = token_block;
    return cfg;
}

// brute-force counting oracle, no thread decomposition
std::pair<TensorI, TensorI> count_oracle(const TensorI& indices, int64_t n_start, int64_t nr) {
    TensorI per_expert({nr});
    TensorI per_token({indices.dim(0)});
    for (int64_t t = 0; t < indices.dim(0); ++t)
        for (int64_t k = 0; k < indices.dim(1); ++k) {
            const int64_t n = indices(t, k);
            if (n >= n_start && n < n_start + nr) {
                per_expert(n - n_start)++;
                per_token(t)++;
            }
        }
    return {per_expert, per_token};
}

TEST(CountTokens, WorkedFourTokenExample) {
    RoutingArtifacts art = count_tokens(four_token_routing(), 0, four_token_cfg());
    tu::expect_tensor_eq(art.token_counts, TensorI({2}, {2, 2}));
    tu::expect_tensor_eq(art.expert_counts, TensorI({4}, {2, 1, 1, 0}));
    tu::expect_tensor_eq(art.cum_token_counts, TensorI({3}, {0, 2, 4}));
    tu::expect_tensor_eq(art.cum_expert_counts, TensorI({5}, {0, 2, 3, 4, 4}));
    EXPECT_EQ(art.rt, 4);

    RoutingArtifacts art1 = count_tokens(four_token_routing(), 1, four_token_cfg());
    tu::expect_tensor_eq(art1.token_counts, TensorI({2}, {2, 2}));
    EXPECT_EQ(art1.rt, 4);
}

TEST(CountTokens, NoLocalSelectionsGivesEmptyWork) {
    TensorI indices({3, 1}, {2, 3, 2});
    MoeConfig cfg = four_token_cfg();
    cfg.top_k = 1;
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    EXPECT_EQ(art.rt, 0);
    tu::expect_tensor_eq(art.token_counts, TensorI({2}, {0, 0}));
    generate_indices(indices, 0, cfg, art);
    EXPECT_EQ(art.input_indices.numel(), 0);
}

TEST(CountTokens, SingleRankSeesEverySelection) {
    MoeConfig cfg;
    cfg.n_experts = 6;
    cfg.top_k = 3;
    cfg.ep = 1;
    Rng rng(5);
    TensorI indices({17, 3});
    for (int64_t t = 0; t < 17; ++t)
        for (int64_t k = 0; k < 3; ++k) indices(t, k) = (int64_t)rng.next_below(6);
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    EXPECT_EQ(art.rt, 17 * 3);
    int64_t sum = 0;
    for (int64_t e = 0; e < 6; ++e) sum += art.token_counts(e);
    EXPECT_EQ(sum, art.rt);
}

TEST(CountTokens, MatchesNaiveOracleAcrossRandomTables) {
    Rng rng(6);
    for (int it = 0; it < 50; ++it) {
        MoeConfig cfg;
        cfg.ep = 1 + (int)rng.next_below(4);
        cfg.n_experts = cfg.ep * (1 + (int64_t)rng.next_below(4));
        cfg.top_k = 1 + (int64_t)rng.next_below(std::min<uint64_t>(3, (uint64_t)cfg.n_experts));
        cfg.token_block = 1 + (int64_t)rng.next_below(5);
        const int64_t t_total = 1 + (int64_t)rng.next_below(30);
        TensorI indices({t_total, cfg.top_k});
        for (int64_t i = 0; i < indices.numel(); ++i)
            indices.data()[i] = (int64_t)rng.next_below((uint64_t)cfg.n_experts);
        const int rank = (int)rng.next_below((uint64_t)cfg.ep);
        RoutingArtifacts art = count_tokens(indices, rank, cfg);
        auto [per_expert, per_token] =
            count_oracle(indices, rank * cfg.experts_per_rank(), cfg.experts_per_rank());
        tu::expect_tensor_eq(art.token_counts, per_expert);
        tu::expect_tensor_eq(art.expert_counts, per_token);
    }
}

TEST(CountTokens, OutOfRangeExpertThrows) {
    TensorI indices({2, 2}, {0, 1, 2, 7});
    EXPECT_THROW(count_tokens(indices, 0, four_token_cfg()), ContractError);
}

TEST(GenerateIndices, WorkedFourTokenExample) {
    MoeConfig cfg = four_token_cfg();
    RoutingArtifacts art = count_tokens(four_token_routing(), 0, cfg);
    generate_indices(four_token_routing(), 0, cfg, art);
    tu::expect_tensor_eq(art.input_indices, TensorI({4}, {0, 1, 0, 2}));
    tu::expect_tensor_eq(art.output_indices, TensorI({4}, {0, 2, 1, 3}));
    // token 2's only rank-0 selection (expert 1) is its first choice, so the
    // stored top-k column is 0, not the local expert number
    tu::expect_tensor_eq(art.selected_k, TensorI({4}, {0, 1, 0, 0}));
}

TEST(GenerateIndices, CursorsEndAtPartialBoundaries) {
    MoeConfig cfg = four_token_cfg(/*token_block=*/1);
    RoutingArtifacts art = count_tokens(four_token_routing(), 0, cfg);
    generate_indices(four_token_routing(), 0, cfg, art);
    for (int64_t ln = 0; ln < 2; ++ln)
        for (int64_t tid = 0; tid < art.th; ++tid)
            EXPECT_EQ(art.counter(ln, tid), art.partial_cum(ln * art.th + tid + 1));
}

TEST(GenerateIndices, MatchesStableSortOracle) {
    Rng rng(7);
    for (int it = 0; it < 40; ++it) {
        MoeConfig cfg;
        cfg.ep = 1 + (int)rng.next_below(3);
        cfg.n_experts = cfg.ep * (1 + (int64_t)rng.next_below(5));
        cfg.top_k = 1 + (int64_t)rng.next_below(std::min<uint64_t>(4, (uint64_t)cfg.n_experts));
        cfg.token_block = 1 + (int64_t)rng.next_below(6);
        const int64_t t_total = 1 + (int64_t)rng.next_below(25);
        TensorI indices({t_total, cfg.top_k});
        for (int64_t t = 0; t < t_total; ++t) {
            // distinct experts per token, like a real top-k selection
            std::vector<int64_t> pool((size_t)cfg.n_experts);
            for (size_t i = 0; i < pool.size(); ++i) pool[i] = (int64_t)i;
            for (int64_t k = 0; k < cfg.top_k; ++k) {
                const size_t pick = (size_t)rng.next_below(pool.size() - (size_t)k);
                std::swap(pool[pick], pool[pool.size() - 1 - (size_t)k]);
                indices(t, k) = pool[pool.size() - 1 - (size_t)k];
            }
        }
        const int rank = (int)rng.next_below((uint64_t)cfg.ep);
        const int64_t n_start = rank * cfg.experts_per_rank();
        RoutingArtifacts art = count_tokens(indices, rank, cfg);
        generate_indices(indices, rank, cfg, art);

        // oracle: local selections sorted stably by expert, preserving token order
        struct Sel {
            int64_t expert, token, k;
        };
        std::vector<Sel> sels;
        for (int64_t t = 0; t < t_total; ++t)
            for (int64_t k = 0; k < cfg.top_k; ++k) {
                const int64_t n = indices(t, k);
                if (n >= n_start && n < n_start + cfg.experts_per_rank())
                    sels.push_back({n - n_start, t, k});
            }
        std::vector<Sel> by_expert = sels;
        std::stable_sort(by_expert.begin(), by_expert.end(),
                         [](const Sel& a, const Sel& b) { return a.expert < b.expert; });
        ASSERT_EQ((int64_t)by_expert.size(), art.rt);
        for (int64_t r = 0; r < art.rt; ++r)
            ASSERT_EQ(art.input_indices(r), by_expert[(size_t)r].token);
        // output_indices is a permutation of [0, RT)
        std::vector<char> hit((size_t)art.rt, 0);
        for (int64_t r = 0; r < art.rt; ++r) {
            ASSERT_GE(art.output_indices(r), 0);
            ASSERT_LT(art.output_indices(r), art.rt);
            ASSERT_FALSE(hit[(size_t)art.output_indices(r)]);
            hit[(size_t)art.output_indices(r)] = 1;
        }
        // token-sorted slots carry the top-k column and point at a row of the
        // right expert group that holds the right token
        for (int64_t pos = 0; pos < art.rt; ++pos) {
            const Sel& s = sels[(size_t)pos];  // sels is already in (token, k) order
            ASSERT_EQ(art.selected_k(pos), s.k);
            const int64_t row = art.output_indices(pos);
            ASSERT_EQ(art.input_indices(row), s.token);
            ASSERT_GE(row, art.cum_token_counts(s.expert));
            ASSERT_LT(row, art.cum_token_counts(s.expert + 1));
        }
    }
}

TEST(GenerateIndices, OutputsInvariantToTokenBlockChoice) {
    TensorI indices = four_token_routing();
    RoutingArtifacts base = count_tokens(indices, 0, four_token_cfg(8));
    generate_indices(indices, 0, four_token_cfg(8), base);
    for (int64_t tbs : {1, 2, 3, 4}) {
        MoeConfig cfg = four_token_cfg(tbs);
        RoutingArtifacts art = count_tokens(indices, 0, cfg);
        generate_indices(indices, 0, cfg, art);
        EXPECT_EQ(art.th, (4 + tbs - 1) / tbs);
        tu::expect_tensor_eq(art.input_indices, base.input_indices);
        tu::expect_tensor_eq(art.output_indices, base.output_indices);
        tu::expect_tensor_eq(art.selected_k, base.selected_k);
        tu::expect_tensor_eq(art.cum_token_counts, base.cum_token_counts);
    }
}

TEST(ArtifactsJson, DumpCarriesAllIntegerFields) {
    MoeConfig cfg = four_token_cfg();
    RoutingArtifacts art = count_tokens(four_token_routing(), 0, cfg);
    generate_indices(four_token_routing(), 0, cfg, art);
    nlohmann::json j = nlohmann::json::parse(routing_artifacts_json(art));
    EXPECT_EQ(j["rt"], 4);
    EXPECT_EQ(j["t_total"], 4);
    EXPECT_EQ(j["input_indices"], (std::vector<int64_t>{0, 1, 0, 2}));
    EXPECT_EQ(j["output_indices"], (std::vector<int64_t>{0, 2, 1, 3}));
    EXPECT_EQ(j["selected_k"], (std::vector<int64_t>{0, 1, 0, 0}));
    EXPECT_EQ(j["token_counts"], (std::vector<int64_t>{2, 2}));
}

TEST(Route, PicksTheDominantExpert) {
    MoeConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 1;
    cfg.hidden = 3;
    cfg.intermediate = 4;
    TensorF router({3, 4});
    router(0, 3) = 10.0f;
    TensorF input({1, 3}, {1.0f, 0.0f, 0.0f});
    RouteResult<float> r = route(input, router, cfg);
    EXPECT_EQ(r.indices(0, 0), 3);
    EXPECT_GT(r.weights(0, 0), 0.99f);
}

TEST(Route, NormalizedWeightsSumToOne) {
    MoeConfig cfg;
    cfg.n_experts = 8;
    cfg.top_k = 3;
    cfg.hidden = 6;
    cfg.normalize_topk = true;
    TensorF router = tu::randn<float>({6, 8}, 21);
    TensorF input = tu::randn<float>({5, 6}, 22);
    RouteResult<float> r = route(input, router, cfg);
    for (int64_t s = 0; s < 5; ++s) {
        float sum = 0;
        for (int64_t k = 0; k < 3; ++k) sum += r.weights(s, k);
        ASSERT_NEAR(sum, 1.0f, 1e-6);
    }
}

TEST(FurRoute, RoundRobinIsExactlyUniformWhenDivisible) {
    MoeConfig cfg;
    cfg.n_experts = 8;
    cfg.top_k = 2;
    auto [weights, indices] = fur_route<float>(4, cfg);
    EXPECT_EQ(indices(0, 0), 0);
    EXPECT_EQ(indices(0, 1), 1);
    EXPECT_EQ(indices(3, 0), 6);
    EXPECT_EQ(indices(3, 1), 7);
    std::vector<int> counts(8, 0);
    for (int64_t i = 0; i < indices.numel(); ++i) counts[(size_t)indices.data()[i]]++;
    for (int c : counts) EXPECT_EQ(c, 1);
    for (int64_t i = 0; i < weights.numel(); ++i) EXPECT_FLOAT_EQ(weights.data()[i], 0.5f);
}

TEST(FurRoute, UnevenCaseSpreadsWithinOne) {
    MoeConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    auto [weights, indices] = fur_route<float>(3, cfg);  // 6 selections over 4 experts
    std::vector<int> counts(4, 0);
    for (int64_t i = 0; i < indices.numel(); ++i) counts[(size_t)indices.data()[i]]++;
    const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
    EXPECT_LE(*mx - *mn, 1);
}

TEST(GatherTokens, EpOneIsIdentityWithZeroTraffic) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        TensorF x = tu::randn<float>({5, 3}, 30);
        tu::expect_tensor_eq(gather_tokens(ctx, ctx.ep_group(), x), x);
    });
    EXPECT_EQ(w.ledger().total_sent(CollKind::allgather), 0u);
}

TEST(GatherTokens, ConcatenatesEpRanksAndChargesLedger) {
    Topology t;
    t.ep = 2;
    World w(t);
    w.run([](RankCtx& ctx) {
        TensorF x = tu::randn<float>({5, 3}, 31 + (uint64_t)ctx.rank());
        TensorF g = gather_tokens(ctx, ctx.ep_group(), x);
        ASSERT_EQ(g.dim(0), 10);
        for (int r = 0; r < 2; ++r) {
            TensorF expect = tu::randn<float>({5, 3}, 31 + (uint64_t)r);
            for (int64_t i = 0; i < 15; ++i)
                ASSERT_EQ(g.data()[r * 15 + i], expect.data()[i]);
        }
    });
    // each rank sends (EP-1) * S * H * 4 bytes for the input gather
    auto rows = w.ledger().rows();
    EXPECT_EQ(rows.at({"allgather", "EP(pp=0,dp=0,tp=0)", 0}).bytes_sent, 1u * 5u * 3u * 4u);
}

TEST(GatherTokens, BackwardOfDuplicatedGradsIsEpTimesLocal) {
    Topology t;
    t.ep = 2;
    World w(t);
    w.run([](RankCtx& ctx) {
        // both ranks hold the same full-gradient tensor
        TensorF full = tu::randn<float>({8, 3}, 33);
        TensorF back = gather_tokens_backward(ctx, ctx.ep_group(), full);
        for (int64_t i = 0; i < back.numel(); ++i)
            ASSERT_FLOAT_EQ(back.data()[i], 2.0f * full.data()[ctx.coord().ep * back.numel() + i]);
    });
}

TEST(ExpertForward, SingleExpertEqualsDenseMlpBitwise) {
    MoeConfig cfg;
    cfg.n_experts = 1;
    cfg.top_k = 1;
    cfg.hidden = 6;
    cfg.intermediate = 9;
    auto w = init_expert_weights<float>(cfg, 0, 40);
    TensorF x = tu::randn<float>({7, 6}, 41);
    TensorI indices({7, 1});
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    generate_indices(indices, 0, cfg, art);
    Tensor<float> out = expert_forward<float>(x, art, w, nullptr);
    TensorF wg({6, 9}), wu({6, 9}), wd({9, 6});
    std::memcpy(wg.data(), w.gate.data(), wg.bytes());
    std::memcpy(wu.data(), w.up.data(), wu.bytes());
    std::memcpy(wd.data(), w.down.data(), wd.bytes());
    tu::expect_tensor_eq(out, matmul(silu_glu(matmul(x, wg), matmul(x, wu)), wd));
}

TEST(ExpertForward, ZeroDownProjectionGivesZeros) {
    MoeConfig cfg;
    cfg.n_experts = 2;
    cfg.top_k = 1;
    cfg.hidden = 4;
    cfg.intermediate = 5;
    auto w = init_expert_weights<float>(cfg, 0, 42);
    scale_inplace(w.down, 0.0f);
    TensorI indices({6, 1}, {0, 1, 0, 1, 1, 0});
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    generate_indices(indices, 0, cfg, art);
    TensorF x = tu::randn<float>({6, 4}, 43);
    TensorF out = expert_forward<float>(x, art, w, nullptr);
    for (int64_t i = 0; i < out.numel(); ++i) EXPECT_FLOAT_EQ(out.data()[i], 0.0f);
}

TEST(OutputReduction, UnitWeightSingleSelectionCopiesRows) {
    MoeConfig cfg;
    cfg.n_experts = 2;
    cfg.top_k = 1;
    cfg.ep = 1;
    TensorI indices({5, 1}, {1, 0, 1, 0, 0});
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    generate_indices(indices, 0, cfg, art);
    TensorF mlp_out = tu::randn<float>({5, 3}, 50);
    TensorF weights = TensorF::full({5, 1}, 1.0f);
    TensorF out = output_reduction_forward(mlp_out, weights, art);
    for (int64_t r = 0; r < 5; ++r)
        for (int64_t c = 0; c < 3; ++c) ASSERT_EQ(out(art.input_indices(r), c), mlp_out(r, c));
}

TEST(OutputReduction, MatchesNaiveGatherScaleSum) {
    Rng rng(51);
    MoeConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.ep = 2;
    TensorI indices({12, 2});
    for (int64_t t = 0; t < 12; ++t) {
        indices(t, 0) = (int64_t)rng.next_below(4);
        indices(t, 1) = (indices(t, 0) + 1 + (int64_t)rng.next_below(3)) % 4;
    }
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    generate_indices(indices, 0, cfg, art);
    TensorF mlp_out = tu::randn<float>({art.rt, 5}, 52);
    TensorF weights = tu::randn<float>({12, 2}, 53);
    TensorF out = output_reduction_forward(mlp_out, weights, art);

    // independent row computation: a local selection of expert e by token t sits at
    // cum_token_counts[e] plus the number of earlier tokens that also picked e
    TensorF naive({12, 5});
    for (int64_t t = 0; t < 12; ++t)
        for (int64_t k = 0; k < 2; ++k) {
            const int64_t e = indices(t, k);
            if (e >= 2) continue;  // rank 0 hosts experts {0,1}
            int64_t row = art.cum_token_counts(e);
            for (int64_t tp = 0; tp < t; ++tp)
                for (int64_t kp = 0; kp < 2; ++kp)
                    if (indices(tp, kp) == e) row++;
            for (int64_t c = 0; c < 5; ++c) naive(t, c) += weights(t, k) * mlp_out(row, c);
        }
    tu::expect_tensor_eq(out, naive);
}

TEST(OutputReduction, BackwardMatchesFiniteDifferences) {
    MoeConfig cfg;
    cfg.n_experts = 3;
    cfg.top_k = 2;
    cfg.ep = 1;
    TensorI indices({6, 2}, {0, 1, 1, 2, 2, 0, 0, 2, 1, 0, 2, 1});
    RoutingArtifacts art = count_tokens(indices, 0, cfg);
    generate_indices(indices, 0, cfg, art);
    TensorD mlp_out = tu::randn<double>({art.rt, 4}, 54);
    TensorD weights = tu::randn<double>({6, 2}, 55);
    TensorD dout = tu::randn<double>({6, 4}, 56);
    auto [mlp_grad, w_grad] = output_reduction_backward(dout, mlp_out, weights, art);
    auto loss = [&] {
        TensorD out = output_reduction_forward(mlp_out, weights, art);
        double acc = 0;
        for (int64_t i = 0; i < out.numel(); ++i) acc += out.data()[i] * dout.data()[i];
        return acc;
    };
    tu::check_grad_fd(mlp_out, mlp_grad, loss, 1e-6, "mlp_out");
    tu::check_grad_fd(weights, w_grad, loss, 1e-6, "weights");
}

// ---- fused block ------------------------------------------------------------------

TEST(FastMoe, TrivialSingleExpertIsAPlainMlp) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        MoeConfig cfg;
        cfg.n_experts = 1;
        cfg.top_k = 1;
        cfg.hidden = 5;
        cfg.intermediate = 7;
        auto ew = init_expert_weights<float>(cfg, 0, 60);
        TensorF x = tu::randn<float>({6, 5}, 61);
        TensorF out = fast_moe_forward<float>(ctx, ctx.ep_group(), x, ew, cfg, false, nullptr);
        TensorF wg({5, 7}), wu({5, 7}), wd({7, 5});
        std::memcpy(wg.data(), ew.gate.data(), wg.bytes());
        std::memcpy(wu.data(), ew.up.data(), wu.bytes());
        std::memcpy(wd.data(), ew.down.data(), wd.bytes());
        TensorF mlp = matmul(silu_glu(matmul(x, wg), matmul(x, wu)), wd);
        // single expert at weight 1.0 (softmax over one logit)
        tu::expect_tensor_near(out, mlp, 1e-6);
    });
    EXPECT_EQ(w.ledger().total_sent(CollKind::allgather), 0u);
    EXPECT_EQ(w.ledger().total_sent(CollKind::reducescatter), 0u);
}

TEST(FastMoe, MatchesDenseReferenceOnSingleRank) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        Rng rng(62);
        for (int it = 0; it < 10; ++it) {
            MoeConfig cfg;
            cfg.n_experts = 2 + (int64_t)rng.next_below(6);
            cfg.top_k = 1 + (int64_t)rng.next_below((uint64_t)std::min<int64_t>(3, cfg.n_experts));
            cfg.hidden = 4 + (int64_t)rng.next_below(8);
            cfg.intermediate = 4 + (int64_t)rng.next_below(8);
            cfg.token_block = 1 + (int64_t)rng.next_below(6);
            const int64_t s = 1 + (int64_t)rng.next_below(20);
            auto ew = init_expert_weights<float>(cfg, 0, 63 + (uint64_t)it, 0.2);
            TensorF x = tu::randn<float>({s, cfg.hidden}, 64 + (uint64_t)it, 0.7);
            FastMoeState<float> st;
            TensorF fast = fast_moe_forward(ctx, ctx.ep_group(), x, ew, cfg, false, &st);
            TensorF ref = reference_moe_forward(x, ew, st.weights_g, st.indices_g, cfg);
            tu::expect_tensor_near(fast, ref, 1e-5, "fast vs reference");
        }
    });
}

TEST(FastMoe, DoublePrecisionAgreementIsTight) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        MoeConfig cfg;
        cfg.n_experts = 6;
        cfg.top_k = 2;
        cfg.hidden = 9;
        cfg.intermediate = 11;
        auto ew = init_expert_weights<double>(cfg, 0, 65, 0.2);
        TensorD x = tu::randn<double>({14, 9}, 66, 0.7);
        FastMoeState<double> st;
        TensorD fast = fast_moe_forward(ctx, ctx.ep_group(), x, ew, cfg, false, &st);
        TensorD ref = reference_moe_forward(x, ew, st.weights_g, st.indices_g, cfg);
        tu::expect_tensor_near(fast, ref, 1e-10, "fast vs reference f64");
    });
}

TEST(FastMoe, TwoRankOutputsMatchTheSingleRankRun) {
    MoeConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.hidden = 6;
    cfg.intermediate = 8;
    const int64_t s_local = 5;
    TensorD x_full = tu::randn<double>({2 * s_local, 6}, 70, 0.7);

    // single-rank baseline over the full token set
    TensorD base;
    {
        Topology t;
        World w(t);
        w.run([&](RankCtx& ctx) {
            MoeConfig c1 = cfg;
            c1.ep = 1;
            auto ew = init_expert_weights<double>(c1, 0, 71, 0.2);
            base = fast_moe_forward<double>(ctx, ctx.ep_group(), x_full, ew, c1, false, nullptr);
        });
    }
    // two-rank run on the same tokens, experts split across ranks
    std::vector<TensorD> outs(2);
    std::mutex mu;
    {
        Topology t;
        t.ep = 2;
        World w(t);
        w.run([&](RankCtx& ctx) {
            MoeConfig c2 = cfg;
            c2.ep = 2;
            auto ew = init_expert_weights<double>(c2, ctx.coord().ep, 71, 0.2);
            TensorD x_local({s_local, 6});
            std::memcpy(x_local.data(), x_full.data() + ctx.coord().ep * s_local * 6,
                        x_local.bytes());
            TensorD out = fast_moe_forward<double>(ctx, ctx.ep_group(), x_local, ew, c2, false, nullptr);
            std::lock_guard<std::mutex> lk(mu);
            outs[(size_t)ctx.coord().ep] = out;
        });
    }
    for (int r = 0; r < 2; ++r)
        for (int64_t i = 0; i < outs[(size_t)r].numel(); ++i)
            ASSERT_LE(tu::rel_err(outs[(size_t)r].data()[i], base.data()[r * s_local * 6 + i]),
                      1e-12);
}

TEST(FastMoe, ForcedUniformRoutingBalancesCountsAndPinsAuxLoss) {
    Topology t;
    t.ep = 2;
    World w(t);
    w.run([](RankCtx& ctx) {
        MoeConfig cfg;
        cfg.n_experts = 8;
        cfg.top_k = 2;
        cfg.hidden = 6;
        cfg.intermediate = 6;
        cfg.ep = 2;
        auto ew = init_expert_weights<float>(cfg, ctx.coord().ep, 72, 0.2);
        TensorF x = tu::randn<float>({8, 6}, 73 + (uint64_t)ctx.rank(), 0.7);
        FastMoeState<float> st;
        fast_moe_forward(ctx, ctx.ep_group(), x, ew, cfg, /*fur=*/true, &st);
        // 16 gathered tokens * K=2 over 8 experts -> exactly 4 each
        for (int64_t e = 0; e < 8; ++e) ASSERT_EQ(st.sel_counts(e), 4);
        ASSERT_NEAR(moe_aux_loss(st), 1.0, 1e-6);
    });
}

TEST(FastMoe, BackwardZeroGradGivesZeroEverywhere) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        MoeConfig cfg;
        cfg.n_experts = 4;
        cfg.top_k = 2;
        cfg.hidden = 5;
        cfg.intermediate = 6;
        auto ew = init_expert_weights<float>(cfg, 0, 80, 0.2);
        TensorF x = tu::randn<float>({6, 5}, 81, 0.7);
        FastMoeState<float> st;
        fast_moe_forward(ctx, ctx.ep_group(), x, ew, cfg, false, &st);
        TensorF zero({6, 5});
        MoeGrads<float> g = fast_moe_backward<float>(ctx, ctx.ep_group(), st, ew, zero, nullptr);
        EXPECT_EQ(sum_of_squares(g.router), 0.0);
        EXPECT_EQ(sum_of_squares(g.gate), 0.0);
        EXPECT_EQ(sum_of_squares(g.up), 0.0);
        EXPECT_EQ(sum_of_squares(g.down), 0.0);
        EXPECT_EQ(sum_of_squares(g.input), 0.0);
    });
}

TEST(FastMoe, BackwardMatchesFiniteDifferencesWithAuxLoss) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        MoeConfig cfg;
        cfg.n_experts = 4;
        cfg.top_k = 2;
        cfg.hidden = 6;
        cfg.intermediate = 5;
        cfg.token_block = 3;
        auto ew = init_expert_weights<double>(cfg, 0, 82, 0.3);
        TensorD x = tu::randn<double>({7, 6}, 83, 0.7);
        TensorD dout = tu::randn<double>({7, 6}, 84);
        const double coeff = 0.01;
        auto grp = ctx.ep_group();
        auto loss = [&] {
            FastMoeState<double> st;
            TensorD out = fast_moe_forward(ctx, grp, x, ew, cfg, false, &st);
            double acc = 0;
            for (int64_t i = 0; i < out.numel(); ++i) acc += out.data()[i] * dout.data()[i];
            return acc + coeff * moe_aux_loss(st);
        };
        FastMoeState<double> st;
        fast_moe_forward(ctx, grp, x, ew, cfg, false, &st);
        TensorD auxg = moe_aux_probs_grad<double>(st, coeff);
        MoeGrads<double> g = fast_moe_backward(ctx, grp, st, ew, dout, &auxg);
        tu::check_grad_fd(ew.router, g.router, loss, 1e-4, "router");
        tu::check_grad_fd(ew.gate, g.gate, loss, 1e-5, "gate");
        tu::check_grad_fd(ew.up, g.up, loss, 1e-5, "up");
        tu::check_grad_fd(ew.down, g.down, loss, 1e-5, "down");
        tu::check_grad_fd(x, g.input, loss, 1e-4, "input");
    });
}

TEST(FastMoe, BackwardHandlesNormalizedTopkWeights) {
    Topology t;
    World w(t);
    w.run([](RankCtx& ctx) {
        MoeConfig cfg;
        cfg.n_experts = 4;
        cfg.top_k = 2;
        cfg.hidden = 5;
        cfg.intermediate = 4;
        cfg.normalize_topk = true;
        auto ew = init_expert_weights<double>(cfg, 0, 85, 0.3);
        TensorD x = tu::randn<double>({5, 5}, 86, 0.7);
        TensorD dout = tu::randn<double>({5, 5}, 87);
        auto grp = ctx.ep_group();
        auto loss = [&] {
            TensorD out = fast_moe_forward<double>(ctx, grp, x, ew, cfg, false, nullptr);
            double acc = 0;
            for (int64_t i = 0; i < out.numel(); ++i) acc += out.data()[i] * dout.data()[i];
            return acc;
        };
        FastMoeState<double> st;
        fast_moe_forward(ctx, grp, x, ew, cfg, false, &st);
        MoeGrads<double> g = fast_moe_backward<double>(ctx, grp, st, ew, dout, nullptr);
        tu::check_grad_fd(ew.router, g.router, loss, 1e-4, "router (normalized)");
        tu::check_grad_fd(x, g.input, loss, 1e-4, "input (normalized)");
    });
}

// gradients of a two-rank run combine into exactly the single-rank gradients
TEST(FastMoe, TwoRankGradientsReduceToTheSingleRankOracle) {
    MoeConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.hidden = 6;
    cfg.intermediate = 7;
    const int64_t s_local = 4;
    TensorD x_full = tu::randn<double>({2 * s_local, 6}, 90, 0.7);
    TensorD dout_full = tu::randn<double>({2 * s_local, 6}, 91);

    MoeGrads<double> base;
    {
        Topology t;
        World w(t);
        w.run([&](RankCtx& ctx) {
            MoeConfig c1 = cfg;
            c1.ep = 1;
            auto ew = init_expert_weights<double>(c1, 0, 92, 0.2);
            FastMoeState<double> st;
            fast_moe_forward(ctx, ctx.ep_group(), x_full, ew, c1, false, &st);
            base = fast_moe_backward<double>(ctx, ctx.ep_group(), st, ew, dout_full, nullptr);
        });
    }
    std::vector<MoeGrads<double>> grads(2);
    std::mutex mu;
    {
        Topology t;
        t.ep = 2;
        World w(t);
        w.run([&](RankCtx& ctx) {
            MoeConfig c2 = cfg;
            c2.ep = 2;
            const int er = ctx.coord().ep;
            auto ew = init_expert_weights<double>(c2, er, 92, 0.2);
            TensorD x_local({s_local, 6}), dout_local({s_local, 6});
            std::memcpy(x_local.data(), x_full.data() + er * s_local * 6, x_local.bytes());
            std::memcpy(dout_local.data(), dout_full.data() + er * s_local * 6,
                        dout_local.bytes());
            FastMoeState<double> st;
            fast_moe_forward(ctx, ctx.ep_group(), x_local, ew, c2, false, &st);
            MoeGrads<double> g = fast_moe_backward<double>(ctx, ctx.ep_group(), st, ew, dout_local, nullptr);
            std::lock_guard<std::mutex> lk(mu);
            grads[(size_t)er] = std::move(g);
        });
    }
    // expert grads (pre-divided by EP) sum back to the full-gradient oracle
    for (int r = 0; r < 2; ++r) {
        const int64_t block = base.gate.numel() / 2;
        for (int64_t i = 0; i < block; ++i) {
            ASSERT_LE(tu::rel_err(2.0 * grads[(size_t)r].gate.data()[i],
                                  base.gate.data()[r * block + i]),
                      1e-10);
            ASSERT_LE(tu::rel_err(2.0 * grads[(size_t)r].up.data()[i],
                                  base.up.data()[r * block + i]),
                      1e-10);
            ASSERT_LE(tu::rel_err(2.0 * grads[(size_t)r].down.data()[i],
                                  base.down.data()[r * block + i]),
                      1e-10);
        }
    }
    // router grads are per-rank slices of the oracle: summed they reproduce it
    for (int64_t i = 0; i < base.router.numel(); ++i)
        ASSERT_LE(tu::rel_err(grads[0].router.data()[i] + grads[1].router.data()[i],
                              base.router.data()[i]),
                  1e-10);
    // input grads are purely local
    for (int r = 0; r < 2; ++r)
        for (int64_t i = 0; i < grads[(size_t)r].input.numel(); ++i)
            ASSERT_LE(tu::rel_err(grads[(size_t)r].input.data()[i],
                                  base.input.data()[r * s_local * 6 + i]),
                      1e-10);
}

TEST(FastMoe, RepeatedRunsAreBitwiseIdentical) {
    auto run_once = [](TensorF& out) {
        Topology t;
        t.ep = 2;
        World w(t);
        std::mutex mu;
        w.run([&](RankCtx& ctx) {
            MoeConfig cfg;
            cfg.n_experts = 6;
            cfg.top_k = 2;
            cfg.hidden = 8;
            cfg.intermediate = 10;
            cfg.ep = 2;
            auto ew = init_expert_weights<float>(cfg, ctx.coord().ep, 95, 0.2);
            TensorF x = tu::randn<float>({9, 8}, 96 + (uint64_t)ctx.coord().ep, 0.7);
            TensorF o = fast_moe_forward<float>(ctx, ctx.ep_group(), x, ew, cfg, false, nullptr);
            if (ctx.rank() == 0) {
                std::lock_guard<std::mutex> lk(mu);
                out = o;
            }
        });
    };
    TensorF a, b;
    run_once(a);
    run_once(b);
    tu::expect_tensor_eq(a, b);
}

TEST(MoeConfig, RejectsBadShapes) {
    MoeConfig cfg;
    cfg.n_experts = 6;
    cfg.ep = 4;  // 6 % 4 != 0
    EXPECT_THROW(cfg.validate(), ContractError);
    MoeConfig cfg2;
    cfg2.n_experts = 2;
    cfg2.top_k = 3;
    EXPECT_THROW(cfg2.validate(), ContractError);
}

}  // namespace

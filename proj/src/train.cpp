#include "optimus/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "optimus/data.hpp"

namespace fs = std::filesystem;

namespace optimus {

void RunConfig::validate() const {
    model.validate();
    topo.validate();
    adamw.validate();
    check(steps >= 1, "run: steps must be >= 1");
    check(microbatches >= 1, "run: microbatches must be >= 1");
    check(v_stages >= 1, "run: v_stages must be >= 1");
    check(global_batch >= 1, "run: global_batch must be >= 1");
    check(global_batch % topo.dp == 0, strcat_("run: global_batch ", global_batch,
                                               " does not divide across dp=", topo.dp));
    check((global_batch / topo.dp) % microbatches == 0,
          strcat_("run: per-rank batch ", global_batch / topo.dp, " does not split into ",
                  microbatches, " microbatches"));
    check(ckpt_every >= 0 && persist_every >= 0, "run: checkpoint cadences must be >= 0");
    check(!run_dir.empty(), "run: run_dir must be set");
    check(crash_at_byte < 0 || ckpt_every > 0,
          "run: a checkpoint-write crash needs a checkpoint cadence");
    for (const InjectedFailure& f : failures)
        check(f.step >= 1 && f.node >= 0, "run: failure entries need step >= 1 and node >= 0");
}

const char* run_outcome_name(RunOutcome o) {
    switch (o) {
        case RunOutcome::ok: return "ok";
        case RunOutcome::config_error: return "config_error";
        case RunOutcome::soft_failure: return "soft_failure";
        case RunOutcome::hard_failure: return "hard_failure";
        case RunOutcome::buffers_exhausted: return "buffers_exhausted";
    }
    return "unknown";
}

TensorI synthetic_batch(int64_t vocab, int64_t context, int64_t global_batch, int dp, int dp_rank,
                        uint64_t seed, int64_t step) {
    check(global_batch % dp == 0, "synthetic batch does not divide across dp");
    const int64_t rows = global_batch / dp;
    TensorI out({rows, context});
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t global_row = (int64_t)dp_rank * rows + r;
        Rng rng(hash_mix(hash_mix(seed ^ 0x53594e5448ull, (uint64_t)step), (uint64_t)global_row));
        // counting rows from a random start: dense vocab coverage with a
        // next-token rule a model can actually learn, so smoke runs show
        // loss moving instead of hovering at the entropy floor
        const int64_t start = (int64_t)rng.next_below((uint64_t)vocab);
        for (int64_t c = 0; c < context; ++c) out(r, c) = (start + c) % vocab;
    }
    return out;
}

std::string metrics_path(const RunConfig& cfg) { return cfg.run_dir + "/metrics.jsonl"; }
std::string checkpoint_root(const RunConfig& cfg) { return cfg.run_dir + "/checkpoints"; }

namespace {

// on resume, drop metrics lines past the restore point: those steps were
// rolled back and will be re-earned, so the file stays one clean trajectory
void trim_metrics(const std::string& path, int64_t keep_through_step) {
    std::ifstream in(path);
    if (!in) return;
    std::string kept, line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("step")) continue;
        if (j["step"].get<int64_t>() <= keep_through_step) kept += line + "\n";
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    out << kept;
}

// routing figures for the metrics line: per-invocation routed tokens per
// local expert, agreed across the world so uniformity is a global statement
struct RoutingFigures {
    bool uniform = false;
    double per_call_max = 0;
    double per_call_min = 0;
    std::vector<double> per_call;  // this rank's experts; empty without MoE layers
};

RoutingFigures routing_figures(RankCtx& ctx, const ExpertTally& tally) {
    RoutingFigures fig;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    if (tally.calls > 0) {
        fig.per_call.reserve(tally.tokens.size());
        for (int64_t n : tally.tokens) {
            const double v = (double)n / (double)tally.calls;
            fig.per_call.push_back(v);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    // pipeline stages without MoE layers stay neutral in the reduction
    TensorD ext({2});
    ext(0) = hi;
    ext(1) = -lo;
    TensorD agreed = allreduce(ctx, ctx.world_group(), ext, ReduceOp::max);
    fig.per_call_max = agreed(0);
    fig.per_call_min = -agreed(1);
    fig.uniform = std::isfinite(fig.per_call_max) && fig.per_call_max == fig.per_call_min;
    return fig;
}

void poison_local_grads(const std::vector<ParamSlot>& slots) {
    check(!slots.empty() && slots[0].grad->numel() > 0, "soft-failure injection: no gradients");
    slots[0].grad->data()[0] = std::numeric_limits<float>::quiet_NaN();
}

// what the driver reads back after the world joins; rank 0 fills it in
struct AttemptOut {
    int64_t steps_done = 0;
    double final_loss = 0;
};

void rank_worker(RankCtx& ctx, const RunConfig& cfg, CrashPlan* crash, AttemptOut* out) {
    const Topology& topo = ctx.topology();
    Model m(cfg.model, topo, ctx.coord(), cfg.seed, cfg.v_stages);
    std::vector<ParamSlot> slots = m.param_slots();
    ShardedOptimizer opt(ctx, cfg.adamw, slots, cfg.optim);
    const PipelineSchedule sched =
        pp_build_schedule(cfg.schedule, topo.pp, cfg.microbatches, cfg.v_stages);

    CheckpointSet cs(checkpoint_root(cfg));
    int64_t done = 0;  // trajectory position: steps whose update is in the weights
    const ResumePoint rp = cs.find_resume();
    if (rp.kind == ResumePoint::Kind::full_slot) {
        cs.restore_full(ctx, slots, opt, rp.slot);
        done = rp.step;
    } else if (rp.kind == ResumePoint::Kind::model_only) {
        // weights continue, optimizer restarts from scratch
        cs.restore_model_only(ctx, slots, rp.dir);
        done = rp.step;
    }
    if (ctx.rank() == 0) trim_metrics(metrics_path(cfg), done);

    std::optional<Loader> loader;
    int64_t steps_per_epoch = 0;
    if (!cfg.data_dir.empty()) {
        const ShardManifest man = load_manifest(cfg.data_dir + "/manifest.json");
        loader.emplace(cfg.data_dir, man, topo.dp, ctx.coord().dp, cfg.global_batch);
        steps_per_epoch = loader->steps_per_epoch();
        if (steps_per_epoch < 1)
            throw ConfigError(strcat_("run: corpus holds ", man.n_total,
                                      " instances, fewer than one global batch of ",
                                      cfg.global_batch));
    }

    std::ofstream metrics;
    if (ctx.rank() == 0) metrics.open(metrics_path(cfg), std::ios::app);

    TensorI batch({cfg.global_batch / topo.dp, cfg.model.context});
    for (int64_t step = done + 1; step <= cfg.steps; ++step) {
        // injected hard kills land at the step boundary, before any work
        for (const InjectedFailure& f : cfg.failures)
            if (f.kind == FailureKind::hard && f.step == step && f.node == ctx.node())
                throw HardNodeFailure(f.node, step);

        if (loader) {
            loader->seek((step - 1) % steps_per_epoch);
            check(loader->next(batch), "loader: epoch underrun");
        } else {
            batch = synthetic_batch(cfg.model.vocab, cfg.model.context, cfg.global_batch, topo.dp,
                                    ctx.coord().dp, cfg.seed, step);
        }

        m.routing_tally.reset();
        const PpLossParts parts = pp_forward_backward(ctx, m, sched, batch);

        // a sick node corrupts only its local gradients; the collective scan
        // below must catch it before any sync spreads the damage
        for (const InjectedFailure& f : cfg.failures)
            if (f.kind == FailureKind::soft_nan && f.step == step && f.node == ctx.node())
                poison_local_grads(slots);

        const int sick = detect_soft_failure(ctx, parts.ce_sum + parts.aux_sum, slots);
        if (sick >= 0) throw SoftNodeFailure(sick, step);

        // loss figures: stages hold disjoint pieces, TP peers identical
        // copies, so sum everything and divide by copies x microbatches
        TensorD sums({2});
        sums(0) = parts.ce_sum;
        sums(1) = parts.aux_sum;
        const TensorD tot = allreduce(ctx, ctx.world_group(), sums);
        const double denom = (double)(topo.dp * topo.ep * topo.tp) * (double)sched.m;
        const double ce = tot(0) / denom;
        const double aux = tot(1) / denom;
        const double loss = ce + cfg.model.aux_loss_coeff * aux;

        RoutingFigures routing;
        if (cfg.model.experts > 0) routing = routing_figures(ctx, m.routing_tally);

        const StepStats st = opt.step();

        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0)
            cs.write_full(ctx, slots, opt, step,
                          (crash != nullptr && step == cfg.crash_step) ? crash : nullptr);
        if (cfg.persist_every > 0 && step % cfg.persist_every == 0)
            cs.write_model_only(ctx, slots, step);

        if (ctx.rank() == 0) {
            nlohmann::ordered_json j;
            j["step"] = step;
            j["loss"] = loss;
            j["ce"] = ce;
            j["aux_loss"] = aux;
            j["grad_norm"] = st.grad_norm;
            j["lr"] = st.lr;
            j["tokens"] = cfg.global_batch * cfg.model.context;
            if (cfg.model.experts > 0) {
                j["routing_uniform"] = routing.uniform;
                j["expert_tokens_per_call_max"] = routing.per_call_max;
                j["expert_tokens_per_call_min"] = routing.per_call_min;
                if (!routing.per_call.empty()) j["expert_tokens_per_call"] = routing.per_call;
            }
            metrics << j.dump() << "\n";
            metrics.flush();
            out->steps_done = step;
            out->final_loss = loss;
        }
        done = step;
    }
}

}  // namespace

RunResult run_training(const RunConfig& cfg) {
    RunResult res;
    try {
        cfg.validate();
        fs::create_directories(cfg.run_dir);

        NodePlan nodes;
        for (int n = 0; n < cfg.topo.node_count(); ++n) nodes.active.push_back(n);
        nodes.buffers = cfg.buffer_nodes;
        nodes.validate();

        CrashPlan crash;
        crash.at_byte = cfg.crash_at_byte;

        for (;;) {
            WorldOptions opts;
            opts.mode = cfg.lockstep ? WorldOptions::Mode::lockstep : WorldOptions::Mode::threaded;
            opts.active_nodes = nodes.active;
            AttemptOut out;
            try {
                World w(cfg.topo, opts);
                w.run([&](RankCtx& ctx) { rank_worker(ctx, cfg, &crash, &out); });
                res.outcome = RunOutcome::ok;
                res.steps_done = out.steps_done;
                res.final_loss = out.final_loss;
                return res;
            } catch (const HardNodeFailure& f) {
                res.failed_nodes.push_back(f.node);
                res.steps_done = f.step - 1;
                if (cfg.buffer_nodes.empty()) {
                    res.outcome = RunOutcome::hard_failure;
                    res.message = f.what();
                    return res;
                }
                const std::optional<NodePlan> next = relaunch_plan(nodes, f.node);
                if (!next) {
                    res.outcome = RunOutcome::buffers_exhausted;
                    res.message = strcat_(f.what(), "; no buffer nodes left");
                    return res;
                }
                nodes = *next;
                ++res.relaunches;
            } catch (const SoftNodeFailure& f) {
                res.failed_nodes.push_back(f.node);
                res.steps_done = f.step - 1;
                if (cfg.buffer_nodes.empty()) {
                    res.outcome = RunOutcome::soft_failure;
                    res.message = f.what();
                    return res;
                }
                const std::optional<NodePlan> next = relaunch_plan(nodes, f.node);
                if (!next) {
                    res.outcome = RunOutcome::buffers_exhausted;
                    res.message = strcat_(f.what(), "; no buffer nodes left");
                    return res;
                }
                nodes = *next;
                ++res.relaunches;
            } catch (const CrashError&) {
                // power loss mid-checkpoint: the job restarts on the same
                // nodes and resumes from whichever slot is still committed
                crash.at_byte = -1;
                ++res.relaunches;
            }
        }
    } catch (const ConfigError& e) {
        res.outcome = RunOutcome::config_error;
        res.message = e.what();
    } catch (const ContractError& e) {
        res.outcome = RunOutcome::config_error;
        res.message = e.what();
    } catch (const IoError& e) {
        res.outcome = RunOutcome::config_error;
        res.message = e.what();
    }
    return res;
}

}  // namespace optimus

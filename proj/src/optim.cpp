#include "optimus/optim.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace optimus {

void AdamWConfig::validate() const {
    check(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "adamw: betas must lie in (0,1)");
    check(eps > 0, "adamw: eps must be positive");
    check(min_lr <= peak_lr, "adamw: min_lr must not exceed peak_lr");
    check(warmup_steps >= 0 && total_steps >= warmup_steps,
          "adamw: need 0 <= warmup_steps <= total_steps");
}

double lr_at_step(int64_t step, const AdamWConfig& cfg) {
    check(step >= 0, "lr_at_step: negative step");
    if (step < cfg.warmup_steps)
        return cfg.peak_lr * (double)step / (double)cfg.warmup_steps;
    if (step >= cfg.total_steps) return cfg.min_lr;
    const double t = (double)(step - cfg.warmup_steps) / (double)(cfg.total_steps - cfg.warmup_steps);
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * t));
}

const char* shard_mode_name(ShardMode m) {
    switch (m) {
        case ShardMode::ddp: return "ddp";
        case ShardMode::so: return "so";
        case ShardMode::epso: return "epso";
    }
    return "?";
}

ShardMode parse_shard_mode(const std::string& s) {
    if (s == "ddp") return ShardMode::ddp;
    if (s == "so") return ShardMode::so;
    if (s == "epso") return ShardMode::epso;
    throw ConfigError(strcat_("unknown optimizer sharding mode '", s,
                              "' (expected ddp, so, or epso)"));
}

SliceRange shard_slice(int64_t numel, int group_size, int position) {
    check(group_size >= 1 && position >= 0 && position < group_size, "shard_slice: bad position");
    const int64_t base = numel / group_size;
    SliceRange r;
    r.begin = (int64_t)position * base;
    r.end = position == group_size - 1 ? numel : r.begin + base;
    return r;
}

ShardPlan build_shard_plan(RankCtx& ctx, const std::vector<ParamSlot>& params, ShardMode mode) {
    ShardPlan plan;
    plan.mode = mode;
    const Topology& topo = ctx.world().topology();
    for (const ParamSlot& p : params) {
        check(p.weight && p.grad && p.weight->numel() == p.grad->numel(),
              strcat_("shard plan: parameter '", p.name, "' needs matching weight/grad"));
        ShardPlan::Entry e;
        if (mode == ShardMode::ddp) {
            e.own = {0, p.weight->numel()};
        } else {
            e.over_dp_ep = mode == ShardMode::epso && p.cls == ReplicationClass::non_expert;
            const int g = e.over_dp_ep ? topo.dp * topo.ep : topo.dp;
            const int pos = e.over_dp_ep ? ctx.coord().dp * topo.ep + ctx.coord().ep
                                         : ctx.coord().dp;
            e.own = shard_slice(p.weight->numel(), g, pos);
        }
        plan.entries.push_back(e);
    }
    return plan;
}

bool counts_toward_norm(ShardMode mode, ReplicationClass cls, bool tp_sharded,
                        const RankCoord& coord) {
    if (!tp_sharded && coord.tp != 0) return false;
    switch (mode) {
        case ShardMode::ddp:
            return coord.dp == 0 && (cls == ReplicationClass::expert || coord.ep == 0);
        case ShardMode::so:
            return cls == ReplicationClass::expert || coord.ep == 0;
        case ShardMode::epso:
            return true;  // slices partition every replica set exactly once
    }
    return false;
}

void adamw_update(AdamWState& st, const float* grad, int64_t n, double lr, int64_t step,
                  const AdamWConfig& cfg, float* weight_out, bool round_bf16) {
    check((int64_t)st.master.size() == n, "adamw_update: state/slice size mismatch");
    const double bc1 = 1.0 - std::pow(cfg.beta1, (double)(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.beta2, (double)(step + 1));
    for (int64_t i = 0; i < n; ++i) {
        double w = st.master[(size_t)i];
        const double g = grad[(size_t)i];
        w -= lr * cfg.weight_decay * w;  // decoupled decay on the master first
        const double m = cfg.beta1 * st.exp_avg[(size_t)i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * st.exp_avg_sq[(size_t)i] + (1.0 - cfg.beta2) * g * g;
        st.exp_avg[(size_t)i] = (float)m;
        st.exp_avg_sq[(size_t)i] = (float)v;
        w -= lr * ((double)st.exp_avg[(size_t)i] / bc1) /
             (std::sqrt((double)st.exp_avg_sq[(size_t)i] / bc2) + cfg.eps);
        st.master[(size_t)i] = (float)w;
        weight_out[(size_t)i] =
            round_bf16 ? bf16_round(st.master[(size_t)i]) : st.master[(size_t)i];
    }
}

ShardedOptimizer::ShardedOptimizer(RankCtx& ctx, const AdamWConfig& cfg,
                                   std::vector<ParamSlot> params, ShardMode mode)
    : ctx_(ctx), cfg_(cfg), params_(std::move(params)), mode_(mode) {
    cfg_.validate();
    plan_ = build_shard_plan(ctx_, params_, mode_);
    states_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        const SliceRange own = plan_.entries[i].own;
        states_[i].master.assign(params_[i].weight->data() + own.begin,
                                 params_[i].weight->data() + own.end);
        states_[i].exp_avg.assign((size_t)own.size(), 0.0f);
        states_[i].exp_avg_sq.assign((size_t)own.size(), 0.0f);
    }
}

int64_t ShardedOptimizer::state_bytes() const {
    int64_t owned = 0;
    for (const auto& e : plan_.entries) owned += e.own.size();
    return 12 * owned;  // fp32 master + exp_avg + exp_avg_sq
}

StepStats ShardedOptimizer::step() {
    StepStats stats;
    stats.step = step_count_;
    stats.lr = lr_at_step(step_count_, cfg_);
    const Topology& topo = ctx_.world().topology();

    // 1. synchronize gradients (mean over every replica) and keep the owned slice
    std::vector<std::vector<float>> slice_grads(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        const ParamSlot& p = params_[i];
        const ShardPlan::Entry& e = plan_.entries[i];
        TensorF flat({p.grad->numel()}, p.grad->vec());
        if (p.cls == ReplicationClass::non_expert && mode_ != ShardMode::epso && topo.ep > 1)
            flat = allreduce_mean(ctx_, ctx_.ep_group(), flat);
        if (mode_ == ShardMode::ddp) {
            flat = allreduce_mean(ctx_, ctx_.dp_group(), flat);
            slice_grads[i].assign(flat.data(), flat.data() + flat.numel());
        } else {
            const ProcessGroup& grp = e.over_dp_ep ? ctx_.dp_ep_group() : ctx_.dp_group();
            std::vector<int64_t> bounds;
            bounds.reserve((size_t)grp.size() + 1);
            for (int m = 0; m <= grp.size(); ++m)
                bounds.push_back(m == grp.size() ? flat.numel()
                                                 : shard_slice(flat.numel(), grp.size(), m).begin);
            TensorF slice = reducescatterv(ctx_, grp, flat, bounds);
            scale_inplace(slice, (float)(1.0 / (double)grp.size()));
            slice_grads[i].assign(slice.data(), slice.data() + slice.numel());
        }
    }

    // 2. global grad norm over the synced slices, each logical element once
    double partial = 0;
    for (size_t i = 0; i < params_.size(); ++i)
        if (counts_toward_norm(mode_, params_[i].cls, params_[i].tp_sharded, ctx_.coord()))
            for (float g : slice_grads[i]) partial += (double)g * (double)g;
    TensorD sq({1}, {partial});
    stats.grad_norm = std::sqrt(allreduce(ctx_, ctx_.world_group(), sq, ReduceOp::sum)(0));

    // 3. clip (post-warmup only by default)
    const bool clip_active = !cfg_.clip_after_warmup_only || step_count_ >= cfg_.warmup_steps;
    if (clip_active && stats.grad_norm > cfg_.clip_norm && stats.grad_norm > 0)
        stats.clip_scale = cfg_.clip_norm / stats.grad_norm;

    // 4. update owned slices and re-share the distributed weights
    for (size_t i = 0; i < params_.size(); ++i) {
        const ParamSlot& p = params_[i];
        const ShardPlan::Entry& e = plan_.entries[i];
        if (stats.clip_scale != 1.0)
            for (float& g : slice_grads[i]) g = (float)((double)g * stats.clip_scale);
        std::vector<float> updated((size_t)e.own.size());
        adamw_update(states_[i], slice_grads[i].data(), e.own.size(), stats.lr, step_count_, cfg_,
                     updated.data(), cfg_.round_weights_bf16);
        if (mode_ == ShardMode::ddp) {
            std::memcpy(p.weight->data(), updated.data(), updated.size() * sizeof(float));
        } else {
            const ProcessGroup& grp = e.over_dp_ep ? ctx_.dp_ep_group() : ctx_.dp_group();
            TensorF mine({(int64_t)updated.size()}, updated);
            TensorF full = allgatherv(ctx_, grp, mine);
            check(full.numel() == p.weight->numel(), "sharded step: gathered size mismatch");
            std::memcpy(p.weight->data(), full.data(), full.bytes());
        }
    }
    step_count_++;
    return stats;
}

MemoryReport memory_report(int64_t p_expert, int64_t p_non_expert, ShardMode mode, int dp, int ep,
                           double capacity_gb) {
    check(p_expert >= 0 && p_non_expert >= 0, "memory_report: negative parameter count");
    check(dp >= 1 && ep >= 1, "memory_report: bad group sizes");
    const double p = (double)(p_expert + p_non_expert);
    MemoryReport r;
    r.weights_bytes = 2.0 * p;
    r.grads_bytes = 2.0 * p;
    double master_scale_e = 1.0, master_scale_ne = 1.0;
    switch (mode) {
        case ShardMode::ddp: break;
        case ShardMode::so:
            master_scale_e = master_scale_ne = 1.0 / dp;
            break;
        case ShardMode::epso:
            master_scale_e = 1.0 / dp;
            master_scale_ne = 1.0 / ((double)dp * ep);
            break;
    }
    r.master_bytes = 4.0 * ((double)p_expert * master_scale_e + (double)p_non_expert * master_scale_ne);
    r.optim_bytes = 2.0 * r.master_bytes;  // two fp32 moments per master float
    r.total_bytes = r.weights_bytes + r.grads_bytes + r.master_bytes + r.optim_bytes;
    r.capacity_bytes = capacity_gb * 1e9;
    r.feasible = r.total_bytes <= r.capacity_bytes;
    return r;
}

std::string memory_report_json(const MemoryReport& r) {
    nlohmann::json j;
    j["weights_bytes"] = r.weights_bytes;
    j["grads_bytes"] = r.grads_bytes;
    j["master_bytes"] = r.master_bytes;
    j["optim_state_bytes"] = r.optim_bytes;
    j["total_bytes"] = r.total_bytes;
    j["total_gb"] = r.total_bytes / 1e9;
    j["capacity_bytes"] = r.capacity_bytes;
    j["feasible"] = r.feasible;
    return j.dump(2);
}

}  // namespace optimus

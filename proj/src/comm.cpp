#include "optimus/comm.hpp"

#include <algorithm>
#include <chrono>

namespace optimus {

const char* coll_kind_name(CollKind k) {
    switch (k) {
        case CollKind::allgather: return "allgather";
        case CollKind::allgatherv: return "allgatherv";
        case CollKind::reducescatter: return "reducescatter";
        case CollKind::allreduce: return "allreduce";
        case CollKind::broadcast: return "broadcast";
        case CollKind::all2all: return "all2all";
        case CollKind::barrier: return "barrier";
        case CollKind::sendrecv: return "sendrecv";
    }
    return "?";
}

// ---- TrafficLedger -------------------------------------------------------------

void TrafficLedger::credit(CollKind kind, const std::string& group, int rank, uint64_t sent,
                           uint64_t recv) {
    std::lock_guard<std::mutex> lk(mu_);
    Entry& e = rows_[{coll_kind_name(kind), group, rank}];
    e.bytes_sent += sent;
    e.bytes_recv += recv;
    e.count += 1;
}

std::map<TrafficLedger::Key, TrafficLedger::Entry> TrafficLedger::rows() const {
    std::lock_guard<std::mutex> lk(mu_);
    return rows_;
}

uint64_t TrafficLedger::total_sent(CollKind kind) const {
    std::lock_guard<std::mutex> lk(mu_);
    uint64_t total = 0;
    for (const auto& [key, e] : rows_)
        if (std::get<0>(key) == coll_kind_name(kind)) total += e.bytes_sent;
    return total;
}

uint64_t TrafficLedger::total_recv(CollKind kind) const {
    std::lock_guard<std::mutex> lk(mu_);
    uint64_t total = 0;
    for (const auto& [key, e] : rows_)
        if (std::get<0>(key) == coll_kind_name(kind)) total += e.bytes_recv;
    return total;
}

void TrafficLedger::dump_csv(std::ostream& os) const {
    std::lock_guard<std::mutex> lk(mu_);
    os << "collective,group,rank,bytes,count\n";
    for (const auto& [key, e] : rows_)
        os << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << ","
           << e.bytes_sent << "," << e.count << "\n";
}

void TrafficLedger::reset() {
    std::lock_guard<std::mutex> lk(mu_);
    rows_.clear();
}

// ---- World -----------------------------------------------------------------------

World::World(Topology topo, WorldOptions opts) : topo_(topo), opts_(std::move(opts)) {
    topo_.validate();
    if (opts_.active_nodes.empty()) {
        for (int i = 0; i < topo_.node_count(); ++i) opts_.active_nodes.push_back(i);
    }
    check((int)opts_.active_nodes.size() == topo_.node_count(),
          "world: active_nodes must have one entry per node slot");
}

World::~World() = default;

void World::run(const std::function<void(RankCtx&)>& fn) {
    check(!ran_, "world: run() may only be called once per world");
    ran_ = true;
    const int w = topo_.world_size();
    rank_errors_.assign((size_t)w, nullptr);
    rstate_.assign((size_t)w, RState::NotStarted);
    blocked_pred_.assign((size_t)w, nullptr);
    blocked_what_.assign((size_t)w, "");
    current_ = opts_.mode == WorldOptions::Mode::lockstep ? 0 : -1;

    std::vector<std::thread> threads;
    threads.reserve((size_t)w);
    for (int r = 0; r < w; ++r)
        threads.emplace_back([this, r, &fn] { worker_body(r, fn); });
    for (auto& t : threads) t.join();

    if (abort_error_) std::rethrow_exception(abort_error_);
    for (int r = 0; r < w; ++r)
        if (rank_errors_[(size_t)r]) std::rethrow_exception(rank_errors_[(size_t)r]);
}

void World::worker_body(int rank, const std::function<void(RankCtx&)>& fn) {
    RankCtx ctx(this, rank);
    bool aborted = false;
    try {
        if (opts_.mode == WorldOptions::Mode::lockstep) {
            std::unique_lock<std::mutex> lk(mu_);
            lockstep_wait_turn(lk, rank);
        }
        fn(ctx);
    } catch (AbortSignal&) {
        aborted = true;
    } catch (...) {
        {
            std::lock_guard<std::mutex> lk(mu_);
            rank_errors_[(size_t)rank] = std::current_exception();
        }
        abort_with(std::current_exception());
        aborted = true;
    }
    std::unique_lock<std::mutex> lk(mu_);
    rstate_[(size_t)rank] = RState::Done;
    if (opts_.mode == WorldOptions::Mode::lockstep && !abort_ && !aborted && current_ == rank)
        lockstep_pick_next(rank);
}

void World::abort_with(std::exception_ptr err) {
    std::lock_guard<std::mutex> lk(mu_);
    if (!abort_) {
        abort_ = true;
        abort_error_ = std::move(err);
    }
    cv_.notify_all();
}

void World::throw_if_abort_locked() {
    if (abort_) throw AbortSignal{};
}

void World::lockstep_wait_turn(std::unique_lock<std::mutex>& lk, int rank) {
    if (rstate_[(size_t)rank] == RState::NotStarted) rstate_[(size_t)rank] = RState::Runnable;
    cv_.wait(lk, [&] { return abort_ || current_ == rank; });
    throw_if_abort_locked();
}

void World::lockstep_pick_next(int avoid_rank) {
    const int w = topo_.world_size();
    for (int d = 1; d <= w; ++d) {
        const int r = (avoid_rank + d) % w;
        if (rstate_[(size_t)r] == RState::Done) continue;
        if (rstate_[(size_t)r] == RState::Blocked) {
            if (!blocked_pred_[(size_t)r]()) continue;
            rstate_[(size_t)r] = RState::Runnable;
            blocked_pred_[(size_t)r] = nullptr;
        }
        current_ = r;
        cv_.notify_all();
        return;
    }
    bool all_done = true;
    for (int r = 0; r < w; ++r)
        if (rstate_[(size_t)r] != RState::Done) all_done = false;
    if (all_done) {
        current_ = -1;
        cv_.notify_all();
        return;
    }
    std::string msg = "deadlock:";
    for (int r = 0; r < w; ++r)
        if (rstate_[(size_t)r] == RState::Blocked)
            msg += strcat_(" rank ", r, " waiting on [", blocked_what_[(size_t)r], "]");
    if (!abort_) {
        abort_ = true;
        abort_error_ = std::make_exception_ptr(HangError(msg));
    }
    cv_.notify_all();
}

void World::wait_for_locked(std::unique_lock<std::mutex>& lk, int rank, const std::string& what,
                            const std::function<bool()>& pred) {
    if (pred()) return;
    throw_if_abort_locked();
    if (opts_.mode == WorldOptions::Mode::lockstep) {
        rstate_[(size_t)rank] = RState::Blocked;
        blocked_pred_[(size_t)rank] = pred;
        blocked_what_[(size_t)rank] = what;
        lockstep_pick_next(rank);
        cv_.wait(lk, [&] { return abort_ || current_ == rank; });
        throw_if_abort_locked();
        return;
    }
    const auto deadline =
        std::chrono::steady_clock::now() + std::chrono::milliseconds(opts_.hang_timeout_ms);
    while (!pred()) {
        throw_if_abort_locked();
        if (cv_.wait_until(lk, deadline) == std::cv_status::timeout && !pred()) {
            throw_if_abort_locked();
            auto err = std::make_exception_ptr(
                HangError(strcat_("hang after ", opts_.hang_timeout_ms, " ms: ", what)));
            if (!abort_) {
                abort_ = true;
                abort_error_ = err;
            }
            cv_.notify_all();
            throw AbortSignal{};
        }
    }
}

std::string World::describe_site_locked(const Site& s) const {
    std::string arrived, missing;
    for (int i = 0; i < s.expected; ++i) {
        std::string& dst = s.present[(size_t)i] ? arrived : missing;
        if (!dst.empty()) dst += ",";
        dst += std::to_string(s.group.ranks[(size_t)i]);
    }
    return strcat_(coll_kind_name(s.kind), " on ", s.group.sig, ": arrived {", arrived,
                   "}, missing {", missing, "}");
}

CommPayload World::exchange(int rank, const ProcessGroup& group, int64_t seq, CollKind kind,
                            const std::string& sig, CommPayload contribution,
                            const std::function<std::vector<CommPayload>(
                                std::vector<CommPayload>&)>& combine) {
    std::unique_lock<std::mutex> lk(mu_);
    throw_if_abort_locked();
    const int pos = group.position_of(rank);
    const auto key = std::make_pair(group.sig, seq);
    auto it = sites_.find(key);
    if (it == sites_.end()) {
        it = sites_.emplace(key, Site{}).first;
        Site& s = it->second;
        s.kind = kind;
        s.sig = sig;
        s.group = group;
        s.expected = group.size();
        s.present.assign((size_t)s.expected, 0);
        s.contribs.resize((size_t)s.expected);
    }
    Site& s = it->second;
    if (s.kind != kind || s.sig != sig) {
        s.error = strcat_("collective mismatch on ", group.sig, " seq ", seq, ": site is ",
                          coll_kind_name(s.kind), "/", s.sig, " but rank ", rank, " brought ",
                          coll_kind_name(kind), "/", sig);
        if (!abort_) {
            abort_ = true;
            abort_error_ = std::make_exception_ptr(ContractError(s.error));
        }
        cv_.notify_all();
        throw ContractError(s.error);
    }
    check(!s.present[(size_t)pos],
          strcat_("collective: rank ", rank, " arrived twice at ", group.sig, " seq ", seq));
    s.present[(size_t)pos] = 1;
    s.contribs[(size_t)pos] = std::move(contribution);
    s.arrived++;
    if (s.arrived == s.expected) {
        s.results = combine(s.contribs);
        s.complete = true;
        cv_.notify_all();
    } else {
        Site* sp = &s;
        wait_for_locked(lk, rank, describe_site_locked(s),
                        [sp] { return sp->complete || !sp->error.empty(); });
        if (!s.error.empty()) throw ContractError(s.error);
    }
    CommPayload result = std::move(s.results[(size_t)pos]);
    s.picked++;
    if (s.picked == s.expected) sites_.erase(key);
    return result;
}

void World::post_mail(int src, int dst, int64_t tag, CommBlob blob) {
    std::lock_guard<std::mutex> lk(mu_);
    mail_[{src, dst, tag}].push_back(std::move(blob));
    cv_.notify_all();
}

CommBlob World::take_mail(int rank, int src, int64_t tag) {
    std::unique_lock<std::mutex> lk(mu_);
    throw_if_abort_locked();
    const auto key = std::make_tuple(src, rank, tag);
    wait_for_locked(lk, rank, strcat_("recv from rank ", src, " tag ", tag), [this, key] {
        auto it = mail_.find(key);
        return it != mail_.end() && !it->second.empty();
    });
    auto& q = mail_[key];
    CommBlob b = std::move(q.front());
    q.pop_front();
    if (q.empty()) mail_.erase(key);
    return b;
}

// ---- RankCtx groups -------------------------------------------------------------------

ProcessGroup RankCtx::world_group() const {
    std::vector<int> rs((size_t)topology().world_size());
    for (size_t i = 0; i < rs.size(); ++i) rs[i] = (int)i;
    return ProcessGroup("WORLD", std::move(rs));
}

ProcessGroup RankCtx::dp_group() const {
    const Topology& t = topology();
    RankCoord c = coord_;
    std::vector<int> rs;
    for (int d = 0; d < t.dp; ++d) {
        c.dp = d;
        rs.push_back(rank_of(t, c));
    }
    return ProcessGroup(strcat_("DP(pp=", coord_.pp, ",ep=", coord_.ep, ",tp=", coord_.tp, ")"),
                        std::move(rs));
}

ProcessGroup RankCtx::tp_group() const {
    const Topology& t = topology();
    RankCoord c = coord_;
    std::vector<int> rs;
    for (int i = 0; i < t.tp; ++i) {
        c.tp = i;
        rs.push_back(rank_of(t, c));
    }
    return ProcessGroup(strcat_("TP(pp=", coord_.pp, ",dp=", coord_.dp, ",ep=", coord_.ep, ")"),
                        std::move(rs));
}

ProcessGroup RankCtx::ep_group() const {
    const Topology& t = topology();
    RankCoord c = coord_;
    std::vector<int> rs;
    for (int e = 0; e < t.ep; ++e) {
        c.ep = e;
        rs.push_back(rank_of(t, c));
    }
    return ProcessGroup(strcat_("EP(pp=", coord_.pp, ",dp=", coord_.dp, ",tp=", coord_.tp, ")"),
                        std::move(rs));
}

ProcessGroup RankCtx::pp_group() const {
    const Topology& t = topology();
    RankCoord c = coord_;
    std::vector<int> rs;
    for (int p = 0; p < t.pp; ++p) {
        c.pp = p;
        rs.push_back(rank_of(t, c));
    }
    return ProcessGroup(strcat_("PP(dp=", coord_.dp, ",ep=", coord_.ep, ",tp=", coord_.tp, ")"),
                        std::move(rs));
}

ProcessGroup RankCtx::dp_ep_group() const {
    const Topology& t = topology();
    RankCoord c = coord_;
    std::vector<int> rs;
    for (int d = 0; d < t.dp; ++d) {
        for (int e = 0; e < t.ep; ++e) {
            c.dp = d;
            c.ep = e;
            rs.push_back(rank_of(t, c));
        }
    }
    return ProcessGroup(strcat_("DPxEP(pp=", coord_.pp, ",tp=", coord_.tp, ")"), std::move(rs));
}

// ---- barrier ---------------------------------------------------------------------------

void barrier(RankCtx& ctx, const ProcessGroup& group) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("barrier: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    ctx.world().exchange(ctx.rank(), group, ctx.next_seq(group.sig), CollKind::barrier, "barrier",
                         CommPayload{},
                         [g](std::vector<CommPayload>&) { return std::vector<CommPayload>((size_t)g); });
    ctx.world().ledger().credit(CollKind::barrier, group.label, ctx.rank(), 0, 0);
}

// ---- traffic model -----------------------------------------------------------------------

VolumeReport volume_compare(int64_t s_local, int64_t hidden, int64_t top_k, int ep,
                            int64_t n_experts, const TensorI& routing, int64_t dtype_size) {
    check(s_local >= 0 && hidden >= 1 && top_k >= 1 && ep >= 1 && dtype_size >= 1,
          "volume_compare: bad scalar argument");
    check(n_experts >= 1 && n_experts % ep == 0,
          "volume_compare: n_experts must be a positive multiple of ep");
    check(routing.rank() == 2 && routing.dim(0) == (int64_t)ep * s_local &&
              routing.dim(1) == top_k,
          strcat_("volume_compare: routing must be [ep*S, K], got ", routing.shape_str()));
    const int64_t experts_per_rank = n_experts / ep;
    VolumeReport rep;
    rep.allgather_bytes =
        (uint64_t)ep * (uint64_t)(ep - 1) * (uint64_t)s_local * (uint64_t)hidden *
        (uint64_t)dtype_size;
    std::vector<char> dest((size_t)ep);
    for (int64_t t = 0; t < routing.dim(0); ++t) {
        const int64_t owner = t / s_local;
        std::fill(dest.begin(), dest.end(), 0);
        for (int64_t k = 0; k < top_k; ++k) {
            const int64_t e = routing(t, k);
            check(e >= 0 && e < n_experts, strcat_("volume_compare: expert id ", e, " out of range"));
            dest[(size_t)(e / experts_per_rank)] = 1;
        }
        for (int64_t r = 0; r < ep; ++r)
            if (r != owner && dest[(size_t)r])
                rep.all2all_bytes += (uint64_t)hidden * (uint64_t)dtype_size;
    }
    return rep;
}

}  // namespace optimus

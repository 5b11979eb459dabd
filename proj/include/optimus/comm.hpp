#pragma once

#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <thread>
#include <tuple>
#include <vector>

#include "optimus/kernels.hpp"
#include "optimus/tensor.hpp"

namespace optimus {

// ---- topology ------------------------------------------------------------------

// Rank layout: pipeline outermost, then data, expert, tensor innermost:
//   rank = ((pp*DP + dp)*EP + ep)*TP + tp
// so EP groups are contiguous blocks of TP*EP ranks and stay within one node
// for modest tile counts.
struct Topology {
    int dp = 1;
    int tp = 1;
    int ep = 1;
    int pp = 1;
    int tiles_per_node = 12;

    int world_size() const { return dp * tp * ep * pp; }
    int node_count() const { return (world_size() + tiles_per_node - 1) / tiles_per_node; }
    void validate() const {
        check(dp >= 1 && tp >= 1 && ep >= 1 && pp >= 1, "topology: axes must be >= 1");
        check(tiles_per_node >= 1, "topology: tiles_per_node must be >= 1");
    }
};

struct RankCoord {
    int pp = 0, dp = 0, ep = 0, tp = 0;
};

inline int rank_of(const Topology& t, const RankCoord& c) {
    return ((c.pp * t.dp + c.dp) * t.ep + c.ep) * t.tp + c.tp;
}

inline RankCoord coord_of(const Topology& t, int rank) {
    RankCoord c;
    c.tp = rank % t.tp;
    rank /= t.tp;
    c.ep = rank % t.ep;
    rank /= t.ep;
    c.dp = rank % t.dp;
    rank /= t.dp;
    c.pp = rank;
    return c;
}

struct ProcessGroup {
    std::string label;        // canonical: identical on every member
    std::vector<int> ranks;   // member order; reductions run in this order
    std::string sig;          // label + member list, keys rendezvous sites

    ProcessGroup() = default;
    ProcessGroup(std::string lbl, std::vector<int> rs) : label(std::move(lbl)), ranks(std::move(rs)) {
        sig = label + ":";
        for (size_t i = 0; i < ranks.size(); ++i) {
            if (i) sig += ",";
            sig += std::to_string(ranks[i]);
        }
    }
    int size() const { return (int)ranks.size(); }
    int position_of(int rank) const {
        for (size_t i = 0; i < ranks.size(); ++i)
            if (ranks[i] == rank) return (int)i;
        return -1;
    }
};

// ---- traffic ledger --------------------------------------------------------------

enum class CollKind { allgather, allgatherv, reducescatter, allreduce, broadcast, all2all, barrier, sendrecv };

const char* coll_kind_name(CollKind k);

class TrafficLedger {
  public:
    struct Entry {
        uint64_t bytes_sent = 0;
        uint64_t bytes_recv = 0;
        uint64_t count = 0;
    };
    using Key = std::tuple<std::string, std::string, int>;  // collective, group, rank

    void credit(CollKind kind, const std::string& group, int rank, uint64_t sent, uint64_t recv);
    std::map<Key, Entry> rows() const;
    uint64_t total_sent(CollKind kind) const;
    uint64_t total_recv(CollKind kind) const;
    // schema: collective,group,rank,bytes,count  (bytes = bytes sent by that rank)
    void dump_csv(std::ostream& os) const;
    void reset();

  private:
    mutable std::mutex mu_;
    std::map<Key, Entry> rows_;
};

// ---- world / rank context ---------------------------------------------------------

struct WorldOptions {
    enum class Mode { threaded, lockstep };
    Mode mode = Mode::threaded;
    int hang_timeout_ms = 30000;
    std::vector<int> active_nodes;  // physical node id per node slot; default 0..n-1
};

class RankCtx;

// raw payload exchanged through a rendezvous site
struct CommBlob {
    std::string dtype;
    std::vector<int64_t> shape;
    std::vector<unsigned char> bytes;
};
using CommPayload = std::vector<CommBlob>;

// Single-process world: one thread per rank, collectives rendezvous through
// keyed sites. "threaded" lets ranks run concurrently with a wall-clock hang
// timeout; "lockstep" hands a baton around in deterministic round-robin order
// and detects deadlocks exactly.
class World {
  public:
    explicit World(Topology topo, WorldOptions opts = {});
    ~World();

    // spawns one worker per rank, joins them, rethrows the first rank error
    void run(const std::function<void(RankCtx&)>& fn);

    TrafficLedger& ledger() { return ledger_; }
    const Topology& topology() const { return topo_; }
    const WorldOptions& options() const { return opts_; }
    int node_slot_of_rank(int rank) const { return rank / topo_.tiles_per_node; }
    int node_of_rank(int rank) const { return opts_.active_nodes[(size_t)node_slot_of_rank(rank)]; }

    // --- internals used by the collective templates ---
    CommPayload exchange(int rank, const ProcessGroup& group, int64_t seq, CollKind kind,
                         const std::string& sig, CommPayload contribution,
                         const std::function<std::vector<CommPayload>(
                             std::vector<CommPayload>&)>& combine);
    void post_mail(int src, int dst, int64_t tag, CommBlob blob);
    CommBlob take_mail(int rank, int src, int64_t tag);

  private:
    friend class RankCtx;
    struct Site;
    struct AbortSignal {};

    void worker_body(int rank, const std::function<void(RankCtx&)>& fn);
    void abort_with(std::exception_ptr err);
    void throw_if_abort_locked();
    // blocks until pred() under mu_; lockstep hands the baton away meanwhile
    void wait_for_locked(std::unique_lock<std::mutex>& lk, int rank, const std::string& what,
                         const std::function<bool()>& pred);
    void lockstep_wait_turn(std::unique_lock<std::mutex>& lk, int rank);
    void lockstep_pick_next(int avoid_rank);
    std::string describe_site_locked(const Site& s) const;

    Topology topo_;
    WorldOptions opts_;
    TrafficLedger ledger_;

    std::mutex mu_;
    std::condition_variable cv_;
    bool abort_ = false;
    bool ran_ = false;
    std::exception_ptr abort_error_;
    std::vector<std::exception_ptr> rank_errors_;

    struct Site {
        CollKind kind;
        std::string sig;
        ProcessGroup group;
        int expected = 0;
        int arrived = 0;
        int picked = 0;
        bool complete = false;
        std::string error;
        std::vector<char> present;
        std::vector<CommPayload> contribs;
        std::vector<CommPayload> results;
    };
    std::map<std::pair<std::string, int64_t>, Site> sites_;
    std::map<std::tuple<int, int, int64_t>, std::deque<CommBlob>> mail_;

    // lockstep scheduler
    enum class RState { NotStarted, Runnable, Blocked, Done };
    std::vector<RState> rstate_;
    std::vector<std::function<bool()>> blocked_pred_;
    std::vector<std::string> blocked_what_;
    int current_ = -1;
};

class RankCtx {
  public:
    RankCtx(World* world, int rank) : world_(world), rank_(rank) {
        coord_ = coord_of(world->topology(), rank);
    }

    int rank() const { return rank_; }
    const RankCoord& coord() const { return coord_; }
    const Topology& topology() const { return world_->topology(); }
    World& world() { return *world_; }
    int node() const { return world_->node_of_rank(rank_); }

    ProcessGroup world_group() const;
    ProcessGroup dp_group() const;     // varies dp; pp/ep/tp fixed to mine
    ProcessGroup tp_group() const;
    ProcessGroup ep_group() const;
    ProcessGroup pp_group() const;
    ProcessGroup dp_ep_group() const;  // varies dp (outer) and ep (inner)

    int64_t next_seq(const std::string& group_sig) { return seqs_[group_sig]++; }

  private:
    World* world_;
    int rank_;
    RankCoord coord_;
    std::map<std::string, int64_t> seqs_;
};

// ---- collectives -------------------------------------------------------------------

namespace detail {

template <typename T>
CommBlob to_blob(const Tensor<T>& t) {
    CommBlob b;
    b.dtype = dtype_name<T>::value;
    b.shape = t.shape();
    b.bytes.resize(t.bytes());
    if (t.bytes()) std::memcpy(b.bytes.data(), t.data(), t.bytes());
    return b;
}

template <typename T>
Tensor<T> from_blob(const CommBlob& b) {
    check(b.dtype == dtype_name<T>::value, "collective: dtype mismatch on pickup");
    Tensor<T> t(b.shape);
    if (t.bytes()) std::memcpy(t.data(), b.bytes.data(), t.bytes());
    return t;
}

template <typename T>
std::string shape_sig(const Tensor<T>& t) {
    std::string s = dtype_name<T>::value;
    for (int64_t d : t.shape()) s += strcat_("x", d);
    return s;
}

}  // namespace detail

enum class ReduceOp { sum, max };

template <typename T>
void reduce_into(std::vector<T>& acc, const T* other, size_t n, ReduceOp op) {
    if (op == ReduceOp::sum) {
        for (size_t i = 0; i < n; ++i) acc[i] += other[i];
    } else {
        for (size_t i = 0; i < n; ++i) acc[i] = std::max(acc[i], other[i]);
    }
}

// concatenation along axis 0, equal shapes on every member
template <typename T>
Tensor<T> allgather(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& local);

// concatenation along axis 0, member dim0 may differ (trailing dims must match)
template <typename T>
Tensor<T> allgatherv(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& local);

// elementwise reduce over members in group order, then member i keeps chunk i of axis 0
template <typename T>
Tensor<T> reducescatter(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& full,
                        ReduceOp op = ReduceOp::sum);

template <typename T>
Tensor<T> allreduce(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& x,
                    ReduceOp op = ReduceOp::sum);

// root is a global rank that must be a member; everyone returns root's tensor
template <typename T>
Tensor<T> broadcast(RankCtx& ctx, const ProcessGroup& group, int root, const Tensor<T>& x);

// chunks[j] goes to member j; returns the chunks received, indexed by sender position
template <typename T>
std::vector<Tensor<T>> all2all(RankCtx& ctx, const ProcessGroup& group,
                               const std::vector<Tensor<T>>& chunks);

void barrier(RankCtx& ctx, const ProcessGroup& group);

template <typename T>
void send(RankCtx& ctx, int dst, int64_t tag, const Tensor<T>& t);

template <typename T>
Tensor<T> recv(RankCtx& ctx, int src, int64_t tag);

// sum then multiply by 1/|group| on every member (identical arithmetic everywhere)
template <typename T>
Tensor<T> allreduce_mean(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& x) {
    Tensor<T> r = allreduce(ctx, group, x, ReduceOp::sum);
    scale_inplace(r, (T)(1.0 / (double)group.size()));
    return r;
}

template <typename T>
Tensor<T> reducescatter_mean(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& full) {
    Tensor<T> r = reducescatter(ctx, group, full, ReduceOp::sum);
    scale_inplace(r, (T)(1.0 / (double)group.size()));
    return r;
}

// ---- template definitions -----------------------------------------------------------

template <typename T>
Tensor<T> allgather(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& local) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("allgather: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    const std::string sig = "allgather/" + detail::shape_sig(local);
    CommPayload mine{detail::to_blob(local)};
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::allgather, sig, std::move(mine),
        [g](std::vector<CommPayload>& contribs) {
            CommBlob cat;
            cat.dtype = contribs[0][0].dtype;
            cat.shape = contribs[0][0].shape;
            cat.shape[0] *= g;
            for (auto& c : contribs)
                cat.bytes.insert(cat.bytes.end(), c[0].bytes.begin(), c[0].bytes.end());
            return std::vector<CommPayload>((size_t)g, CommPayload{cat});
        });
    ctx.world().ledger().credit(CollKind::allgather, group.label, ctx.rank(),
                                (uint64_t)(g - 1) * local.bytes(), (uint64_t)(g - 1) * local.bytes());
    return detail::from_blob<T>(out[0]);
}

template <typename T>
Tensor<T> allgatherv(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& local) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("allgatherv: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    std::string sig = strcat_("allgatherv/", dtype_name<T>::value, "/rank", local.rank());
    for (int i = 1; i < local.rank(); ++i) sig += strcat_("x", local.dim(i));
    CommPayload mine{detail::to_blob(local)};
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::allgatherv, sig, std::move(mine),
        [g](std::vector<CommPayload>& contribs) {
            CommBlob cat;
            cat.dtype = contribs[0][0].dtype;
            cat.shape = contribs[0][0].shape;
            cat.shape[0] = 0;
            for (auto& c : contribs) {
                cat.shape[0] += c[0].shape[0];
                cat.bytes.insert(cat.bytes.end(), c[0].bytes.begin(), c[0].bytes.end());
            }
            return std::vector<CommPayload>((size_t)g, CommPayload{cat});
        });
    Tensor<T> result = detail::from_blob<T>(out[0]);
    ctx.world().ledger().credit(CollKind::allgatherv, group.label, ctx.rank(),
                                (uint64_t)(g - 1) * local.bytes(),
                                result.bytes() - local.bytes());
    return result;
}

template <typename T>
Tensor<T> reducescatter(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& full,
                        ReduceOp op) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("reducescatter: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    check(full.dim(0) % g == 0,
          strcat_("reducescatter: leading dim ", full.dim(0), " not divisible by group size ", g));
    const std::string sig = strcat_("reducescatter/", (int)op, "/", detail::shape_sig(full));
    CommPayload mine{detail::to_blob(full)};
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::reducescatter, sig, std::move(mine),
        [g, op](std::vector<CommPayload>& contribs) {
            const size_t n = contribs[0][0].bytes.size() / sizeof(T);
            std::vector<T> acc(n);
            std::memcpy(acc.data(), contribs[0][0].bytes.data(), n * sizeof(T));
            for (int m = 1; m < g; ++m)
                reduce_into(acc, (const T*)contribs[(size_t)m][0].bytes.data(), n, op);
            std::vector<int64_t> chunk_shape = contribs[0][0].shape;
            chunk_shape[0] /= g;
            const size_t chunk_elems = n / (size_t)g;
            std::vector<CommPayload> results((size_t)g);
            for (int m = 0; m < g; ++m) {
                CommBlob b;
                b.dtype = contribs[0][0].dtype;
                b.shape = chunk_shape;
                b.bytes.resize(chunk_elems * sizeof(T));
                std::memcpy(b.bytes.data(), acc.data() + (size_t)m * chunk_elems,
                            chunk_elems * sizeof(T));
                results[(size_t)m] = CommPayload{std::move(b)};
            }
            return results;
        });
    const uint64_t chunk_bytes = full.bytes() / (uint64_t)g;
    ctx.world().ledger().credit(CollKind::reducescatter, group.label, ctx.rank(),
                                (uint64_t)(g - 1) * chunk_bytes, (uint64_t)(g - 1) * chunk_bytes);
    return detail::from_blob<T>(out[0]);
}

// reducescatter with caller-chosen contiguous slices of a flat buffer; slice i
// (given as flat element offsets, partitioning [0, numel)) lands on member i
template <typename T>
Tensor<T> reducescatterv(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& full,
                         const std::vector<int64_t>& bounds, ReduceOp op = ReduceOp::sum) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("reducescatterv: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    check((int)bounds.size() == g + 1 && bounds.front() == 0 && bounds.back() == full.numel(),
          strcat_("reducescatterv: bounds must partition [0,", full.numel(), ")"));
    std::string sig = strcat_("reducescatterv/", (int)op, "/", detail::shape_sig(full));
    for (int64_t b : bounds) sig += strcat_(",", b);
    CommPayload mine{detail::to_blob(full)};
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::reducescatter, sig, std::move(mine),
        [g, op, &bounds](std::vector<CommPayload>& contribs) {
            const size_t n = contribs[0][0].bytes.size() / sizeof(T);
            std::vector<T> acc(n);
            std::memcpy(acc.data(), contribs[0][0].bytes.data(), n * sizeof(T));
            for (int m = 1; m < g; ++m)
                reduce_into(acc, (const T*)contribs[(size_t)m][0].bytes.data(), n, op);
            std::vector<CommPayload> results((size_t)g);
            for (int m = 0; m < g; ++m) {
                CommBlob b;
                b.dtype = contribs[0][0].dtype;
                b.shape = {bounds[(size_t)m + 1] - bounds[(size_t)m]};
                b.bytes.resize((size_t)b.shape[0] * sizeof(T));
                std::memcpy(b.bytes.data(), acc.data() + bounds[(size_t)m],
                            b.bytes.size());
                results[(size_t)m] = CommPayload{std::move(b)};
            }
            return results;
        });
    const uint64_t own_bytes = (uint64_t)(bounds[(size_t)pos + 1] - bounds[(size_t)pos]) * sizeof(T);
    ctx.world().ledger().credit(CollKind::reducescatter, group.label, ctx.rank(),
                                full.bytes() - own_bytes, (uint64_t)(g - 1) * own_bytes);
    return detail::from_blob<T>(out[0]);
}

template <typename T>
Tensor<T> allreduce(RankCtx& ctx, const ProcessGroup& group, const Tensor<T>& x, ReduceOp op) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("allreduce: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    const std::string sig = strcat_("allreduce/", (int)op, "/", detail::shape_sig(x));
    CommPayload mine{detail::to_blob(x)};
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::allreduce, sig, std::move(mine),
        [g, op](std::vector<CommPayload>& contribs) {
            const size_t n = contribs[0][0].bytes.size() / sizeof(T);
            std::vector<T> acc(n);
            std::memcpy(acc.data(), contribs[0][0].bytes.data(), n * sizeof(T));
            for (int m = 1; m < g; ++m)
                reduce_into(acc, (const T*)contribs[(size_t)m][0].bytes.data(), n, op);
            CommBlob b;
            b.dtype = contribs[0][0].dtype;
            b.shape = contribs[0][0].shape;
            b.bytes.resize(n * sizeof(T));
            std::memcpy(b.bytes.data(), acc.data(), n * sizeof(T));
            return std::vector<CommPayload>((size_t)g, CommPayload{std::move(b)});
        });
    // ring-style accounting: reducescatter then allgather of the reduced chunks
    const uint64_t chunk_bytes = x.bytes() / (uint64_t)g;
    ctx.world().ledger().credit(CollKind::allreduce, group.label, ctx.rank(),
                                2 * (uint64_t)(g - 1) * chunk_bytes,
                                2 * (uint64_t)(g - 1) * chunk_bytes);
    return detail::from_blob<T>(out[0]);
}

template <typename T>
Tensor<T> broadcast(RankCtx& ctx, const ProcessGroup& group, int root, const Tensor<T>& x) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("broadcast: rank ", ctx.rank(), " not in group ", group.sig));
    const int root_pos = group.position_of(root);
    check(root_pos >= 0, strcat_("broadcast: root ", root, " not in group ", group.sig));
    const int g = group.size();
    const bool is_root = ctx.rank() == root;
    const std::string sig = strcat_("broadcast/", root, "/", dtype_name<T>::value);
    CommPayload mine;
    if (is_root) mine.push_back(detail::to_blob(x));
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::broadcast, sig, std::move(mine),
        [g, root_pos](std::vector<CommPayload>& contribs) {
            check(!contribs[(size_t)root_pos].empty(), "broadcast: root contributed no tensor");
            return std::vector<CommPayload>((size_t)g, contribs[(size_t)root_pos]);
        });
    Tensor<T> result = detail::from_blob<T>(out[0]);
    ctx.world().ledger().credit(CollKind::broadcast, group.label, ctx.rank(),
                                is_root ? (uint64_t)(g - 1) * result.bytes() : 0,
                                is_root ? 0 : result.bytes());
    return result;
}

template <typename T>
std::vector<Tensor<T>> all2all(RankCtx& ctx, const ProcessGroup& group,
                               const std::vector<Tensor<T>>& chunks) {
    const int pos = group.position_of(ctx.rank());
    check(pos >= 0, strcat_("all2all: rank ", ctx.rank(), " not in group ", group.sig));
    const int g = group.size();
    check((int)chunks.size() == g,
          strcat_("all2all: need ", g, " chunks, got ", chunks.size()));
    std::string sig = strcat_("all2all/", dtype_name<T>::value, "/", g);
    CommPayload mine;
    uint64_t sent = 0;
    for (int j = 0; j < g; ++j) {
        mine.push_back(detail::to_blob(chunks[(size_t)j]));
        if (j != pos) sent += chunks[(size_t)j].bytes();
    }
    CommPayload out = ctx.world().exchange(
        ctx.rank(), group, ctx.next_seq(group.sig), CollKind::all2all, sig, std::move(mine),
        [g](std::vector<CommPayload>& contribs) {
            std::vector<CommPayload> results((size_t)g);
            for (int recver = 0; recver < g; ++recver)
                for (int sender = 0; sender < g; ++sender)
                    results[(size_t)recver].push_back(contribs[(size_t)sender][(size_t)recver]);
            return results;
        });
    std::vector<Tensor<T>> received;
    uint64_t recv_bytes = 0;
    for (int j = 0; j < g; ++j) {
        received.push_back(detail::from_blob<T>(out[(size_t)j]));
        if (j != pos) recv_bytes += received.back().bytes();
    }
    ctx.world().ledger().credit(CollKind::all2all, group.label, ctx.rank(), sent, recv_bytes);
    return received;
}

template <typename T>
void send(RankCtx& ctx, int dst, int64_t tag, const Tensor<T>& t) {
    check(dst >= 0 && dst < ctx.topology().world_size(), "send: destination out of range");
    ctx.world().post_mail(ctx.rank(), dst, tag, detail::to_blob(t));
    ctx.world().ledger().credit(CollKind::sendrecv, "p2p", ctx.rank(), t.bytes(), 0);
}

template <typename T>
Tensor<T> recv(RankCtx& ctx, int src, int64_t tag) {
    CommBlob b = ctx.world().take_mail(ctx.rank(), src, tag);
    Tensor<T> t = detail::from_blob<T>(b);
    ctx.world().ledger().credit(CollKind::sendrecv, "p2p", ctx.rank(), 0, t.bytes());
    return t;
}

// ---- traffic model for the routing-communication comparison --------------------------

struct VolumeReport {
    uint64_t allgather_bytes = 0;  // gather every rank's tokens everywhere
    uint64_t all2all_bytes = 0;    // send each token only to ranks hosting its experts
};

// S tokens per rank, hidden width H, K selections per token, n_experts spread over ep ranks;
// routing is the full [ep*S, K] expert-id table
VolumeReport volume_compare(int64_t s_local, int64_t hidden, int64_t top_k, int ep,
                            int64_t n_experts, const TensorI& routing, int64_t dtype_size = 4);

}  // namespace optimus

#include "optimus/reliability.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>

#include "optimus/common.hpp"
#include "optimus/comm.hpp"
#include "optimus/optim.hpp"

namespace fs = std::filesystem;
using namespace optimus;

namespace {

std::string fresh_dir(const std::string& name) {
    const std::string dir = ::testing::TempDir() + "reliability_" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    EXPECT_TRUE(in.good()) << path;
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& b) {
    std::ofstream out(path, std::ios::binary);
    out.write(b.data(), (std::streamsize)b.size());
}

std::map<std::string, std::string> dir_contents(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const fs::directory_entry& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) out[e.path().filename().string()] = read_bytes(e.path().string());
    return out;
}

// standalone parameter set: the checkpoint machinery only sees ParamSlot
// lists, so tests drive it with hand-built tensors instead of a full model
struct Rig {
    std::vector<std::unique_ptr<TensorF>> store;
    std::vector<ParamSlot> slots;

    void add(const std::string& name, std::vector<int64_t> shape, ReplicationClass cls,
             uint64_t seed) {
        auto w = std::make_unique<TensorF>(shape);
        auto g = std::make_unique<TensorF>(std::move(shape));
        Rng rng(seed);
        for (int64_t i = 0; i < w->numel(); ++i)
            w->data()[i] = bf16_round((float)(rng.unit() * 0.2 - 0.1));
        ParamSlot s;
        s.name = name;
        s.weight = w.get();
        s.grad = g.get();
        s.cls = cls;
        slots.push_back(s);
        store.push_back(std::move(w));
        store.push_back(std::move(g));
    }
};

// non-expert tensors are replicated across dp and ep, so they seed off the
// (pp, tp) cell only; expert tensors differ per ep rank
Rig make_rig(const RankCoord& c) {
    const uint64_t cell = hash_mix(hash_mix((uint64_t)(c.pp + 1), (uint64_t)(c.tp + 1)), 99);
    const uint64_t mine = hash_mix(cell, (uint64_t)(c.ep + 1));
    Rig r;
    r.add("dense.a", {5, 3}, ReplicationClass::non_expert, hash_mix(cell, 1));
    r.add("dense.b", {7}, ReplicationClass::non_expert, hash_mix(cell, 2));
    r.add("experts.u", {2, 4, 3}, ReplicationClass::expert, hash_mix(mine, 3));
    r.add("experts.v", {6}, ReplicationClass::expert, hash_mix(mine, 4));
    return r;
}

AdamWConfig test_adamw() {
    AdamWConfig cfg;
    cfg.peak_lr = 5e-3;
    cfg.min_lr = 5e-4;
    cfg.warmup_steps = 2;
    cfg.total_steps = 100;
    return cfg;
}

void fill_grads(Rig& r, int rank, int step) {
    for (size_t i = 0; i < r.slots.size(); ++i) {
        TensorF* g = r.slots[i].grad;
        Rng rng(hash_mix(hash_mix((uint64_t)(rank + 1), fnv1a(r.slots[i].name)),
                         (uint64_t)(step + 1)));
        for (int64_t k = 0; k < g->numel(); ++k)
            g->data()[k] = (float)(rng.unit() * 2.0 - 1.0);
    }
}

struct Snap {
    std::vector<std::vector<float>> w, g, master, m1, m2;
    int64_t steps = 0;
};

Snap take_snap(const Rig& r, ShardedOptimizer& opt) {
    Snap s;
    for (const ParamSlot& p : r.slots) {
        s.w.emplace_back(p.weight->data(), p.weight->data() + p.weight->numel());
        s.g.emplace_back(p.grad->data(), p.grad->data() + p.grad->numel());
    }
    for (const AdamWState& st : opt.states()) {
        s.master.push_back(st.master);
        s.m1.push_back(st.exp_avg);
        s.m2.push_back(st.exp_avg_sq);
    }
    s.steps = opt.steps_done();
    return s;
}

void expect_bitwise(const std::vector<float>& a, const std::vector<float>& b,
                    const std::string& what) {
    ASSERT_EQ(a.size(), b.size()) << what;
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float))) << what;
}

// restore must land exactly on the written state: weights, masters, and both
// moments bitwise; grads modulo the bf16 round-trip they took through disk
void expect_restored(const Rig& r, ShardedOptimizer& opt, const Snap& want, bool check_grads) {
    const Snap got = take_snap(r, opt);
    EXPECT_EQ(want.steps, got.steps);
    for (size_t i = 0; i < want.w.size(); ++i) {
        expect_bitwise(want.w[i], got.w[i], "weights " + r.slots[i].name);
        expect_bitwise(want.master[i], got.master[i], "master " + r.slots[i].name);
        expect_bitwise(want.m1[i], got.m1[i], "first moment " + r.slots[i].name);
        expect_bitwise(want.m2[i], got.m2[i], "second moment " + r.slots[i].name);
        if (check_grads) {
            std::vector<float> rounded(want.g[i].size());
            for (size_t k = 0; k < rounded.size(); ++k) rounded[k] = bf16_round(want.g[i][k]);
            expect_bitwise(rounded, got.g[i], "grads " + r.slots[i].name);
        }
    }
}

WorldOptions lockstep_opts() {
    WorldOptions o;
    o.mode = WorldOptions::Mode::lockstep;
    return o;
}

}  // namespace

// ---- scattered writer assignment -----------------------------------------------------

TEST(ScatteredWriters, RoundRobinAssignment) {
    // one writer per model shard, walking the dp replicas in order
    for (int m = 0; m < 12; ++m) EXPECT_EQ(m, scattered_writer(m, 12));
    for (int m = 0; m < 7; ++m) EXPECT_EQ(0, scattered_writer(m, 1));
    const std::vector<int> five = {scattered_writer(0, 2), scattered_writer(1, 2),
                                   scattered_writer(2, 2), scattered_writer(3, 2),
                                   scattered_writer(4, 2)};
    EXPECT_EQ((std::vector<int>{0, 1, 0, 1, 0}), five);
}

TEST(ScatteredWriters, LoadNeverDiffersByMoreThanOne) {
    for (int M = 1; M <= 16; ++M) {
        for (int dp = 1; dp <= 8; ++dp) {
            std::vector<int> load((size_t)dp, 0);
            for (int m = 0; m < M; ++m) {
                const int w = scattered_writer(m, dp);
                ASSERT_GE(w, 0);
                ASSERT_LT(w, dp);
                ++load[(size_t)w];
            }
            const auto [lo, hi] = std::minmax_element(load.begin(), load.end());
            EXPECT_LE(*hi - *lo, 1) << "M=" << M << " dp=" << dp;
        }
    }
}

TEST(ScatteredWriters, ShardIndexEnumeratesModelCells) {
    Topology t;
    t.dp = 3;
    t.tp = 2;
    t.ep = 2;
    t.pp = 2;
    EXPECT_EQ(8, model_shard_count(t));
    std::vector<int> seen;
    for (int pp = 0; pp < t.pp; ++pp)
        for (int ep = 0; ep < t.ep; ++ep)
            for (int tp = 0; tp < t.tp; ++tp)
                for (int dp = 0; dp < t.dp; ++dp)
                    seen.push_back(model_shard_index(t, RankCoord{pp, dp, ep, tp}));
    // every dp replica of a cell maps to the same shard, cells enumerate 0..M-1
    for (int i = 0; i < 8; ++i) {
        for (int d = 0; d < 3; ++d) EXPECT_EQ(i, seen[(size_t)(i * 3 + d)]);
    }
}

// ---- record files --------------------------------------------------------------------

TEST(RecordFiles, RoundTripExactly) {
    const std::string dir = fresh_dir("records");
    const std::string path = dir + "/one.bin";

    std::vector<float> a = {1.5f, -0.0f, 3.25e-7f, -42.0f, 0.1f, 2.0f};
    std::vector<float> b(12);
    for (size_t i = 0; i < b.size(); ++i) b[i] = bf16_round(0.01f * (float)i - 0.05f);

    RecordFileWriter w(path);
    w.add_f32("alpha", {2, 3}, a.data(), 6);
    w.add_bf16("beta", {3, 4}, b.data(), 12);
    const RecordFileWriter::Written done = w.finish();
    EXPECT_EQ((int64_t)fs::file_size(path), done.bytes);

    const std::vector<TensorRecord> recs = read_record_file(path);
    ASSERT_EQ(2u, recs.size());
    EXPECT_EQ("alpha", recs[0].name);
    EXPECT_EQ(RecDtype::f32, recs[0].dtype);
    EXPECT_EQ((std::vector<int64_t>{2, 3}), recs[0].dims);
    expect_bitwise(a, recs[0].as_f32(), "f32 payload");
    EXPECT_EQ("beta", recs[1].name);
    EXPECT_EQ(RecDtype::bf16, recs[1].dtype);
    // the values were bf16-representable, so the trip through disk is exact
    expect_bitwise(b, recs[1].as_f32(), "bf16 payload");
}

TEST(RecordFiles, Bf16RecordsRoundToNearestEven) {
    const std::string dir = fresh_dir("records_rounding");
    const std::string path = dir + "/lossy.bin";
    std::vector<float> vals = {1.0000001f, 3.14159265f, -2.7182818f, 1e-20f, 65504.0f};
    RecordFileWriter w(path);
    w.add_bf16("x", {5}, vals.data(), 5);
    w.finish();
    const std::vector<float> got = read_record_file(path)[0].as_f32();
    for (size_t i = 0; i < vals.size(); ++i) EXPECT_EQ(bf16_round(vals[i]), got[i]) << i;
}

TEST(RecordFiles, EmptyFileRoundTrips) {
    const std::string dir = fresh_dir("records_empty");
    const std::string path = dir + "/none.bin";
    RecordFileWriter w(path);
    const RecordFileWriter::Written done = w.finish();
    EXPECT_EQ(16, done.bytes);  // header and footer only
    EXPECT_TRUE(read_record_file(path).empty());
}

TEST(RecordFiles, CorruptionAndTruncationAreRejected) {
    const std::string dir = fresh_dir("records_bad");
    const std::string path = dir + "/x.bin";
    std::vector<float> a(20);
    for (size_t i = 0; i < a.size(); ++i) a[i] = (float)i * 0.5f;
    RecordFileWriter w(path);
    w.add_f32("x", {20}, a.data(), 20);
    w.finish();
    const std::string good = read_bytes(path);

    std::string flipped = good;
    flipped[30] = (char)(flipped[30] ^ 0x40);
    write_bytes(path, flipped);
    EXPECT_THROW(read_record_file(path), IoError);

    write_bytes(path, good.substr(0, good.size() - 3));
    EXPECT_THROW(read_record_file(path), IoError);

    std::string wrong_magic = good;
    wrong_magic[0] = 'X';
    write_bytes(path, wrong_magic);
    EXPECT_THROW(read_record_file(path), IoError);

    EXPECT_THROW(read_record_file(dir + "/missing.bin"), IoError);

    write_bytes(path, good);
    EXPECT_NO_THROW(read_record_file(path));
}

TEST(RecordFiles, InjectedCrashClipsTheStreamAtTheExactOffset) {
    const std::string dir = fresh_dir("crash_clip");
    std::vector<float> a(9);
    for (size_t i = 0; i < a.size(); ++i) a[i] = (float)i - 4.0f;

    auto write_one = [&](const std::string& path, CrashPlan* plan) {
        RecordFileWriter w(path, plan);
        w.add_f32("values", {3, 3}, a.data(), 9);
        return w.finish();
    };
    const RecordFileWriter::Written clean = write_one(dir + "/clean.bin", nullptr);
    const std::string good = read_bytes(dir + "/clean.bin");

    for (int64_t cut : {int64_t{0}, int64_t{1}, int64_t{7}, int64_t{12}, clean.bytes / 2,
                        clean.bytes - 1}) {
        const std::string path = strcat_(dir, "/cut-", cut, ".bin");
        CrashPlan plan;
        plan.at_byte = cut;
        EXPECT_THROW(write_one(path, &plan), CrashError) << cut;
        const std::string got = read_bytes(path);
        EXPECT_EQ((size_t)cut, got.size()) << cut;
        EXPECT_EQ(good.substr(0, (size_t)cut), got) << cut;
    }

    // a crash point at or past the end never fires
    CrashPlan past;
    past.at_byte = clean.bytes;
    EXPECT_NO_THROW(write_one(dir + "/past.bin", &past));
    EXPECT_EQ(good, read_bytes(dir + "/past.bin"));
}

// ---- single-rank checkpoint round trip ------------------------------------------------

TEST(Checkpoints, WriteRestoreRoundTripIsBitwise) {
    const std::string root = fresh_dir("roundtrip");
    CheckpointSet cs(root);
    Snap written;

    Topology t;
    {
        World w(t);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
            for (int s = 0; s < 3; ++s) {
                fill_grads(rig, ctx.rank(), s);
                opt.step();
            }
            written = take_snap(rig, opt);
            EXPECT_EQ(1, cs.write_full(ctx, rig.slots, opt, 100));
        });
    }
    EXPECT_TRUE(cs.slot_valid(1));
    EXPECT_FALSE(cs.slot_valid(2));
    EXPECT_EQ(100, cs.slot_step(1));

    const ResumePoint rp = cs.find_resume();
    EXPECT_EQ(ResumePoint::Kind::full_slot, rp.kind);
    EXPECT_EQ(1, rp.slot);
    EXPECT_EQ(100, rp.step);

    // manifest bookkeeping matches what landed on disk
    const CkptManifest man = load_ckpt_manifest(cs.slot_dir(1) + "/manifest.json");
    EXPECT_EQ(100, man.step);
    EXPECT_EQ(3, man.opt_steps);
    EXPECT_TRUE(man.full);
    EXPECT_EQ("so", man.mode);
    ASSERT_EQ(1u, man.shards.size());
    EXPECT_EQ("shard-0.bin", man.shards[0].file);
    EXPECT_EQ(0, man.shards[0].writer_rank);
    EXPECT_EQ((int64_t)fs::file_size(cs.slot_dir(1) + "/shard-0.bin"), man.shards[0].bytes);

    {
        World w(t);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
            fill_grads(rig, ctx.rank(), 77);  // drift away from the written state first
            opt.step();
            const int reads = cs.restore_full(ctx, rig.slots, opt, 1);
            EXPECT_EQ(1, reads);
            expect_restored(rig, opt, written, /*check_grads=*/true);

            // a second write of the same state lands in the other slot with
            // byte-identical shards: nothing drifts through a save/load cycle
            EXPECT_EQ(2, cs.write_full(ctx, rig.slots, opt, 100));
        });
    }
    EXPECT_EQ(read_bytes(cs.slot_dir(1) + "/shard-0.bin"),
              read_bytes(cs.slot_dir(2) + "/shard-0.bin"));

    // weights-only restore from a full slot works and touches only weights
    {
        World w(t);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            for (TensorF* wts : {rig.slots[0].weight, rig.slots[1].weight})
                std::fill(wts->data(), wts->data() + wts->numel(), 0.25f);
            EXPECT_EQ(1, cs.restore_model_only(ctx, rig.slots, cs.slot_dir(1)));
            for (size_t i = 0; i < rig.slots.size(); ++i) {
                const TensorF* wt = rig.slots[i].weight;
                expect_bitwise(written.w[i],
                               std::vector<float>(wt->data(), wt->data() + wt->numel()),
                               "weights " + rig.slots[i].name);
            }
        });
    }
}

TEST(Checkpoints, RotationAlternatesSlotsAndResumesTheNewest) {
    const std::string root = fresh_dir("rotation");
    CheckpointSet cs(root);
    Topology t;
    World w(t);
    w.run([&](RankCtx& ctx) {
        Rig rig = make_rig(ctx.coord());
        ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::ddp);
        fill_grads(rig, ctx.rank(), 0);
        opt.step();
        EXPECT_EQ(1, cs.write_full(ctx, rig.slots, opt, 1000));
        EXPECT_EQ(2, cs.write_full(ctx, rig.slots, opt, 2000));
        EXPECT_EQ(1, cs.write_full(ctx, rig.slots, opt, 3000));
    });
    EXPECT_EQ(3000, cs.slot_step(1));
    EXPECT_EQ(2000, cs.slot_step(2));
    const ResumePoint rp = cs.find_resume();
    EXPECT_EQ(ResumePoint::Kind::full_slot, rp.kind);
    EXPECT_EQ(1, rp.slot);
    EXPECT_EQ(3000, rp.step);
}

// ---- crash safety ---------------------------------------------------------------------

namespace {

// primes both slots (1000 then 2000) and attempts a third write at 3000 with
// an optional injected crash; state is rebuilt identically every time. The
// caller says which slot each priming write should land in: an empty root
// alternates 1 then 2, while a crashed root keeps overwriting the wrecked /
// older slot 1 so the surviving slot 2 is never put at risk.
void run_checkpoint_sequence(CheckpointSet& cs, CrashPlan* crash, int slot_a, int slot_b) {
    Topology t;
    World w(t, lockstep_opts());
    w.run([&](RankCtx& ctx) {
        Rig rig = make_rig(ctx.coord());
        ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
        for (int s = 0; s < 3; ++s) {
            fill_grads(rig, ctx.rank(), s);
            opt.step();
        }
        EXPECT_EQ(slot_a, cs.write_full(ctx, rig.slots, opt, 1000));
        EXPECT_EQ(slot_b, cs.write_full(ctx, rig.slots, opt, 2000));
        cs.write_full(ctx, rig.slots, opt, 3000, crash);
    });
}

}  // namespace

TEST(CrashRecovery, AnyWriteOffsetFallsBackToThePreviousSlot) {
    // reference run: all three writes complete, slot 1 ends at step 3000
    const std::string probe = fresh_dir("crash_probe");
    CheckpointSet probe_cs(probe);
    run_checkpoint_sequence(probe_cs, nullptr, 1, 2);
    ASSERT_EQ(3000, probe_cs.slot_step(1));
    ASSERT_EQ(2000, probe_cs.slot_step(2));
    const std::map<std::string, std::string> survivor = dir_contents(probe_cs.slot_dir(2));

    // the step-3000 write emits the shard, then the manifest, then the marker
    const int64_t shard_sz = (int64_t)fs::file_size(probe_cs.slot_dir(1) + "/shard-0.bin");
    const int64_t man_sz = (int64_t)fs::file_size(probe_cs.slot_dir(1) + "/manifest.json");
    const int64_t mark_sz = (int64_t)fs::file_size(probe_cs.slot_dir(1) + "/VALID");
    const int64_t total = shard_sz + man_sz + mark_sz;

    std::vector<int64_t> offsets = {0,          1,        17,         shard_sz - 1,
                                    shard_sz,   shard_sz + 1,         shard_sz + man_sz - 1,
                                    shard_sz + man_sz,    total - 1};
    Rng rng(42);
    for (int i = 0; i < 4; ++i) offsets.push_back(2 + (int64_t)rng.next_below((uint64_t)total - 3));

    for (const int64_t cut : offsets) {
        SCOPED_TRACE(strcat_("crash offset ", cut, " of ", total));
        const std::string root = fresh_dir(strcat_("crash_", cut));
        CheckpointSet cs(root);
        CrashPlan plan;
        plan.at_byte = cut;
        EXPECT_THROW(run_checkpoint_sequence(cs, &plan, 1, 2), CrashError);

        // the interrupted slot never becomes trustworthy and resume falls
        // back to the still-committed one
        EXPECT_FALSE(cs.slot_valid(1));
        const ResumePoint rp = cs.find_resume();
        EXPECT_EQ(ResumePoint::Kind::full_slot, rp.kind);
        EXPECT_EQ(2, rp.slot);
        EXPECT_EQ(2000, rp.step);

        // the other slot is untouched, byte for byte
        EXPECT_EQ(survivor, dir_contents(cs.slot_dir(2)));

        // a relaunch writes over the wreckage: every pick lands in slot 1
        // (first invalid, then the older step), so the survivor is never
        // opened for writing until something newer has committed
        run_checkpoint_sequence(cs, nullptr, 1, 1);
        EXPECT_EQ(survivor, dir_contents(cs.slot_dir(2)));
        const ResumePoint after = cs.find_resume();
        EXPECT_EQ(1, after.slot);
        EXPECT_EQ(3000, after.step);
    }
}

TEST(CrashRecovery, CrashPointPastTheWriteCommitsNormally) {
    const std::string root = fresh_dir("crash_past_end");
    CheckpointSet cs(root);
    CrashPlan plan;
    plan.at_byte = int64_t{1} << 40;
    run_checkpoint_sequence(cs, &plan, 1, 2);
    EXPECT_EQ(3000, cs.slot_step(1));
}

// ---- checkpoint size accounting --------------------------------------------------------

TEST(CheckpointBytes, FullStateIsSixteenBytesPerParamAndEightTimesWeightsOnly) {
    const std::string root = fresh_dir("bytes");
    CheckpointSet cs(root);
    int64_t p_total = 0;

    Topology t;
    World w(t);
    w.run([&](RankCtx& ctx) {
        Rig rig;
        rig.add("w.a", {300, 200}, ReplicationClass::non_expert, 1);
        rig.add("w.b", {317}, ReplicationClass::non_expert, 2);
        rig.add("e.u", {40, 50, 60}, ReplicationClass::expert, 3);
        rig.add("e.v", {111}, ReplicationClass::expert, 4);
        for (const ParamSlot& p : rig.slots) p_total += p.weight->numel();

        ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
        fill_grads(rig, ctx.rank(), 0);
        opt.step();
        cs.write_full(ctx, rig.slots, opt, 10);
        cs.write_model_only(ctx, rig.slots, 10);
    });

    auto shard_bytes = [](const std::string& dir) {
        int64_t sum = 0;
        for (const CkptShardStat& s : load_ckpt_manifest(dir + "/manifest.json").shards)
            sum += s.bytes;
        return sum;
    };
    const int64_t full = shard_bytes(cs.slot_dir(1));
    const int64_t model = shard_bytes(cs.persistent_dir(10));

    // bf16 weights + fp32 master + two fp32 moments + bf16 grads per element,
    // with only record headers on top
    EXPECT_GE(full, 16 * p_total);
    EXPECT_LT((double)full, 16.0 * (double)p_total * 1.01);
    EXPECT_GE(model, 2 * p_total);
    EXPECT_LT((double)model, 2.0 * (double)p_total * 1.01);

    const double ratio = (double)full / (double)model;
    EXPECT_NEAR(8.0, ratio, 0.08);

    // whole-directory totals, manifests and markers included, stay within 1%
    auto dir_bytes = [](const std::string& dir) {
        int64_t sum = 0;
        for (const fs::directory_entry& e : fs::directory_iterator(dir))
            if (e.is_regular_file()) sum += (int64_t)e.file_size();
        return sum;
    };
    const double dir_ratio =
        (double)dir_bytes(cs.slot_dir(1)) / (double)dir_bytes(cs.persistent_dir(10));
    EXPECT_NEAR(8.0, dir_ratio, 0.08);
}

// ---- persistent weights-only checkpoints ----------------------------------------------

TEST(PersistentCheckpoints, AccumulateForeverAndServeAsFallback) {
    const std::string root = fresh_dir("persistent");
    CheckpointSet cs(root);
    Snap at200;

    Topology t;
    {
        World w(t);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::ddp);
            fill_grads(rig, ctx.rank(), 0);
            opt.step();
            EXPECT_EQ(cs.persistent_dir(100), cs.write_model_only(ctx, rig.slots, 100));
            fill_grads(rig, ctx.rank(), 1);
            opt.step();
            at200 = take_snap(rig, opt);
            EXPECT_EQ(cs.persistent_dir(200), cs.write_model_only(ctx, rig.slots, 200));
        });
    }
    // nothing rotates away
    EXPECT_TRUE(fs::exists(cs.persistent_dir(100) + "/VALID"));
    EXPECT_TRUE(fs::exists(cs.persistent_dir(200) + "/VALID"));

    // with no full slot, resume falls back to the newest weights-only copy
    ResumePoint rp = cs.find_resume();
    EXPECT_EQ(ResumePoint::Kind::model_only, rp.kind);
    EXPECT_EQ(200, rp.step);
    EXPECT_EQ(cs.persistent_dir(200), rp.dir);

    {
        World w(t);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            for (const ParamSlot& p : rig.slots)
                std::fill(p.weight->data(), p.weight->data() + p.weight->numel(), 9.0f);
            EXPECT_EQ(1, cs.restore_model_only(ctx, rig.slots, rp.dir));
            for (size_t i = 0; i < rig.slots.size(); ++i) {
                const TensorF* wt = rig.slots[i].weight;
                expect_bitwise(at200.w[i],
                               std::vector<float>(wt->data(), wt->data() + wt->numel()),
                               "weights " + rig.slots[i].name);
            }
            // resuming from weights alone means fresh optimizer state
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::ddp);
            EXPECT_EQ(0, opt.steps_done());

            // once any full slot exists, it wins over newer weights-only dirs
            cs.write_full(ctx, rig.slots, opt, 50);
        });
    }
    rp = cs.find_resume();
    EXPECT_EQ(ResumePoint::Kind::full_slot, rp.kind);
    EXPECT_EQ(50, rp.step);
}

// ---- multi-rank scatter, gather, and restore -------------------------------------------

namespace {

struct ModeCase {
    ShardMode mode;
    const char* name;
};

}  // namespace

TEST(MultiRankCheckpoints, EveryShardingModeRoundTripsBitwise) {
    for (const ModeCase mc : {ModeCase{ShardMode::ddp, "ddp"}, ModeCase{ShardMode::so, "so"},
                              ModeCase{ShardMode::epso, "epso"}}) {
        SCOPED_TRACE(mc.name);
        const std::string root = fresh_dir(strcat_("multirank_", mc.name));
        CheckpointSet cs(root);

        Topology t;
        t.dp = 2;
        t.ep = 2;
        t.pp = 2;
        const int M = model_shard_count(t);  // 4 shards, writers alternate dp 0/1

        std::mutex mu;
        std::map<int, Snap> after_write, after_extra;
        {
            World w(t);
            w.run([&](RankCtx& ctx) {
                Rig rig = make_rig(ctx.coord());
                ShardedOptimizer opt(ctx, test_adamw(), rig.slots, mc.mode);
                for (int s = 0; s < 3; ++s) {
                    fill_grads(rig, ctx.rank(), s);
                    opt.step();
                }
                Snap snap = take_snap(rig, opt);
                EXPECT_EQ(1, cs.write_full(ctx, rig.slots, opt, 7));
                // keep training after the checkpoint: the write must not
                // perturb the trajectory
                fill_grads(rig, ctx.rank(), 3);
                opt.step();
                Snap extra = take_snap(rig, opt);
                std::lock_guard<std::mutex> lk(mu);
                after_write[ctx.rank()] = std::move(snap);
                after_extra[ctx.rank()] = std::move(extra);
            });
        }

        // every shard written exactly once, by the dp replica the round-robin picks
        const CkptManifest man = load_ckpt_manifest(cs.slot_dir(1) + "/manifest.json");
        ASSERT_EQ((size_t)M, man.shards.size());
        for (int m = 0; m < M; ++m) {
            const int tp = m % t.tp;
            const int ep = (m / t.tp) % t.ep;
            const int pp = m / (t.tp * t.ep);
            EXPECT_EQ(rank_of(t, RankCoord{pp, scattered_writer(m, t.dp), ep, tp}),
                      man.shards[(size_t)m].writer_rank)
                << "shard " << m;
        }

        std::atomic<int> total_reads{0};
        {
            World w(t);
            w.run([&](RankCtx& ctx) {
                Rig rig = make_rig(ctx.coord());
                ShardedOptimizer opt(ctx, test_adamw(), rig.slots, mc.mode);
                fill_grads(rig, ctx.rank(), 55);  // drift before restoring
                opt.step();

                const int reads = cs.restore_full(ctx, rig.slots, opt, 1);
                EXPECT_LE(reads, 1);
                total_reads += reads;
                {
                    std::lock_guard<std::mutex> lk(mu);
                    expect_restored(rig, opt, after_write[ctx.rank()], /*check_grads=*/false);
                }

                // resumed training continues the original trajectory bitwise
                fill_grads(rig, ctx.rank(), 3);
                opt.step();
                const Snap now = take_snap(rig, opt);
                std::lock_guard<std::mutex> lk(mu);
                const Snap& want = after_extra[ctx.rank()];
                EXPECT_EQ(want.steps, now.steps);
                for (size_t i = 0; i < want.w.size(); ++i)
                    expect_bitwise(want.w[i], now.w[i], strcat_("slot ", i, " after resume"));
            });
        }
        // each shard file is loaded once and fanned out, not read per replica
        EXPECT_EQ(M, total_reads.load());
    }
}

// ---- restore guards --------------------------------------------------------------------

TEST(RestoreGuards, WrongWorldModeOrCorruptionIsRefused) {
    const std::string root = fresh_dir("guards");
    CheckpointSet cs(root);

    Topology two;
    two.dp = 2;
    {
        World w(two);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
            fill_grads(rig, ctx.rank(), 0);
            opt.step();
            cs.write_full(ctx, rig.slots, opt, 5);
        });
    }

    // topology mismatch: checkpoint taken on dp=2 cannot land on dp=1
    {
        Topology one;
        World w(one);
        EXPECT_THROW(w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
            cs.restore_full(ctx, rig.slots, opt, 1);
        }),
                     ContractError);
    }

    // sharding-mode mismatch
    {
        World w(two);
        EXPECT_THROW(w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::ddp);
            cs.restore_full(ctx, rig.slots, opt, 1);
        }),
                     ContractError);
    }

    // a flipped payload byte invalidates the slot and fails a forced restore
    const std::string shard0 = cs.slot_dir(1) + "/shard-0.bin";
    const std::string good = read_bytes(shard0);
    std::string bad = good;
    bad[bad.size() / 2] = (char)(bad[bad.size() / 2] ^ 0x10);
    write_bytes(shard0, bad);
    EXPECT_FALSE(cs.slot_valid(1));
    EXPECT_EQ(ResumePoint::Kind::none, cs.find_resume().kind);
    {
        World w(two);
        EXPECT_THROW(w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
            cs.restore_full(ctx, rig.slots, opt, 1);
        }),
                     IoError);
    }
    write_bytes(shard0, good);
    EXPECT_TRUE(cs.slot_valid(1));

    // a checkpoint without its marker never gets selected or restored
    fs::remove(cs.slot_dir(1) + "/VALID");
    EXPECT_FALSE(cs.slot_valid(1));
    EXPECT_EQ(ResumePoint::Kind::none, cs.find_resume().kind);
    {
        World w(two);
        EXPECT_THROW(w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
            cs.restore_full(ctx, rig.slots, opt, 1);
        }),
                     IoError);
    }
}

// ---- soft failure detection -------------------------------------------------------------

TEST(SoftFailures, EveryRankAgreesOnTheFailingNode) {
    Topology t;
    t.dp = 4;
    t.tiles_per_node = 2;  // ranks {0,1} on node 0, {2,3} on node 1

    auto run_case = [&](int poison_rank, bool poison_loss, double expect) {
        std::mutex mu;
        std::vector<int> verdicts;
        World w(t);
        w.run([&](RankCtx& ctx) {
            Rig rig = make_rig(ctx.coord());
            fill_grads(rig, ctx.rank(), 0);
            double loss = 1.25;
            if (ctx.rank() == poison_rank) {
                if (poison_loss)
                    loss = std::numeric_limits<double>::infinity();
                else
                    rig.slots[2].grad->data()[3] = std::nanf("");
            }
            const int node = detect_soft_failure(ctx, loss, rig.slots);
            std::lock_guard<std::mutex> lk(mu);
            verdicts.push_back(node);
        });
        ASSERT_EQ(4u, verdicts.size());
        for (const int v : verdicts) EXPECT_EQ((int)expect, v);
    };

    run_case(-1, false, -1);     // healthy world
    run_case(2, false, 1);       // NaN gradient on rank 2 -> node 1, everywhere
    run_case(0, true, 0);        // Inf loss is treated exactly like NaN
    run_case(3, true, 1);
}

TEST(SoftFailures, ReportsPhysicalNodeIds) {
    Topology t;
    t.dp = 2;
    t.tiles_per_node = 1;
    WorldOptions opts;
    opts.active_nodes = {7, 9};  // node slots served by arbitrary physical machines

    std::mutex mu;
    std::vector<int> verdicts;
    World w(t, opts);
    w.run([&](RankCtx& ctx) {
        Rig rig = make_rig(ctx.coord());
        fill_grads(rig, ctx.rank(), 0);
        if (ctx.rank() == 1) rig.slots[0].grad->data()[0] = -std::nanf("");
        const int node = detect_soft_failure(ctx, 0.5, rig.slots);
        std::lock_guard<std::mutex> lk(mu);
        verdicts.push_back(node);
    });
    for (const int v : verdicts) EXPECT_EQ(9, v);
}

TEST(SoftFailures, PoisonedStepNeverReachesDiskOrPeerWeights) {
    const std::string root = fresh_dir("poison");
    CheckpointSet cs(root);
    Topology t;
    t.dp = 2;

    World w(t);
    w.run([&](RankCtx& ctx) {
        Rig rig = make_rig(ctx.coord());
        ShardedOptimizer opt(ctx, test_adamw(), rig.slots, ShardMode::so);
        fill_grads(rig, ctx.rank(), 0);
        opt.step();
        cs.write_full(ctx, rig.slots, opt, 1);
        const Snap healthy = take_snap(rig, opt);

        // next step goes bad on one rank, before any gradient exchange
        fill_grads(rig, ctx.rank(), 1);
        if (ctx.rank() == 1) rig.slots[1].grad->data()[2] = std::nanf("");
        const int node = detect_soft_failure(ctx, 0.8, rig.slots);
        EXPECT_EQ(0, node);  // both ranks share node 0 under the default tiling

        // the contract on a detected failure: no optimizer step, no write
        const Snap now = take_snap(rig, opt);
        for (size_t i = 0; i < healthy.w.size(); ++i)
            expect_bitwise(healthy.w[i], now.w[i], "weights must stay untouched");
    });

    // the last checkpoint on disk is the healthy step-1 state, finite throughout
    EXPECT_EQ(1, cs.find_resume().step);
    for (const TensorRecord& rec : read_record_file(cs.slot_dir(1) + "/shard-0.bin"))
        for (const float v : rec.as_f32()) ASSERT_TRUE(std::isfinite(v)) << rec.name;
}

// ---- model replication ------------------------------------------------------------------

TEST(Replication, BothMechanismsMatchTheFileBitwiseWithOneLoad) {
    const std::string dir = fresh_dir("replicate");
    const std::string path = dir + "/weights.bin";
    std::vector<float> vals(64);
    Rng rng(7);
    for (float& v : vals) v = (float)(rng.unit() * 4.0 - 2.0);
    {
        RecordFileWriter w(path);
        w.add_f32("weights", {64}, vals.data(), 64);
        w.finish();
    }

    Topology t;
    t.dp = 4;
    const int root_rank = 2;

    auto run_mechanism = [&](ReplicateVia via) {
        std::atomic<int> loads{0};
        std::mutex mu;
        std::map<int, std::vector<float>> got;
        World w(t);
        w.run([&](RankCtx& ctx) {
            TensorF x({64});  // pre-shaped everywhere; only the root holds data
            if (ctx.rank() == root_rank) {
                const TensorRecord rec = read_record_file(path)[0];
                x = TensorF(rec.dims, rec.as_f32());
                ++loads;
            }
            replicate_tensor(ctx, ctx.world_group(), root_rank, x, via);
            std::lock_guard<std::mutex> lk(mu);
            got[ctx.rank()] = std::vector<float>(x.data(), x.data() + x.numel());
        });
        EXPECT_EQ(1, loads.load());  // exactly one filesystem load for the whole group
        return got;
    };

    const std::map<int, std::vector<float>> via_bcast = run_mechanism(ReplicateVia::broadcast);
    const std::map<int, std::vector<float>> via_sum = run_mechanism(ReplicateVia::zero_allreduce);
    for (int r = 0; r < 4; ++r) {
        expect_bitwise(vals, via_bcast.at(r), strcat_("broadcast rank ", r));
        expect_bitwise(vals, via_sum.at(r), strcat_("zero+allreduce rank ", r));
    }

    // the naive alternative pays one load per replica
    std::atomic<int> naive_loads{0};
    World w(t);
    w.run([&](RankCtx& ctx) {
        const TensorRecord rec = read_record_file(path)[0];
        ++naive_loads;
        expect_bitwise(vals, rec.as_f32(), strcat_("naive rank ", ctx.rank()));
    });
    EXPECT_EQ(4, naive_loads.load());
}

// ---- node roster and relaunch ------------------------------------------------------------

TEST(NodePlans, RelaunchPromotesBuffersInOrderUntilExhausted) {
    NodePlan plan;
    plan.active = {3, 5, 7, 9};
    plan.buffers = {11, 13};

    const std::optional<NodePlan> first = relaunch_plan(plan, 7);
    ASSERT_TRUE(first.has_value());
    EXPECT_EQ((std::vector<int>{3, 5, 11, 9}), first->active);  // slot kept, node swapped
    EXPECT_EQ((std::vector<int>{13}), first->buffers);
    EXPECT_EQ((std::vector<int>{7}), first->excluded);

    const std::optional<NodePlan> second = relaunch_plan(*first, 3);
    ASSERT_TRUE(second.has_value());
    EXPECT_EQ((std::vector<int>{13, 5, 11, 9}), second->active);
    EXPECT_TRUE(second->buffers.empty());
    EXPECT_EQ((std::vector<int>{7, 3}), second->excluded);

    // no spares left: the next failure is terminal
    EXPECT_FALSE(relaunch_plan(*second, 9).has_value());

    // a failed node that was never active is a caller bug
    EXPECT_THROW(relaunch_plan(plan, 4), ContractError);

    NodePlan bad;
    bad.active = {1, 2};
    bad.buffers = {2};
    EXPECT_THROW(bad.validate(), ContractError);
}

TEST(FailurePlans, JsonRoundTripAndValidation) {
    const std::string dir = fresh_dir("failure_plans");
    const std::string path = dir + "/plan.json";

    std::vector<InjectedFailure> plan = {{3210, 2, FailureKind::hard},
                                         {4000, 0, FailureKind::soft_nan},
                                         {5000, 5, FailureKind::hard}};
    save_failure_plan(path, plan);
    const std::vector<InjectedFailure> back = load_failure_plan(path);
    ASSERT_EQ(plan.size(), back.size());
    for (size_t i = 0; i < plan.size(); ++i) {
        EXPECT_EQ(plan[i].step, back[i].step);
        EXPECT_EQ(plan[i].node, back[i].node);
        EXPECT_EQ(plan[i].kind, back[i].kind);
    }

    EXPECT_STREQ("hard", failure_kind_name(FailureKind::hard));
    EXPECT_STREQ("soft-nan", failure_kind_name(FailureKind::soft_nan));
    EXPECT_EQ(FailureKind::hard, parse_failure_kind("hard"));
    EXPECT_EQ(FailureKind::soft_nan, parse_failure_kind("soft-nan"));
    EXPECT_THROW(parse_failure_kind("medium"), ConfigError);

    write_bytes(path, "{not json");
    EXPECT_THROW(load_failure_plan(path), IoError);
    write_bytes(path, "{\"step\": 1}");
    EXPECT_THROW(load_failure_plan(path), IoError);
    write_bytes(path, "[{\"step\": 1, \"node\": 0, \"kind\": \"slow\"}]");
    EXPECT_THROW(load_failure_plan(path), Error);
}

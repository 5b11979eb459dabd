#include "optimus/reliability.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "optimus/common.hpp"

namespace fs = std::filesystem;

namespace optimus {

// ---- record file format ------------------------------------------------------------
//
//   bytes 0..3   magic "OPTT"
//   u32          version (1)
//   u32          record count
//   per record:  u32 name length, name bytes, u32 dtype, u32 ndim, u64 x ndim dims,
//                payload (little endian, 4 bytes per f32 element, 2 per bf16)
//   u32          crc32 of everything above

namespace {

constexpr char kMagic[4] = {'O', 'P', 'T', 'T'};
constexpr uint32_t kVersion = 1;
constexpr const char* kMarker = "VALID";

void put_u32(std::string& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((char)((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back((char)((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& b, size_t at) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)(unsigned char)b[at + (size_t)i] << (8 * i);
    return v;
}

uint64_t get_u64(const std::string& b, size_t at) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)(unsigned char)b[at + (size_t)i] << (8 * i);
    return v;
}

uint32_t crc32_of(const std::string& b, size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    size_t off = 0;
    while (off < n) {
        uInt chunk = (uInt)std::min<size_t>(n - off, (size_t)1 << 30);
        c = crc32(c, (const Bytef*)b.data() + off, chunk);
        off += chunk;
    }
    return (uint32_t)c;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open");
    std::string b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return b;
}

int64_t rec_numel(const std::vector<int64_t>& dims) {
    int64_t n = 1;
    for (int64_t d : dims) {
        check(d >= 0, "record: negative dimension");
        n *= d;
    }
    return n;
}

// unbuffered file sink that routes every byte through the crash plan, so an
// injected power loss truncates the stream at an exact offset
class CrashSink {
  public:
    CrashSink(const std::string& path, CrashPlan* crash) : path_(path), crash_(crash) {
        fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd_ < 0) throw IoError(path + ": cannot create");
    }

    ~CrashSink() {
        if (fd_ >= 0) ::close(fd_);
    }

    void write(const char* p, size_t n) {
        if (crash_ && crash_->at_byte >= 0) {
            const int64_t before = crash_->written.fetch_add((int64_t)n);
            const int64_t allowed = crash_->at_byte - before;
            if (allowed < (int64_t)n) {
                if (allowed > 0) raw_write(p, (size_t)allowed);
                ::close(fd_);  // no fsync: the tail never reaches disk
                fd_ = -1;
                throw CrashError(strcat_("injected crash after ", crash_->at_byte,
                                         " checkpoint bytes (", path_, ")"));
            }
        }
        raw_write(p, n);
    }

    void finish() {
        if (::fsync(fd_) != 0) throw IoError(path_ + ": fsync failed");
        ::close(fd_);
        fd_ = -1;
    }

  private:
    void raw_write(const char* p, size_t n) {
        while (n > 0) {
            ssize_t w = ::write(fd_, p, n);
            if (w < 0) throw IoError(path_ + ": write failed");
            p += w;
            n -= (size_t)w;
        }
    }

    std::string path_;
    CrashPlan* crash_;
    int fd_ = -1;
};

// durable small text file: temp, fsync, atomic rename
void write_text_committed(const std::string& path, const std::string& content,
                          CrashPlan* crash) {
    const std::string tmp = path + ".tmp";
    CrashSink sink(tmp, crash);
    sink.write(content.data(), content.size());
    sink.finish();
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError(path + ": rename failed: " + ec.message());
}

std::string now_utc() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string shard_file(int model_shard) { return strcat_("shard-", model_shard, ".bin"); }

std::string marker_text(int64_t step) { return strcat_("step ", step, "\n"); }

void save_ckpt_manifest(const CkptManifest& m, const std::string& path, CrashPlan* crash) {
    nlohmann::json j;
    j["step"] = m.step;
    j["opt_steps"] = m.opt_steps;
    j["kind"] = m.full ? "full" : "model-only";
    j["timestamp"] = m.timestamp;
    j["mode"] = m.mode;
    j["topology"] = {{"dp", m.dp}, {"tp", m.tp}, {"ep", m.ep}, {"pp", m.pp}};
    nlohmann::json shards = nlohmann::json::array();
    for (const CkptShardStat& s : m.shards)
        shards.push_back({{"file", s.file},
                          {"model_shard", s.model_shard},
                          {"writer_rank", s.writer_rank},
                          {"bytes", s.bytes},
                          {"crc", s.crc}});
    j["shards"] = std::move(shards);
    const std::string text = j.dump(2) + "\n";
    CrashSink sink(path, crash);
    sink.write(text.data(), text.size());
    sink.finish();
}

// full validation of a checkpoint directory: commit marker, manifest, and a
// re-read of every shard against its recorded size and checksum
std::optional<CkptManifest> validate_ckpt_dir(const std::string& dir) {
    try {
        const std::string marker_path = dir + "/" + kMarker;
        if (!fs::exists(marker_path)) return std::nullopt;
        CkptManifest m = load_ckpt_manifest(dir + "/manifest.json");
        if (slurp(marker_path) != marker_text(m.step)) return std::nullopt;
        for (const CkptShardStat& s : m.shards) {
            const std::string b = slurp(dir + "/" + s.file);
            if ((int64_t)b.size() != s.bytes || b.size() < 4) return std::nullopt;
            const uint32_t body = crc32_of(b, b.size() - 4);
            if (body != s.crc || body != get_u32(b, b.size() - 4)) return std::nullopt;
        }
        return m;
    } catch (const Error&) {
        return std::nullopt;
    }
}

}  // namespace

// ---- record files ------------------------------------------------------------------

int64_t TensorRecord::numel() const { return rec_numel(dims); }

std::vector<float> TensorRecord::as_f32() const {
    const int64_t n = numel();
    std::vector<float> out((size_t)n);
    if (dtype == RecDtype::f32) {
        std::memcpy(out.data(), bytes.data(), (size_t)n * 4);
    } else {
        for (int64_t i = 0; i < n; ++i) {
            const uint16_t lo = (unsigned char)bytes[(size_t)i * 2];
            const uint16_t hi = (unsigned char)bytes[(size_t)i * 2 + 1];
            out[(size_t)i] = bf16_bits_to_f32((uint16_t)(lo | (hi << 8)));
        }
    }
    return out;
}

RecordFileWriter::RecordFileWriter(std::string path, CrashPlan* crash)
    : path_(std::move(path)), crash_(crash) {}

void RecordFileWriter::add_f32(const std::string& name, const std::vector<int64_t>& dims,
                               const float* p, int64_t n) {
    check(rec_numel(dims) == n, strcat_("record '", name, "': dims do not cover ", n,
                                        " elements"));
    put_u32(body_, (uint32_t)name.size());
    body_.append(name);
    put_u32(body_, (uint32_t)RecDtype::f32);
    put_u32(body_, (uint32_t)dims.size());
    for (int64_t d : dims) put_u64(body_, (uint64_t)d);
    body_.append((const char*)p, (size_t)n * 4);
    ++count_;
}

void RecordFileWriter::add_bf16(const std::string& name, const std::vector<int64_t>& dims,
                                const float* p, int64_t n) {
    check(rec_numel(dims) == n, strcat_("record '", name, "': dims do not cover ", n,
                                        " elements"));
    put_u32(body_, (uint32_t)name.size());
    body_.append(name);
    put_u32(body_, (uint32_t)RecDtype::bf16);
    put_u32(body_, (uint32_t)dims.size());
    for (int64_t d : dims) put_u64(body_, (uint64_t)d);
    for (int64_t i = 0; i < n; ++i) {
        const uint16_t h = f32_to_bf16_bits(p[i]);
        body_.push_back((char)(h & 0xff));
        body_.push_back((char)(h >> 8));
    }
    ++count_;
}

RecordFileWriter::Written RecordFileWriter::finish() {
    std::string all;
    all.append(kMagic, 4);
    put_u32(all, kVersion);
    put_u32(all, count_);
    all += body_;
    const uint32_t crc = crc32_of(all, all.size());
    std::string foot;
    put_u32(foot, crc);

    CrashSink sink(path_, crash_);
    sink.write(all.data(), all.size());
    sink.write(foot.data(), foot.size());
    sink.finish();
    return Written{(int64_t)(all.size() + foot.size()), crc};
}

std::vector<TensorRecord> read_record_file(const std::string& path) {
    const std::string b = slurp(path);
    auto bad = [&](const std::string& why) { return IoError(path + ": " + why); };
    if (b.size() < 16) throw bad("truncated header");
    if (std::memcmp(b.data(), kMagic, 4) != 0) throw bad("bad magic");
    if (get_u32(b, 4) != kVersion) throw bad("unsupported version");
    if (crc32_of(b, b.size() - 4) != get_u32(b, b.size() - 4)) throw bad("checksum mismatch");

    const uint32_t count = get_u32(b, 8);
    const size_t end = b.size() - 4;
    size_t off = 12;
    auto need = [&](size_t n) {
        if (end - off < n) throw bad("truncated record");
    };
    std::vector<TensorRecord> out;
    out.reserve(count);
    for (uint32_t r = 0; r < count; ++r) {
        TensorRecord rec;
        need(4);
        const uint32_t name_len = get_u32(b, off);
        off += 4;
        if (name_len > 4096) throw bad("oversized record name");
        need(name_len);
        rec.name.assign(b, off, name_len);
        off += name_len;
        need(8);
        const uint32_t dt = get_u32(b, off);
        if (dt > 1) throw bad("unknown dtype");
        rec.dtype = (RecDtype)dt;
        const uint32_t nd = get_u32(b, off + 4);
        off += 8;
        if (nd > 8) throw bad("too many dimensions");
        need((size_t)nd * 8);
        for (uint32_t d = 0; d < nd; ++d) {
            rec.dims.push_back((int64_t)get_u64(b, off));
            off += 8;
        }
        const int64_t n = rec_numel(rec.dims);
        const size_t payload = (size_t)n * (rec.dtype == RecDtype::f32 ? 4 : 2);
        need(payload);
        rec.bytes.assign(b, off, payload);
        off += payload;
        out.push_back(std::move(rec));
    }
    if (off != end) throw bad("trailing bytes after last record");
    return out;
}

// ---- shard layout ------------------------------------------------------------------

int model_shard_count(const Topology& t) { return t.pp * t.ep * t.tp; }

int model_shard_index(const Topology& t, const RankCoord& c) {
    return (c.pp * t.ep + c.ep) * t.tp + c.tp;
}

int scattered_writer(int model_shard, int dp) { return model_shard % dp; }

// ---- manifests ---------------------------------------------------------------------

CkptManifest load_ckpt_manifest(const std::string& path) {
    CkptManifest m;
    try {
        const nlohmann::json j = nlohmann::json::parse(slurp(path));
        m.step = j.at("step").get<int64_t>();
        m.opt_steps = j.at("opt_steps").get<int64_t>();
        const std::string kind = j.at("kind").get<std::string>();
        if (kind != "full" && kind != "model-only")
            throw IoError(path + ": unknown checkpoint kind '" + kind + "'");
        m.full = kind == "full";
        m.timestamp = j.at("timestamp").get<std::string>();
        m.mode = j.at("mode").get<std::string>();
        const nlohmann::json& t = j.at("topology");
        m.dp = t.at("dp").get<int>();
        m.tp = t.at("tp").get<int>();
        m.ep = t.at("ep").get<int>();
        m.pp = t.at("pp").get<int>();
        for (const nlohmann::json& s : j.at("shards")) {
            CkptShardStat st;
            st.file = s.at("file").get<std::string>();
            st.model_shard = s.at("model_shard").get<int>();
            st.writer_rank = s.at("writer_rank").get<int>();
            st.bytes = s.at("bytes").get<int64_t>();
            st.crc = s.at("crc").get<uint32_t>();
            m.shards.push_back(std::move(st));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": bad manifest: " + e.what());
    }
    return m;
}

// ---- checkpoint set ----------------------------------------------------------------

CheckpointSet::CheckpointSet(std::string root) : root_(std::move(root)) {
    fs::create_directories(root_);
}

std::string CheckpointSet::slot_dir(int slot) const {
    check(slot == 1 || slot == 2, strcat_("checkpoint slot must be 1 or 2, got ", slot));
    return strcat_(root_, "/ckpt-", slot);
}

std::string CheckpointSet::persistent_dir(int64_t step) const {
    return strcat_(root_, "/persistent/step-", step);
}

bool CheckpointSet::slot_valid(int slot) const {
    const std::optional<CkptManifest> m = validate_ckpt_dir(slot_dir(slot));
    return m.has_value() && m->full;
}

int64_t CheckpointSet::slot_step(int slot) const {
    const std::optional<CkptManifest> m = validate_ckpt_dir(slot_dir(slot));
    return m.has_value() && m->full ? m->step : -1;
}

int CheckpointSet::pick_write_slot() const {
    const int64_t s1 = slot_step(1);
    const int64_t s2 = slot_step(2);
    if (s1 < 0) return 1;
    if (s2 < 0) return 2;
    return s1 <= s2 ? 1 : 2;
}

namespace {

// shared body of the full and weights-only writers. Every rank participates;
// the dp replica picked by scattered_writer() emits each shard file, rank 0
// emits the manifest and finally the commit marker.
void write_state_dir(RankCtx& ctx, const std::vector<ParamSlot>& params, ShardedOptimizer* opt,
                     const std::string& dir, int64_t step, CrashPlan* crash) {
    const Topology& topo = ctx.world().topology();
    const RankCoord& c = ctx.coord();
    const int M = model_shard_count(topo);
    const int m = model_shard_index(topo, c);
    const bool writer = scattered_writer(m, topo.dp) == c.dp;
    const bool full = opt != nullptr;

    // a shard file must stand on its own, so slices of the optimizer state
    // owned by other replicas are assembled first. Replicas hold disjoint
    // slices, so a zero-filled allreduce reproduces every value bitwise.
    struct WholeState {
        std::vector<float> master, m1, m2;
    };
    std::vector<WholeState> whole((size_t)params.size());
    for (size_t i = 0; full && i < params.size(); ++i) {
        const ShardPlan::Entry& e = opt->plan().entries[i];
        const bool stores = params[i].cls == ReplicationClass::expert || c.ep == 0;
        if (!stores && !e.over_dp_ep) continue;  // someone else's group assembles this one
        const int64_t n = params[i].weight->numel();
        AdamWState& s = opt->states()[i];
        if (e.own.begin == 0 && e.own.end == n) {
            if (stores) whole[i] = {s.master, s.exp_avg, s.exp_avg_sq};
            continue;
        }
        const ProcessGroup g = e.over_dp_ep ? ctx.dp_ep_group() : ctx.dp_group();
        auto assemble = [&](const std::vector<float>& slice) {
            TensorF t({n});
            std::copy(slice.begin(), slice.end(), t.data() + e.own.begin);
            TensorF sum = allreduce(ctx, g, t, ReduceOp::sum);
            return std::vector<float>(sum.data(), sum.data() + n);
        };
        WholeState w;
        w.master = assemble(s.master);
        w.m1 = assemble(s.exp_avg);
        w.m2 = assemble(s.exp_avg_sq);
        if (stores) whole[i] = std::move(w);
    }

    double my_crc = 0, my_bytes = 0;
    if (writer) {
        RecordFileWriter w(dir + "/" + shard_file(m), crash);
        for (size_t i = 0; i < params.size(); ++i) {
            const ParamSlot& p = params[i];
            if (p.cls != ReplicationClass::expert && c.ep != 0) continue;  // replica of shard ep=0
            const int64_t n = p.weight->numel();
            w.add_bf16(p.name + ".w16", p.weight->shape(), p.weight->data(), n);
            if (full) {
                w.add_f32(p.name + ".master", {n}, whole[i].master.data(), n);
                w.add_f32(p.name + ".m", {n}, whole[i].m1.data(), n);
                w.add_f32(p.name + ".v", {n}, whole[i].m2.data(), n);
                w.add_bf16(p.name + ".g16", p.grad->shape(), p.grad->data(), n);
            }
        }
        const RecordFileWriter::Written done = w.finish();
        my_crc = (double)done.crc;
        my_bytes = (double)done.bytes;
    }

    // circulate per-shard stats so rank 0 can fill in the manifest
    TensorD stats({M, 4});
    if (writer) {
        stats.data()[m * 4 + 0] = my_crc;
        stats.data()[m * 4 + 1] = my_bytes;
        stats.data()[m * 4 + 2] = (double)ctx.rank();
        stats.data()[m * 4 + 3] = 1.0;
    }
    const TensorD all = allreduce(ctx, ctx.world_group(), stats, ReduceOp::sum);

    if (ctx.rank() == 0) {
        CkptManifest man;
        man.step = step;
        man.opt_steps = full ? opt->steps_done() : 0;
        man.full = full;
        man.timestamp = now_utc();
        man.mode = full ? shard_mode_name(opt->plan().mode) : "";
        man.dp = topo.dp;
        man.tp = topo.tp;
        man.ep = topo.ep;
        man.pp = topo.pp;
        for (int s = 0; s < M; ++s) {
            check(all.data()[s * 4 + 3] == 1.0,
                  strcat_("checkpoint: shard ", s, " written ", all.data()[s * 4 + 3],
                          " times (expected exactly once)"));
            CkptShardStat st;
            st.file = shard_file(s);
            st.model_shard = s;
            st.writer_rank = (int)all.data()[s * 4 + 2];
            st.bytes = (int64_t)all.data()[s * 4 + 1];
            st.crc = (uint32_t)all.data()[s * 4 + 0];
            man.shards.push_back(std::move(st));
        }
        save_ckpt_manifest(man, dir + "/manifest.json", crash);
        // the marker commits the checkpoint; everything before it is fsynced
        write_text_committed(dir + "/" + kMarker, marker_text(step), crash);
    }
    barrier(ctx, ctx.world_group());
}

}  // namespace

int CheckpointSet::write_full(RankCtx& ctx, const std::vector<ParamSlot>& params,
                              ShardedOptimizer& opt, int64_t step, CrashPlan* crash) {
    check(opt.plan().entries.size() == params.size(),
          "checkpoint: optimizer plan does not cover the parameter list");
    // agree on the target slot before anyone touches it
    TensorD pick({1});
    if (ctx.rank() == 0) pick.data()[0] = (double)pick_write_slot();
    const TensorD agreed = broadcast(ctx, ctx.world_group(), 0, pick);
    const int slot = (int)agreed.data()[0];

    const std::string dir = slot_dir(slot);
    if (ctx.rank() == 0) {
        fs::remove_all(dir);  // drops the marker first file-wise: the slot is now fair game
        fs::create_directories(dir);
    }
    barrier(ctx, ctx.world_group());
    write_state_dir(ctx, params, &opt, dir, step, crash);
    return slot;
}

std::string CheckpointSet::write_model_only(RankCtx& ctx, const std::vector<ParamSlot>& params,
                                            int64_t step, CrashPlan* crash) {
    const std::string dir = persistent_dir(step);
    if (ctx.rank() == 0) {
        fs::remove_all(dir);  // only a rewrite of the same step ever lands here
        fs::create_directories(dir);
    }
    barrier(ctx, ctx.world_group());
    write_state_dir(ctx, params, nullptr, dir, step, crash);
    return dir;
}

ResumePoint CheckpointSet::find_resume() const {
    ResumePoint best;
    for (int slot = 1; slot <= 2; ++slot) {
        const std::optional<CkptManifest> m = validate_ckpt_dir(slot_dir(slot));
        if (!m || !m->full) continue;
        if (m->step > best.step || (m->step == best.step && slot > best.slot)) {
            best.kind = ResumePoint::Kind::full_slot;
            best.slot = slot;
            best.step = m->step;
            best.dir = slot_dir(slot);
        }
    }
    if (best.kind == ResumePoint::Kind::full_slot) return best;

    const std::string pdir = root_ + "/persistent";
    if (fs::exists(pdir)) {
        for (const fs::directory_entry& e : fs::directory_iterator(pdir)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("step-", 0) != 0) continue;
            const std::optional<CkptManifest> m = validate_ckpt_dir(e.path().string());
            if (!m || m->full) continue;
            if (m->step > best.step) {
                best.kind = ResumePoint::Kind::model_only;
                best.slot = 0;
                best.step = m->step;
                best.dir = e.path().string();
            }
        }
    }
    return best;
}

namespace {

// reads each needed shard file on one designated rank and replicates the
// records group-wide; returns records by name with local caching per shard
class ShardReader {
  public:
    ShardReader(const std::string& dir, int* reads) : dir_(dir), reads_(reads) {}

    const TensorRecord& get(int shard, const std::string& name) {
        auto it = cache_.find(shard);
        if (it == cache_.end()) {
            std::map<std::string, TensorRecord> by_name;
            for (TensorRecord& r : read_record_file(dir_ + "/" + shard_file(shard)))
                by_name.emplace(r.name, std::move(r));
            it = cache_.emplace(shard, std::move(by_name)).first;
            ++*reads_;
        }
        const auto rec = it->second.find(name);
        if (rec == it->second.end())
            throw IoError(strcat_(dir_, "/", shard_file(shard), ": no record named '", name,
                                  "'"));
        return rec->second;
    }

  private:
    std::string dir_;
    int* reads_;
    std::map<int, std::map<std::string, TensorRecord>> cache_;
};

void require_committed(const std::string& dir, int64_t step) {
    const std::string marker = dir + "/" + kMarker;
    if (!fs::exists(marker) || slurp(marker) != marker_text(step))
        throw IoError(dir + ": checkpoint is not committed");
}

void check_topology(const CkptManifest& man, const Topology& topo, const std::string& dir) {
    check(man.dp == topo.dp && man.tp == topo.tp && man.ep == topo.ep && man.pp == topo.pp,
          strcat_(dir, ": checkpoint topology dp", man.dp, "/tp", man.tp, "/ep", man.ep, "/pp",
                  man.pp, " does not match the running world"));
}

// one record, read by the designated rank and handed to the whole group
TensorF fetch_record(RankCtx& ctx, ShardReader& reader, int shard, const std::string& name,
                     const ProcessGroup& group, int root) {
    TensorF t;
    if (ctx.rank() == root) {
        const TensorRecord& rec = reader.get(shard, name);
        t = TensorF(rec.dims, rec.as_f32());
    }
    return broadcast(ctx, group, root, t);
}

}  // namespace

int CheckpointSet::restore_full(RankCtx& ctx, const std::vector<ParamSlot>& params,
                                ShardedOptimizer& opt, int slot) const {
    const Topology& topo = ctx.world().topology();
    const RankCoord& c = ctx.coord();
    const std::string dir = slot_dir(slot);
    const CkptManifest man = load_ckpt_manifest(dir + "/manifest.json");
    require_committed(dir, man.step);
    check(man.full, dir + ": slot holds no optimizer state");
    check_topology(man, topo, dir);
    check(man.mode == shard_mode_name(opt.plan().mode),
          strcat_(dir, ": checkpoint sharding mode '", man.mode, "' does not match '",
                  shard_mode_name(opt.plan().mode), "'"));
    check(opt.plan().entries.size() == params.size(),
          "restore: optimizer plan does not cover the parameter list");

    opt.set_step_count(man.opt_steps);
    int reads = 0;
    ShardReader reader(dir, &reads);
    const int m = model_shard_index(topo, c);
    const int m0 = model_shard_index(topo, RankCoord{c.pp, 0, 0, c.tp});
    for (size_t i = 0; i < params.size(); ++i) {
        const ParamSlot& p = params[i];
        const bool expert = p.cls == ReplicationClass::expert;
        const int shard = expert ? m : m0;
        const ProcessGroup group = expert ? ctx.dp_group() : ctx.dp_ep_group();
        const int root =
            expert ? rank_of(topo, RankCoord{c.pp, scattered_writer(m, topo.dp), c.ep, c.tp})
                   : rank_of(topo, RankCoord{c.pp, scattered_writer(m0, topo.dp), 0, c.tp});
        const int64_t n = p.weight->numel();

        const TensorF w = fetch_record(ctx, reader, shard, p.name + ".w16", group, root);
        check(w.shape() == p.weight->shape(),
              strcat_(dir, ": record '", p.name, ".w16' has the wrong shape"));
        std::copy(w.data(), w.data() + n, p.weight->data());

        const SliceRange own = opt.plan().entries[i].own;
        AdamWState& st = opt.states()[i];
        const TensorF ma = fetch_record(ctx, reader, shard, p.name + ".master", group, root);
        const TensorF m1 = fetch_record(ctx, reader, shard, p.name + ".m", group, root);
        const TensorF m2 = fetch_record(ctx, reader, shard, p.name + ".v", group, root);
        check(ma.numel() == n && m1.numel() == n && m2.numel() == n,
              strcat_(dir, ": optimizer records for '", p.name, "' have the wrong size"));
        st.master.assign(ma.data() + own.begin, ma.data() + own.end);
        st.exp_avg.assign(m1.data() + own.begin, m1.data() + own.end);
        st.exp_avg_sq.assign(m2.data() + own.begin, m2.data() + own.end);

        const TensorF g = fetch_record(ctx, reader, shard, p.name + ".g16", group, root);
        check(g.shape() == p.grad->shape(),
              strcat_(dir, ": record '", p.name, ".g16' has the wrong shape"));
        std::copy(g.data(), g.data() + n, p.grad->data());
    }
    return reads;
}

int CheckpointSet::restore_model_only(RankCtx& ctx, const std::vector<ParamSlot>& params,
                                      const std::string& dir) const {
    const Topology& topo = ctx.world().topology();
    const RankCoord& c = ctx.coord();
    const CkptManifest man = load_ckpt_manifest(dir + "/manifest.json");
    require_committed(dir, man.step);
    check_topology(man, topo, dir);

    int reads = 0;
    ShardReader reader(dir, &reads);
    const int m = model_shard_index(topo, c);
    const int m0 = model_shard_index(topo, RankCoord{c.pp, 0, 0, c.tp});
    for (const ParamSlot& p : params) {
        const bool expert = p.cls == ReplicationClass::expert;
        const int shard = expert ? m : m0;
        const ProcessGroup group = expert ? ctx.dp_group() : ctx.dp_ep_group();
        const int root =
            expert ? rank_of(topo, RankCoord{c.pp, scattered_writer(m, topo.dp), c.ep, c.tp})
                   : rank_of(topo, RankCoord{c.pp, scattered_writer(m0, topo.dp), 0, c.tp});
        const TensorF w = fetch_record(ctx, reader, shard, p.name + ".w16", group, root);
        check(w.shape() == p.weight->shape(),
              strcat_(dir, ": record '", p.name, ".w16' has the wrong shape"));
        std::copy(w.data(), w.data() + w.numel(), p.weight->data());
    }
    return reads;
}

// ---- failure handling --------------------------------------------------------------

int detect_soft_failure(RankCtx& ctx, double loss, const std::vector<ParamSlot>& params) {
    bool bad = !std::isfinite(loss);
    for (const ParamSlot& p : params) {
        if (bad) break;
        const float* g = p.grad->data();
        const int64_t n = p.grad->numel();
        for (int64_t i = 0; i < n; ++i) {
            if (!std::isfinite(g[i])) {
                bad = true;
                break;
            }
        }
    }
    TensorD flag({1});
    flag.data()[0] = bad ? (double)(ctx.node() + 1) : 0.0;
    const TensorD verdict = allreduce(ctx, ctx.world_group(), flag, ReduceOp::max);
    return (int)verdict.data()[0] - 1;
}

void replicate_tensor(RankCtx& ctx, const ProcessGroup& group, int root, TensorF& t,
                      ReplicateVia via) {
    if (via == ReplicateVia::broadcast) {
        t = broadcast(ctx, group, root, t);
        return;
    }
    // zero everywhere but the root, then sum: x + 0 reproduces x bitwise
    if (ctx.rank() != root) std::fill(t.data(), t.data() + t.numel(), 0.0f);
    t = allreduce(ctx, group, t, ReduceOp::sum);
}

const char* failure_kind_name(FailureKind k) {
    return k == FailureKind::hard ? "hard" : "soft-nan";
}

FailureKind parse_failure_kind(const std::string& s) {
    if (s == "hard") return FailureKind::hard;
    if (s == "soft-nan") return FailureKind::soft_nan;
    throw ConfigError("unknown failure kind '" + s + "' (expected hard or soft-nan)");
}

std::vector<InjectedFailure> load_failure_plan(const std::string& path) {
    std::vector<InjectedFailure> plan;
    try {
        const nlohmann::json j = nlohmann::json::parse(slurp(path));
        if (!j.is_array()) throw IoError(path + ": failure plan must be a list");
        for (const nlohmann::json& f : j) {
            InjectedFailure inj;
            inj.step = f.at("step").get<int64_t>();
            inj.node = f.at("node").get<int>();
            inj.kind = parse_failure_kind(f.at("kind").get<std::string>());
            plan.push_back(inj);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": bad failure plan: " + e.what());
    }
    return plan;
}

void save_failure_plan(const std::string& path, const std::vector<InjectedFailure>& plan) {
    nlohmann::json j = nlohmann::json::array();
    for (const InjectedFailure& f : plan)
        j.push_back({{"step", f.step}, {"node", f.node}, {"kind", failure_kind_name(f.kind)}});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path + ": cannot create");
    out << j.dump(2) << "\n";
    if (!out.flush()) throw IoError(path + ": write failed");
}

void NodePlan::validate() const {
    check(!active.empty(), "node plan: no active nodes");
    std::set<int> seen;
    auto absorb = [&](const std::vector<int>& ids) {
        for (int id : ids)
            check(seen.insert(id).second, strcat_("node plan: node ", id, " listed twice"));
    };
    absorb(active);
    absorb(buffers);
    absorb(excluded);
}

std::optional<NodePlan> relaunch_plan(const NodePlan& cur, int failed_node) {
    cur.validate();
    const auto it = std::find(cur.active.begin(), cur.active.end(), failed_node);
    check(it != cur.active.end(),
          strcat_("relaunch: node ", failed_node, " is not an active node"));
    if (cur.buffers.empty()) return std::nullopt;
    NodePlan next = cur;
    next.active[(size_t)(it - cur.active.begin())] = next.buffers.front();
    next.buffers.erase(next.buffers.begin());
    next.excluded.push_back(failed_node);
    next.validate();
    return next;
}

}  // namespace optimus

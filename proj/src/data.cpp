#include "optimus/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "optimus/common.hpp"

namespace fs = std::filesystem;

namespace optimus {

// ---- tokenization ----------------------------------------------------------------------

TokenizedFile tokenize_file(int64_t file_id, const std::vector<std::string>& docs,
                            const ByteTokenizer& tok, int64_t context) {
    check(context >= 2, "tokenize: context must be at least 2");
    TokenizedFile out;
    out.file_id = file_id;
    out.context = context;
    for (const std::string& d : docs) {
        std::vector<int32_t> t = tok.encode(d);
        out.tokens.insert(out.tokens.end(), t.begin(), t.end());
        out.tokens.push_back(ByteTokenizer::kEos);
    }
    return out;
}

std::vector<int64_t> build_permutation(int64_t n, uint64_t seed) {
    check(n >= 0, "permutation: negative size");
    std::vector<int64_t> p((size_t)n);
    for (int64_t i = 0; i < n; ++i) p[(size_t)i] = i;
    Rng rng(hash_mix(seed, 0x7065726d757465ull));  // dedicated stream for shuffles
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(p[(size_t)i], p[(size_t)rng.next_below((uint64_t)i + 1)]);
    return p;
}

// ---- shard file format -----------------------------------------------------------------
//
//   bytes 0..3   magic "OPTD"
//   u32          version (1)
//   u32          context
//   u64          instance count
//   i32 x N*C    row-major tokens, little endian
//   u32          crc32 of everything above

namespace {

constexpr char kMagic[4] = {'O', 'P', 'T', 'D'};
constexpr uint32_t kVersion = 1;

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

constexpr int64_t kHeaderBytes = 4 + 4 + 4 + 8;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(strcat_("cannot open ", path));
    std::string b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return b;
}

}  // namespace

uint32_t write_shard(const std::string& path, int64_t context,
                     const std::vector<int32_t>& tokens) {
    check(context >= 1 && (int64_t)tokens.size() % context == 0,
          "write_shard: tokens must be whole rows");
    std::string buf;
    buf.reserve((size_t)kHeaderBytes + tokens.size() * 4 + 4);
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    put_u32(buf, (uint32_t)context);
    put_u64(buf, (uint64_t)((int64_t)tokens.size() / context));
    for (int32_t t : tokens) put_u32(buf, (uint32_t)t);
    const uint32_t crc =
        (uint32_t)crc32(0, (const Bytef*)buf.data(), (uInt)buf.size());
    put_u32(buf, crc);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(strcat_("cannot create ", path));
    out.write(buf.data(), (std::streamsize)buf.size());
    out.flush();
    if (!out) throw IoError(strcat_("short write to ", path));
    return crc;
}

std::vector<int32_t> read_shard(const std::string& path, int64_t expect_context) {
    const std::string b = slurp(path);
    if ((int64_t)b.size() < kHeaderBytes + 4)
        throw IoError(strcat_(path, ": truncated shard (", b.size(), " bytes)"));
    if (std::memcmp(b.data(), kMagic, 4) != 0) throw IoError(strcat_(path, ": bad magic"));
    if (get_u32(b, 4) != kVersion)
        throw IoError(strcat_(path, ": unsupported version ", get_u32(b, 4)));
    const int64_t context = (int64_t)get_u32(b, 8);
    if (expect_context && context != expect_context)
        throw IoError(strcat_(path, ": context ", context, " != manifest ", expect_context));
    const int64_t count = (int64_t)get_u64(b, 12);
    const int64_t want = kHeaderBytes + count * context * 4 + 4;
    if ((int64_t)b.size() != want)
        throw IoError(strcat_(path, ": size ", b.size(), " != expected ", want));
    const uint32_t stored = get_u32(b, b.size() - 4);
    const uint32_t actual = (uint32_t)crc32(0, (const Bytef*)b.data(), (uInt)(b.size() - 4));
    if (stored != actual)
        throw IoError(strcat_(path, ": checksum mismatch (stored ", stored, ", data ", actual, ")"));
    std::vector<int32_t> tokens((size_t)(count * context));
    for (size_t i = 0; i < tokens.size(); ++i)
        tokens[i] = (int32_t)get_u32(b, (size_t)kHeaderBytes + i * 4);
    return tokens;
}

ShardManifest shard_instances(const std::vector<TokenizedFile>& files,
                              const std::vector<int64_t>& perm, int64_t shard_size, uint64_t seed,
                              const std::string& out_dir) {
    check(shard_size >= 1, "shard_instances: shard_size must be positive");
    check(!files.empty(), "shard_instances: no tokenized files");
    const int64_t context = files[0].context;
    int64_t n_total = 0;
    std::vector<int64_t> file_begin;  // first global instance of each file
    for (const TokenizedFile& f : files) {
        check(f.context == context, "shard_instances: mixed context lengths");
        file_begin.push_back(n_total);
        n_total += f.instances();
    }
    check((int64_t)perm.size() == n_total,
          strcat_("shard_instances: permutation has ", perm.size(), " entries for ", n_total,
                  " instances"));
    fs::create_directories(out_dir);

    ShardManifest man;
    man.seed = seed;
    man.context = context;
    man.shard_size = shard_size;
    man.n_total = n_total;

    // instance `perm[g]` (original order) becomes permuted position g
    auto copy_instance = [&](int64_t original, std::vector<int32_t>& dst) {
        const size_t fi =
            (size_t)(std::upper_bound(file_begin.begin(), file_begin.end(), original) -
                     file_begin.begin() - 1);
        const int64_t row = original - file_begin[fi];
        const int32_t* src = files[fi].tokens.data() + row * context;
        dst.insert(dst.end(), src, src + context);
    };

    for (int64_t s = 0; s * shard_size < n_total || (s == 0 && n_total == 0); ++s) {
        const int64_t g0 = s * shard_size;
        const int64_t g1 = std::min(n_total, g0 + shard_size);
        std::vector<int32_t> rows;
        rows.reserve((size_t)((g1 - g0) * context));
        for (int64_t g = g0; g < g1; ++g) copy_instance(perm[(size_t)g], rows);
        char name[32];
        std::snprintf(name, sizeof name, "shard-%05lld.optd", (long long)s);
        const uint32_t crc = write_shard(out_dir + "/" + name, context, rows);
        man.shards.push_back({name, g1 - g0, crc});
        if (n_total == 0) break;
    }
    return man;
}

void save_manifest(const ShardManifest& m, const std::string& path) {
    nlohmann::json j;
    j["seed"] = m.seed;
    j["context"] = m.context;
    j["vocab"] = m.vocab;
    j["shard_size"] = m.shard_size;
    j["n_total"] = m.n_total;
    j["shards"] = nlohmann::json::array();
    for (const ShardInfo& s : m.shards)
        j["shards"].push_back({{"file", s.file}, {"instances", s.instances}, {"crc", s.crc}});
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(strcat_("cannot create ", path));
    out << j.dump(2) << "\n";
}

ShardManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(strcat_("cannot open ", path));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(strcat_(path, ": bad manifest json: ", e.what()));
    }
    ShardManifest m;
    try {
        m.seed = j.at("seed").get<uint64_t>();
        m.context = j.at("context").get<int64_t>();
        m.vocab = j.at("vocab").get<int64_t>();
        m.shard_size = j.at("shard_size").get<int64_t>();
        m.n_total = j.at("n_total").get<int64_t>();
        for (const auto& s : j.at("shards"))
            m.shards.push_back({s.at("file").get<std::string>(), s.at("instances").get<int64_t>(),
                                s.at("crc").get<uint32_t>()});
    } catch (const nlohmann::json::exception& e) {
        throw IoError(strcat_(path, ": manifest missing fields: ", e.what()));
    }
    return m;
}

void validate_shards(const std::string& dir, const ShardManifest& m) {
    int64_t seen = 0;
    for (size_t i = 0; i < m.shards.size(); ++i) {
        const ShardInfo& s = m.shards[i];
        const std::string path = dir + "/" + s.file;
        const std::vector<int32_t> tokens = read_shard(path, m.context);
        if ((int64_t)tokens.size() != s.instances * m.context)
            throw IoError(strcat_(path, ": holds ", (int64_t)tokens.size() / m.context,
                                  " instances, manifest says ", s.instances));
        const std::string b = slurp(path);
        const uint32_t crc = get_u32(b, b.size() - 4);
        if (crc != s.crc)
            throw IoError(strcat_(path, ": checksum ", crc, " != manifest ", s.crc));
        for (int32_t t : tokens)
            if (t < 0 || t >= m.vocab)
                throw IoError(strcat_(path, ": token ", t, " outside vocab ", m.vocab));
        seen += s.instances;
    }
    if (seen != m.n_total)
        throw IoError(strcat_(dir, ": shards hold ", seen, " instances, manifest says ",
                              m.n_total));
}

ShardManifest preprocess_dir(const std::string& input_dir, int64_t context, uint64_t seed,
                             int64_t shard_size, const std::string& out_dir) {
    std::vector<std::string> paths;
    for (const fs::directory_entry& e : fs::directory_iterator(input_dir))
        if (e.is_regular_file()) paths.push_back(e.path().string());
    if (paths.empty()) throw IoError(strcat_(input_dir, ": no input files"));
    std::sort(paths.begin(), paths.end());

    ByteTokenizer tok;
    std::vector<TokenizedFile> files;
    int64_t n_total = 0;
    for (size_t i = 0; i < paths.size(); ++i) {
        std::ifstream in(paths[i]);
        if (!in) throw IoError(strcat_("cannot open ", paths[i]));
        std::vector<std::string> docs;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) docs.push_back(line);
        files.push_back(tokenize_file((int64_t)i, docs, tok, context));
        n_total += files.back().instances();
    }
    ShardManifest man =
        shard_instances(files, build_permutation(n_total, seed), shard_size, seed, out_dir);
    save_manifest(man, out_dir + "/manifest.json");
    return man;
}

// ---- loader ----------------------------------------------------------------------------

Loader::Loader(std::string dir, ShardManifest manifest, int dp, int dp_rank,
               int64_t global_batch_instances)
    : dir_(std::move(dir)), man_(std::move(manifest)), dp_(dp), dp_rank_(dp_rank),
      global_batch_(global_batch_instances) {
    check(dp >= 1 && dp_rank >= 0 && dp_rank < dp, "loader: bad dp rank");
    check(global_batch_ >= 1 && global_batch_ % dp == 0,
          strcat_("loader: global batch ", global_batch_, " not divisible by dp=", dp));
    int64_t at = 0;
    for (const ShardInfo& s : man_.shards) {
        shard_begin_.push_back(at);
        at += s.instances;
    }
    shard_begin_.push_back(at);
    check(at == man_.n_total, "loader: manifest instance counts disagree with n_total");
}

int64_t Loader::steps_per_epoch() const { return man_.n_total / global_batch_; }

void Loader::seek(int64_t step) {
    check(step >= 0 && step <= steps_per_epoch(),
          strcat_("loader seek out of range: ", step, " of ", steps_per_epoch()));
    step_ = step;
}

bool Loader::next(TensorI& out) {
    if (step_ >= steps_per_epoch()) return false;
    const int64_t per_rank = global_batch_ / dp_;
    const int64_t first = step_ * global_batch_ + dp_rank_ * per_rank;
    out = TensorI({per_rank, man_.context});
    reads_.clear();

    int64_t done = 0;
    while (done < per_rank) {
        const int64_t g = first + done;
        const size_t s = (size_t)(std::upper_bound(shard_begin_.begin(), shard_begin_.end(), g) -
                                  shard_begin_.begin() - 1);
        const int64_t row0 = g - shard_begin_[s];
        const int64_t rows = std::min(per_rank - done, man_.shards[s].instances - row0);
        const int64_t off = kHeaderBytes + row0 * man_.context * 4;
        const int64_t len = rows * man_.context * 4;

        std::ifstream in(dir_ + "/" + man_.shards[s].file, std::ios::binary);
        if (!in) throw IoError(strcat_("cannot open ", dir_, "/", man_.shards[s].file));
        std::vector<unsigned char> buf((size_t)len);
        in.seekg(off);
        in.read((char*)buf.data(), len);
        if (in.gcount() != len)
            throw IoError(strcat_(man_.shards[s].file, ": short read at offset ", off));
        for (int64_t i = 0; i < rows * man_.context; ++i) {
            uint32_t v = 0;
            for (int b = 0; b < 4; ++b) v |= (uint32_t)buf[(size_t)(i * 4 + b)] << (8 * b);
            out.data()[done * man_.context + i] = (int64_t)(int32_t)v;
        }
        reads_.push_back({(int)s, off, len});
        done += rows;
    }
    ++step_;
    return true;
}

}  // namespace optimus

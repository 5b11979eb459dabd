#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "optimus/tensor.hpp"

namespace optimus {

// ---- tokenization ----------------------------------------------------------------------

// byte-level tokenizer: one token per input byte plus a document terminator
struct ByteTokenizer {
    static constexpr int32_t kEos = 256;
    int64_t vocab() const { return 257; }
    std::vector<int32_t> encode(const std::string& doc) const {
        std::vector<int32_t> out;
        out.reserve(doc.size());
        for (unsigned char ch : doc) out.push_back((int32_t)ch);
        return out;
    }
};

struct TokenizedFile {
    int64_t file_id = 0;
    int64_t context = 0;
    std::vector<int32_t> tokens;  // documents concatenated, each ending in EOS

    // fixed-size training instances; the trailing partial row is dropped
    int64_t instances() const { return (int64_t)tokens.size() / context; }
};

TokenizedFile tokenize_file(int64_t file_id, const std::vector<std::string>& docs,
                            const ByteTokenizer& tok, int64_t context);

// seeded Fisher-Yates bijection on [0, n)
std::vector<int64_t> build_permutation(int64_t n, uint64_t seed);

// ---- shards ----------------------------------------------------------------------------

struct ShardInfo {
    std::string file;        // basename within the shard directory
    int64_t instances = 0;
    uint32_t crc = 0;        // crc32 of the full shard file minus its footer
};

struct ShardManifest {
    uint64_t seed = 0;
    int64_t context = 0;
    int64_t vocab = 257;
    int64_t shard_size = 4096;  // instances per shard (last may be short)
    int64_t n_total = 0;
    std::vector<ShardInfo> shards;
};

// writes one shard file; tokens holds whole rows of `context` tokens.
// Returns the checksum stored in the footer.
uint32_t write_shard(const std::string& path, int64_t context, const std::vector<int32_t>& tokens);

// reads and fully validates one shard file (magic, version, counts, checksum)
std::vector<int32_t> read_shard(const std::string& path, int64_t expect_context);

// gathers instances in permutation order and writes them as shard files
// named shard-NNNNN.optd under out_dir, plus the returned manifest
ShardManifest shard_instances(const std::vector<TokenizedFile>& files,
                              const std::vector<int64_t>& perm, int64_t shard_size, uint64_t seed,
                              const std::string& out_dir);

void save_manifest(const ShardManifest& m, const std::string& path);
ShardManifest load_manifest(const std::string& path);

// re-reads every shard and checks it against the manifest; throws IoError
void validate_shards(const std::string& dir, const ShardManifest& m);

// tokenize + shuffle + shard a directory of text files (one document per
// non-empty line, files visited in name order); writes manifest.json
ShardManifest preprocess_dir(const std::string& input_dir, int64_t context, uint64_t seed,
                             int64_t shard_size, const std::string& out_dir);

// ---- training loader -------------------------------------------------------------------

struct ReadRange {
    int shard = 0;
    int64_t byte_offset = 0;  // within the shard file
    int64_t bytes = 0;
};

// serves each data-parallel rank its contiguous slice of every global batch:
// step k hands rank d the permuted instances [k*G + d*G/DP, k*G + (d+1)*G/DP)
class Loader {
  public:
    Loader(std::string dir, ShardManifest manifest, int dp, int dp_rank,
           int64_t global_batch_instances);

    // fills out with [G/DP, C] tokens; false once the epoch has no full batch left
    bool next(TensorI& out);
    void reset() { step_ = 0; }
    // reposition to an in-epoch step; ranges are pure functions of the step,
    // so resuming mid-epoch costs nothing
    void seek(int64_t step);

    int64_t steps_per_epoch() const;
    int64_t step() const { return step_; }
    // byte ranges fetched by the most recent next(), one per shard touched
    const std::vector<ReadRange>& last_reads() const { return reads_; }

  private:
    std::string dir_;
    ShardManifest man_;
    int dp_ = 1, dp_rank_ = 0;
    int64_t global_batch_ = 0;
    int64_t step_ = 0;
    std::vector<int64_t> shard_begin_;  // prefix sums of shard instance counts
    std::vector<ReadRange> reads_;
};

}  // namespace optimus

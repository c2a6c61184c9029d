#pragma once

// The non-parametric memory: key-value chunk database over an IVF index,
// [N, C] neighbor retrieval with continuation filtering, offline neighbor
// precomputation, and leakage analytics.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "retrolite/corpus.hpp"
#include "retrolite/embed.hpp"
#include "retrolite/ivf.hpp"

namespace retrolite {

struct DbEntry {
    uint64_t id = 0;
    std::vector<TokenId> key_tokens;    // chunk_len tokens (N)
    std::vector<TokenId> value_tokens;  // chunk_len tokens (C), zero-padded past doc end
    std::vector<uint8_t> value_pad;     // 1 = real token, 0 = pad
    EmbeddingVector key_embedding;
    uint32_t doc_id = 0;
    uint64_t token_offset = 0;
};

struct RetrievalDB {
    uint32_t chunk_len = 0;
    EmbedderSpec embedder;
    std::vector<DbEntry> entries;  // entry id == index
    IvfIndex index;
    uint32_t default_nprobe = 1;

    uint64_t size() const { return entries.size(); }
};

struct BuildReport {
    uint64_t entries = 0;
    uint64_t skipped_docs = 0;  // documents shorter than chunk_len
};

RetrievalDB build_db(const std::vector<TokenSequence>& documents, uint32_t chunk_len,
                     const EmbedderSpec& embedder, uint64_t seed, BuildReport* report = nullptr);

// One retrieved [N, C] record: 2*chunk_len tokens with pad mask.
struct NeighborRecord {
    std::vector<TokenId> tokens;
    std::vector<uint8_t> pad;  // 1 = real, 0 = masked
    float distance = 0.0f;
    uint64_t source_entry = 0;
    bool filled_by_repeat = false;
};

struct NeighborSet {
    uint32_t n_chunks = 0;
    uint32_t k = 0;
    std::vector<NeighborRecord> records;  // row-major n_chunks x k
    bool any_repeat = false;

    NeighborRecord& at(uint32_t chunk, uint32_t j) { return records[size_t(chunk) * k + j]; }
    const NeighborRecord& at(uint32_t chunk, uint32_t j) const {
        return records[size_t(chunk) * k + j];
    }
};

// Retrieves k neighbors for every chunk of seq. With filtering on, same-doc
// entries whose key chunk lies within one chunk of the query chunk's own
// offset are dropped, so direct continuations never leak in.
NeighborSet get_neighbors(const RetrievalDB& db, const TokenSequence& seq, uint32_t k,
                          uint32_t nprobe, bool filter_continuations);

// db.bin (entries) + index.bin (IVF) under dir
void save_db(const RetrievalDB& db, const std::string& dir);
RetrievalDB load_db(const std::string& dir);

// ---------------------------------------------------------------------
// Offline neighbor store (the training loop's input)
// ---------------------------------------------------------------------

struct NeighborStoreRecord {
    std::vector<TokenId> src, tgt;
    NeighborSet neighbors;
};

struct NeighborStoreHeader {
    uint32_t seq_len = 0, chunk_len = 0, k = 0;
    uint64_t n_records = 0;
    uint32_t vocab_size = 0;
};

void precompute_neighbors(const RetrievalDB& db, const std::vector<SequenceSample>& samples,
                          uint32_t k, uint32_t nprobe, bool filter_continuations,
                          const std::string& out_path, unsigned n_threads = 0);

// serializes fully materialized records (the layout precompute_neighbors uses)
void write_neighbor_store(const std::string& path, uint32_t seq_len, uint32_t chunk_len,
                          uint32_t k, const std::vector<NeighborStoreRecord>& records);

class NeighborStore {
public:
    explicit NeighborStore(const std::string& path);  // loads fully into memory

    const NeighborStoreHeader& header() const { return header_; }
    size_t size() const { return records_.size(); }
    const NeighborStoreRecord& record(size_t i) const { return records_[i]; }

private:
    NeighborStoreHeader header_;
    std::vector<NeighborStoreRecord> records_;
};

// ---------------------------------------------------------------------
// Leakage analytics
// ---------------------------------------------------------------------

// |set(a) ∩ set(b)| / |set(a) ∪ set(b)|; both empty -> 1.0
double jaccard_1gram(const std::vector<TokenId>& a, const std::vector<TokenId>& b);

// true iff some run of >= t consecutive tokens appears in both arrays
bool contiguous_overlap(const std::vector<TokenId>& a, const std::vector<TokenId>& b, size_t t);

struct LeakageOffender {
    size_t sample = 0;
    uint32_t chunk = 0, rank = 0;
    double jaccard = 0.0;
    bool has_overlap = false;
};

struct LeakageReport {
    size_t neighbors_checked = 0;
    size_t neighbors_with_overlap = 0;
    double overlap_fraction = 0.0;
    std::array<uint64_t, 20> jaccard_histogram{};  // bin width 0.05, last bin closed at 1.0
    std::vector<LeakageOffender> worst;            // highest jaccard first
};

LeakageReport leakage_report(const std::vector<NeighborStoreRecord>& records, size_t t = 8,
                             size_t max_offenders = 10);

}  // namespace retrolite

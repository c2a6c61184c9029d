#include "retrolite/retrodb.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <thread>
#include <unordered_set>

#include "retrolite/common.hpp"

namespace retrolite {

RetrievalDB build_db(const std::vector<TokenSequence>& documents, uint32_t chunk_len,
                     const EmbedderSpec& embedder, uint64_t seed, BuildReport* report) {
    if (chunk_len == 0) fail("build_db: chunk_len must be positive");
    RetrievalDB db;
    db.chunk_len = chunk_len;
    db.embedder = embedder;

    BuildReport rep;
    for (const auto& doc : documents) {
        if (doc.size() < chunk_len) {
            ++rep.skipped_docs;
            continue;
        }
        const size_t n_chunks = doc.size() / chunk_len;  // trailing partial chunk dropped
        for (size_t c = 0; c < n_chunks; ++c) {
            DbEntry e;
            e.id = db.entries.size();
            e.doc_id = doc.doc_id;
            e.token_offset = doc.offset + c * chunk_len;
            const size_t key_start = c * chunk_len;
            e.key_tokens.assign(doc.tokens.begin() + long(key_start),
                                doc.tokens.begin() + long(key_start + chunk_len));
            e.value_tokens.assign(chunk_len, 0);
            e.value_pad.assign(chunk_len, 0);
            const size_t val_start = key_start + chunk_len;
            for (size_t j = 0; j < chunk_len && val_start + j < doc.size(); ++j) {
                e.value_tokens[j] = doc.tokens[val_start + j];
                e.value_pad[j] = 1;
            }
            e.key_embedding = embed_tokens(e.key_tokens, embedder);
            db.entries.push_back(std::move(e));
        }
    }
    if (db.entries.empty()) fail("build_db: no document reaches chunk_len ", chunk_len);
    rep.entries = db.entries.size();

    const IndexParams params = default_index_params(db.entries.size());
    std::vector<EmbeddingVector> keys;
    std::vector<uint64_t> ids;
    keys.reserve(db.entries.size());
    ids.reserve(db.entries.size());
    for (const auto& e : db.entries) {
        keys.push_back(e.key_embedding);
        ids.push_back(e.id);
    }
    db.index = IvfIndex::train(keys, params.ncentroids, seed);
    db.index.add(ids, keys);
    db.default_nprobe = params.nprobe;

    if (report) *report = rep;
    return db;
}

namespace {

NeighborRecord record_from_entry(const DbEntry& e, float distance) {
    NeighborRecord r;
    r.tokens = e.key_tokens;
    r.tokens.insert(r.tokens.end(), e.value_tokens.begin(), e.value_tokens.end());
    r.pad.assign(e.key_tokens.size(), 1);
    r.pad.insert(r.pad.end(), e.value_pad.begin(), e.value_pad.end());
    r.distance = distance;
    r.source_entry = e.id;
    return r;
}

// Same-document entries whose key chunk starts within one chunk of the query
// chunk are excluded: the entry at the query's own offset, the following
// entry (the direct continuation), and the preceding entry (whose value is
// the query chunk itself).
bool excluded_by_filter(const DbEntry& e, uint32_t query_doc, uint64_t query_offset,
                        uint32_t chunk_len) {
    if (e.doc_id != query_doc) return false;
    const int64_t delta = int64_t(e.token_offset) - int64_t(query_offset);
    return delta >= -int64_t(chunk_len) && delta <= int64_t(chunk_len);
}

}  // namespace

NeighborSet get_neighbors(const RetrievalDB& db, const TokenSequence& seq, uint32_t k,
                          uint32_t nprobe, bool filter_continuations) {
    if (db.entries.empty()) fail("get_neighbors: empty retrieval database");
    if (k < 1) fail("get_neighbors: k must be >= 1");
    if (seq.size() % db.chunk_len != 0)
        fail("get_neighbors: sequence length ", seq.size(), " not a multiple of chunk_len ",
             db.chunk_len);

    const auto chunks = split_into_chunks(seq, db.chunk_len);
    NeighborSet set;
    set.n_chunks = uint32_t(chunks.size());
    set.k = k;
    set.records.reserve(chunks.size() * k);

    // filter margin: request extra candidates so k usually survive
    const size_t request = filter_continuations
                               ? std::min<size_t>(size_t(4) * k, db.entries.size())
                               : std::min<size_t>(k, db.entries.size());

    for (const auto& chunk : chunks) {
        const EmbeddingVector q = embed_tokens(chunk.tokens, db.embedder);
        const SearchResult res = db.index.search(q, request, nprobe);

        std::vector<NeighborRecord> row;
        for (size_t i = 0; i < res.ids.size() && row.size() < k; ++i) {
            const DbEntry& e = db.entries[res.ids[i]];
            if (filter_continuations &&
                excluded_by_filter(e, seq.doc_id, chunk.offset, db.chunk_len))
                continue;
            row.push_back(record_from_entry(e, res.distances[i]));
        }
        while (row.size() < k) {
            set.any_repeat = true;
            if (row.empty()) {
                // nothing survived the filter: emit a fully masked placeholder
                NeighborRecord r;
                r.tokens.assign(size_t(2) * db.chunk_len, 0);
                r.pad.assign(size_t(2) * db.chunk_len, 0);
                r.distance = std::numeric_limits<float>::infinity();
                r.source_entry = UINT64_MAX;
                r.filled_by_repeat = true;
                row.push_back(std::move(r));
            } else {
                NeighborRecord r = row.back();
                r.filled_by_repeat = true;
                row.push_back(std::move(r));
            }
        }
        for (auto& r : row) set.records.push_back(std::move(r));
    }
    return set;
}

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

namespace {
constexpr uint32_t kDbMagic = 0x42444c52;  // "RLDB"
constexpr uint32_t kDbVersion = 1;
}  // namespace

void save_db(const RetrievalDB& db, const std::string& dir) {
    std::filesystem::create_directories(dir);
    BinaryWriter w(dir + "/db.bin");
    w.u32(kDbMagic);
    w.u32(kDbVersion);
    w.u32(db.chunk_len);
    w.u32(db.embedder.d_emb);
    w.u64(db.embedder.seed);
    w.u32(db.default_nprobe);
    w.u64(db.entries.size());
    for (const auto& e : db.entries) {
        w.u64(e.id);
        w.u32(e.doc_id);
        w.u64(e.token_offset);
        w.u32_array(e.key_tokens.data(), e.key_tokens.size());
        w.u32_array(e.value_tokens.data(), e.value_tokens.size());
        w.bytes(e.value_pad.data(), e.value_pad.size());
        w.f32_array(e.key_embedding.data(), e.key_embedding.size());
    }
    w.close();
    db.index.save(dir + "/index.bin");
}

RetrievalDB load_db(const std::string& dir) {
    BinaryReader r(dir + "/db.bin");
    if (r.u32() != kDbMagic) fail("bad database magic: ", dir, "/db.bin");
    if (r.u32() != kDbVersion) fail("unsupported database version: ", dir, "/db.bin");
    RetrievalDB db;
    db.chunk_len = r.u32();
    db.embedder.kind = EmbedderKind::BuiltinHash;
    db.embedder.d_emb = r.u32();
    db.embedder.seed = r.u64();
    db.default_nprobe = r.u32();
    const uint64_t n = r.u64();
    db.entries.resize(n);
    for (auto& e : db.entries) {
        e.id = r.u64();
        e.doc_id = r.u32();
        e.token_offset = r.u64();
        e.key_tokens.resize(db.chunk_len);
        e.value_tokens.resize(db.chunk_len);
        e.value_pad.resize(db.chunk_len);
        r.u32_array(e.key_tokens.data(), db.chunk_len);
        r.u32_array(e.value_tokens.data(), db.chunk_len);
        r.bytes(e.value_pad.data(), db.chunk_len);
        e.key_embedding.resize(db.embedder.d_emb);
        r.f32_array(e.key_embedding.data(), db.embedder.d_emb);
    }
    db.index = IvfIndex::load(dir + "/index.bin");
    if (db.index.size() != db.entries.size())
        fail("database/index entry count mismatch under ", dir);
    return db;
}

// ---------------------------------------------------------------------
// Neighbor store file
// ---------------------------------------------------------------------

namespace {
constexpr uint32_t kStoreMagic = 0x534e4c52;  // "RLNS"
constexpr uint32_t kStoreVersion = 1;
}  // namespace

void precompute_neighbors(const RetrievalDB& db, const std::vector<SequenceSample>& samples,
                          uint32_t k, uint32_t nprobe, bool filter_continuations,
                          const std::string& out_path, unsigned n_threads) {
    if (samples.empty()) fail("precompute_neighbors: no samples");
    const uint32_t seq_len = uint32_t(samples[0].src.size());
    if (seq_len % db.chunk_len != 0)
        fail("precompute_neighbors: seq_len ", seq_len, " not a multiple of db chunk_len ",
             db.chunk_len);

    // retrieval parallelizes across samples; output order stays by sample index
    std::vector<NeighborSet> sets(samples.size());
    if (n_threads == 0) n_threads = std::max(1u, std::thread::hardware_concurrency());
    n_threads = std::min<unsigned>(n_threads, samples.size());
    std::vector<std::thread> workers;
    for (unsigned t = 0; t < n_threads; ++t) {
        workers.emplace_back([&, t] {
            for (size_t i = t; i < samples.size(); i += n_threads)
                sets[i] = get_neighbors(db, samples[i].src, k, nprobe, filter_continuations);
        });
    }
    for (auto& w : workers) w.join();

    std::vector<NeighborStoreRecord> records(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].src.size() != seq_len) fail("precompute_neighbors: ragged sample lengths");
        records[i].src = samples[i].src.tokens;
        records[i].tgt = samples[i].tgt.tokens;
        records[i].neighbors = std::move(sets[i]);
    }
    write_neighbor_store(out_path, seq_len, db.chunk_len, k, records);
}

void write_neighbor_store(const std::string& path, uint32_t seq_len, uint32_t chunk_len,
                          uint32_t k, const std::vector<NeighborStoreRecord>& records) {
    const uint32_t n_chunks = seq_len / chunk_len;
    BinaryWriter w(path);
    w.u32(kStoreMagic);
    w.u32(kStoreVersion);
    w.u32(seq_len);
    w.u32(chunk_len);
    w.u32(k);
    w.u64(records.size());
    w.u32(0);  // vocab hint, informational
    for (const auto& rec : records) {
        w.u32_array(rec.src.data(), seq_len);
        w.u32_array(rec.tgt.data(), seq_len);
        for (uint32_t c = 0; c < n_chunks; ++c) {
            for (uint32_t j = 0; j < k; ++j) {
                const NeighborRecord& r = rec.neighbors.at(c, j);
                w.u32_array(r.tokens.data(), r.tokens.size());
                w.bytes(r.pad.data(), r.pad.size());
                w.f32(r.distance);
                w.u64(r.source_entry);
                w.u8(r.filled_by_repeat ? 1 : 0);
            }
        }
    }
    w.close();
}

NeighborStore::NeighborStore(const std::string& path) {
    BinaryReader r(path);
    if (r.u32() != kStoreMagic) fail("bad neighbor store magic: ", path);
    if (r.u32() != kStoreVersion) fail("unsupported neighbor store version: ", path);
    header_.seq_len = r.u32();
    header_.chunk_len = r.u32();
    header_.k = r.u32();
    header_.n_records = r.u64();
    header_.vocab_size = r.u32();

    const uint32_t n_chunks = header_.seq_len / header_.chunk_len;
    const size_t rec_len = size_t(2) * header_.chunk_len;
    records_.resize(header_.n_records);
    for (auto& rec : records_) {
        rec.src.resize(header_.seq_len);
        rec.tgt.resize(header_.seq_len);
        r.u32_array(rec.src.data(), header_.seq_len);
        r.u32_array(rec.tgt.data(), header_.seq_len);
        rec.neighbors.n_chunks = n_chunks;
        rec.neighbors.k = header_.k;
        rec.neighbors.records.resize(size_t(n_chunks) * header_.k);
        for (auto& nr : rec.neighbors.records) {
            nr.tokens.resize(rec_len);
            nr.pad.resize(rec_len);
            r.u32_array(nr.tokens.data(), rec_len);
            r.bytes(nr.pad.data(), rec_len);
            nr.distance = r.f32();
            nr.source_entry = r.u64();
            nr.filled_by_repeat = r.u8() != 0;
            if (nr.filled_by_repeat) rec.neighbors.any_repeat = true;
        }
    }
}

// ---------------------------------------------------------------------
// Leakage analytics
// ---------------------------------------------------------------------

double jaccard_1gram(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    std::unordered_set<TokenId> sa(a.begin(), a.end());
    std::unordered_set<TokenId> sb(b.begin(), b.end());
    if (sa.empty() && sb.empty()) return 1.0;
    size_t inter = 0;
    for (TokenId t : sa) inter += sb.count(t);
    const size_t uni = sa.size() + sb.size() - inter;
    return double(inter) / double(uni);
}

bool contiguous_overlap(const std::vector<TokenId>& a, const std::vector<TokenId>& b, size_t t) {
    if (t < 1) fail("contiguous_overlap: t must be >= 1");
    if (a.size() < t || b.size() < t) return false;
    // hash every t-gram of a, then scan b; a run >= t contains a run of exactly t
    std::unordered_set<uint64_t> grams;
    grams.reserve(a.size());
    auto gram_hash = [t](const std::vector<TokenId>& v, size_t start) {
        uint64_t h = 0x243f6a8885a308d3ULL;
        for (size_t i = 0; i < t; ++i) h = splitmix64(h ^ v[start + i]);
        return h;
    };
    for (size_t i = 0; i + t <= a.size(); ++i) grams.insert(gram_hash(a, i));
    for (size_t i = 0; i + t <= b.size(); ++i) {
        if (!grams.count(gram_hash(b, i))) continue;
        // hash hit: confirm with a direct comparison against every position of a
        for (size_t j = 0; j + t <= a.size(); ++j)
            if (std::equal(b.begin() + long(i), b.begin() + long(i + t), a.begin() + long(j)))
                return true;
    }
    return false;
}

LeakageReport leakage_report(const std::vector<NeighborStoreRecord>& records, size_t t,
                             size_t max_offenders) {
    LeakageReport rep;
    std::vector<LeakageOffender> all;
    for (size_t s = 0; s < records.size(); ++s) {
        const auto& rec = records[s];
        for (uint32_t c = 0; c < rec.neighbors.n_chunks; ++c) {
            for (uint32_t j = 0; j < rec.neighbors.k; ++j) {
                const NeighborRecord& nr = rec.neighbors.at(c, j);
                std::vector<TokenId> real_tokens;
                for (size_t i = 0; i < nr.tokens.size(); ++i)
                    if (nr.pad[i]) real_tokens.push_back(nr.tokens[i]);

                LeakageOffender off;
                off.sample = s;
                off.chunk = c;
                off.rank = j;
                off.jaccard = jaccard_1gram(rec.src, real_tokens);
                off.has_overlap = contiguous_overlap(rec.src, real_tokens, t);
                ++rep.neighbors_checked;
                if (off.has_overlap) ++rep.neighbors_with_overlap;
                size_t bin = std::min<size_t>(size_t(off.jaccard / 0.05), 19);
                ++rep.jaccard_histogram[bin];
                all.push_back(off);
            }
        }
    }
    rep.overlap_fraction =
        rep.neighbors_checked ? double(rep.neighbors_with_overlap) / double(rep.neighbors_checked)
                              : 0.0;
    std::sort(all.begin(), all.end(), [](const LeakageOffender& x, const LeakageOffender& y) {
        if (x.has_overlap != y.has_overlap) return x.has_overlap > y.has_overlap;
        return x.jaccard > y.jaccard;
    });
    if (all.size() > max_offenders) all.resize(max_offenders);
    rep.worst = std::move(all);
    return rep;
}

}  // namespace retrolite

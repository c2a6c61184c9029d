#pragma once

// Inverted-file vector index: k-means coarse quantizer plus per-centroid
// inverted lists. Search probes the nprobe nearest centroids and ranks the
// entries in those lists exactly. exact_search is the linear-scan oracle
// used for recall measurement.

#include <cstdint>
#include <string>
#include <vector>

#include "retrolite/embed.hpp"

namespace retrolite {

enum class Metric : uint32_t { L2 = 0, InnerProduct = 1 };

struct SearchResult {
    std::vector<uint64_t> ids;
    std::vector<float> distances;  // ascending; InnerProduct stores -dot
};

struct IndexParams {
    uint32_t ncentroids;
    uint32_t nprobe;
};

// ncentroids = 2^floor(log2(sqrt(n))) clamped to [1, n];
// nprobe = round(sqrt(ncentroids)) clamped to [1, ncentroids].
IndexParams default_index_params(uint64_t n_entries);

class IvfIndex {
public:
    IvfIndex() = default;

    static IvfIndex train(const std::vector<EmbeddingVector>& vectors, uint32_t ncentroids,
                          uint64_t seed, Metric metric = Metric::L2);

    void add(const std::vector<uint64_t>& ids, const std::vector<EmbeddingVector>& vectors);

    SearchResult search(const EmbeddingVector& query, size_t k, uint32_t nprobe) const;

    bool trained() const { return trained_; }
    uint32_t dim() const { return d_; }
    Metric metric() const { return metric_; }
    uint32_t ncentroids() const { return uint32_t(list_ids_.size()); }
    uint64_t size() const { return n_entries_; }
    const std::vector<float>& centroid(uint32_t c) const { return centroids_[c]; }
    size_t list_size(uint32_t c) const { return list_ids_[c].size(); }
    const std::vector<uint64_t>& list_ids(uint32_t c) const { return list_ids_[c]; }

    void save(const std::string& path) const;
    static IvfIndex load(const std::string& path);

private:
    float entry_distance(const float* vec, const EmbeddingVector& query) const;
    uint32_t nearest_centroid(const EmbeddingVector& v) const;

    uint32_t d_ = 0;
    Metric metric_ = Metric::L2;
    bool trained_ = false;
    uint64_t n_entries_ = 0;
    std::vector<std::vector<float>> centroids_;
    std::vector<std::vector<uint64_t>> list_ids_;
    std::vector<std::vector<float>> list_vecs_;  // per list, contiguous d_-strided
};

// Full linear scan over (ids, vectors); ground truth for recall.
SearchResult exact_search(const std::vector<EmbeddingVector>& vectors,
                          const std::vector<uint64_t>& ids, const EmbeddingVector& query, size_t k,
                          Metric metric = Metric::L2);

// |result ∩ truth| / |truth| over id sets
double recall_at_k(const SearchResult& result, const SearchResult& truth);

struct SearchTiming {
    double avg_ms = 0.0, max_ms = 0.0, min_ms = 0.0;
    size_t n_queries = 0;
};

// Runs the query set across `concurrency` threads (read-only index) and
// reports per-query wall time.
SearchTiming profile_search(const IvfIndex& index, const std::vector<EmbeddingVector>& queries,
                            size_t k, uint32_t nprobe, unsigned concurrency = 16);

}  // namespace retrolite

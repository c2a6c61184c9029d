#include "retrolite/ivf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>
#include <unordered_set>

#include "retrolite/common.hpp"

namespace retrolite {

namespace {

double l2_sq(const float* a, const float* b, size_t d) {
    double s = 0.0;
    for (size_t i = 0; i < d; ++i) {
        double diff = double(a[i]) - double(b[i]);
        s += diff * diff;
    }
    return s;
}

double dot_d(const float* a, const float* b, size_t d) {
    double s = 0.0;
    for (size_t i = 0; i < d; ++i) s += double(a[i]) * double(b[i]);
    return s;
}

float metric_distance(Metric m, const float* a, const float* b, size_t d) {
    return m == Metric::L2 ? float(l2_sq(a, b, d)) : float(-dot_d(a, b, d));
}

struct Cand {
    float dist;
    uint64_t id;
    bool operator<(const Cand& o) const {
        return dist != o.dist ? dist < o.dist : id < o.id;  // ties break by ascending id
    }
};

void take_top_k(std::vector<Cand>& cands, size_t k, SearchResult& out) {
    if (cands.size() > k) {
        std::nth_element(cands.begin(), cands.begin() + long(k), cands.end());
        cands.resize(k);
    }
    std::sort(cands.begin(), cands.end());
    out.ids.reserve(cands.size());
    out.distances.reserve(cands.size());
    for (const auto& c : cands) {
        out.ids.push_back(c.id);
        out.distances.push_back(c.dist);
    }
}

}  // namespace

IndexParams default_index_params(uint64_t n_entries) {
    if (n_entries < 1) fail("default_index_params requires at least one entry");
    const double root = std::sqrt(double(n_entries));
    uint64_t nc = 1;
    while (nc * 2 <= uint64_t(root)) nc *= 2;  // 2^floor(log2(sqrt(n)))
    nc = std::min<uint64_t>(std::max<uint64_t>(nc, 1), n_entries);
    uint64_t np = uint64_t(std::llround(std::sqrt(double(nc))));
    np = std::min<uint64_t>(std::max<uint64_t>(np, 1), nc);
    return IndexParams{uint32_t(nc), uint32_t(np)};
}

IvfIndex IvfIndex::train(const std::vector<EmbeddingVector>& vectors, uint32_t ncentroids,
                         uint64_t seed, Metric metric) {
    if (vectors.empty()) fail("train: no vectors");
    if (ncentroids == 0) fail("train: ncentroids must be positive");
    if (vectors.size() < ncentroids)
        fail("train: ", vectors.size(), " vectors < ", ncentroids, " centroids");
    const size_t d = vectors[0].size();
    const size_t n = vectors.size();
    for (const auto& v : vectors) {
        if (v.size() != d) fail("train: inconsistent vector dimensions");
        for (float x : v)
            if (!std::isfinite(x)) fail("train: non-finite vector entry");
    }

    Rng rng(derive_seed(seed, 0x6b6d6e73));
    std::vector<std::vector<float>> cents(ncentroids);

    // k-means++ seeding
    std::vector<double> dist2(n);
    cents[0] = vectors[rng.next_range(n)];
    for (size_t i = 0; i < n; ++i) dist2[i] = l2_sq(vectors[i].data(), cents[0].data(), d);
    for (uint32_t c = 1; c < ncentroids; ++c) {
        double total = 0.0;
        for (double w : dist2) total += w;
        size_t pick = 0;
        if (total > 0.0) {
            double target = rng.uniform01() * total, acc = 0.0;
            for (size_t i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.next_range(n);
        }
        cents[c] = vectors[pick];
        for (size_t i = 0; i < n; ++i)
            dist2[i] = std::min(dist2[i], l2_sq(vectors[i].data(), cents[c].data(), d));
    }

    // Lloyd iterations: fixed 25 rounds or max centroid movement < 1e-6
    std::vector<uint32_t> assign(n, 0);
    std::vector<double> sums(size_t(ncentroids) * d);
    std::vector<uint64_t> counts(ncentroids);
    for (int iter = 0; iter < 25; ++iter) {
        for (size_t i = 0; i < n; ++i) {
            double best = l2_sq(vectors[i].data(), cents[0].data(), d);
            uint32_t best_c = 0;
            for (uint32_t c = 1; c < ncentroids; ++c) {
                double dd = l2_sq(vectors[i].data(), cents[c].data(), d);
                if (dd < best) {
                    best = dd;
                    best_c = c;
                }
            }
            assign[i] = best_c;
            dist2[i] = best;
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (size_t i = 0; i < n; ++i) {
            double* s = &sums[size_t(assign[i]) * d];
            for (size_t j = 0; j < d; ++j) s[j] += vectors[i][j];
            ++counts[assign[i]];
        }
        // empty-cluster repair: reseed to the point farthest from its centroid
        for (uint32_t c = 0; c < ncentroids; ++c) {
            if (counts[c] != 0) continue;
            size_t far = size_t(std::max_element(dist2.begin(), dist2.end()) - dist2.begin());
            double* s = &sums[size_t(c) * d];
            for (size_t j = 0; j < d; ++j) s[j] = vectors[far][j];
            counts[c] = 1;
            dist2[far] = 0.0;  // keep later repairs from picking the same point
        }
        double max_move2 = 0.0;
        for (uint32_t c = 0; c < ncentroids; ++c) {
            double move2 = 0.0;
            const double* s = &sums[size_t(c) * d];
            for (size_t j = 0; j < d; ++j) {
                double nv = s[j] / double(counts[c]);
                double delta = nv - double(cents[c][j]);
                move2 += delta * delta;
                cents[c][j] = float(nv);
            }
            max_move2 = std::max(max_move2, move2);
        }
        if (std::sqrt(max_move2) < 1e-6) break;
    }

    IvfIndex idx;
    idx.d_ = uint32_t(d);
    idx.metric_ = metric;
    idx.trained_ = true;
    idx.centroids_ = std::move(cents);
    idx.list_ids_.resize(ncentroids);
    idx.list_vecs_.resize(ncentroids);
    return idx;
}

uint32_t IvfIndex::nearest_centroid(const EmbeddingVector& v) const {
    uint32_t best_c = 0;
    float best = metric_distance(metric_, v.data(), centroids_[0].data(), d_);
    for (uint32_t c = 1; c < centroids_.size(); ++c) {
        float dd = metric_distance(metric_, v.data(), centroids_[c].data(), d_);
        if (dd < best) {
            best = dd;
            best_c = c;
        }
    }
    return best_c;
}

void IvfIndex::add(const std::vector<uint64_t>& ids, const std::vector<EmbeddingVector>& vectors) {
    if (!trained_) fail("add: index is not trained");
    if (ids.size() != vectors.size()) fail("add: ids/vectors size mismatch");
    std::unordered_set<uint64_t> present;
    present.reserve(n_entries_ + ids.size());
    for (const auto& list : list_ids_) present.insert(list.begin(), list.end());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (vectors[i].size() != d_) fail("add: vector dimension ", vectors[i].size(), " != ", d_);
        if (!present.insert(ids[i]).second) fail("add: duplicate entry id ", ids[i]);
        uint32_t c = nearest_centroid(vectors[i]);
        list_ids_[c].push_back(ids[i]);
        list_vecs_[c].insert(list_vecs_[c].end(), vectors[i].begin(), vectors[i].end());
        ++n_entries_;
    }
}

SearchResult IvfIndex::search(const EmbeddingVector& query, size_t k, uint32_t nprobe) const {
    if (!trained_) fail("search: index is not trained");
    if (n_entries_ == 0) fail("search: index is empty");
    if (k < 1) fail("search: k must be >= 1");
    if (nprobe < 1 || nprobe > ncentroids())
        fail("search: nprobe ", nprobe, " outside [1, ", ncentroids(), "]");
    if (query.size() != d_) fail("search: query dimension ", query.size(), " != ", d_);

    std::vector<Cand> probe(ncentroids());
    for (uint32_t c = 0; c < ncentroids(); ++c)
        probe[c] = {metric_distance(metric_, query.data(), centroids_[c].data(), d_), c};
    std::partial_sort(probe.begin(), probe.begin() + nprobe, probe.end());

    std::vector<Cand> cands;
    for (uint32_t p = 0; p < nprobe; ++p) {
        const uint32_t c = uint32_t(probe[p].id);
        const auto& ids = list_ids_[c];
        const float* vecs = list_vecs_[c].data();
        for (size_t i = 0; i < ids.size(); ++i)
            cands.push_back({metric_distance(metric_, vecs + i * d_, query.data(), d_), ids[i]});
    }
    SearchResult out;
    take_top_k(cands, k, out);
    return out;
}

float IvfIndex::entry_distance(const float* vec, const EmbeddingVector& query) const {
    return metric_distance(metric_, vec, query.data(), d_);
}

SearchResult exact_search(const std::vector<EmbeddingVector>& vectors,
                          const std::vector<uint64_t>& ids, const EmbeddingVector& query, size_t k,
                          Metric metric) {
    if (vectors.empty()) fail("exact_search: empty vector set");
    if (vectors.size() != ids.size()) fail("exact_search: ids/vectors size mismatch");
    if (k < 1) fail("exact_search: k must be >= 1");
    std::vector<Cand> cands(vectors.size());
    for (size_t i = 0; i < vectors.size(); ++i)
        cands[i] = {metric_distance(metric, vectors[i].data(), query.data(), query.size()), ids[i]};
    SearchResult out;
    take_top_k(cands, k, out);
    return out;
}

double recall_at_k(const SearchResult& result, const SearchResult& truth) {
    if (truth.ids.empty()) return 1.0;
    std::unordered_set<uint64_t> want(truth.ids.begin(), truth.ids.end());
    size_t hit = 0;
    for (uint64_t id : result.ids) hit += want.count(id);
    return double(hit) / double(want.size());
}

SearchTiming profile_search(const IvfIndex& index, const std::vector<EmbeddingVector>& queries,
                            size_t k, uint32_t nprobe, unsigned concurrency) {
    if (queries.empty()) fail("profile_search: no queries");
    std::vector<double> ms(queries.size());
    const unsigned n_threads = std::max(1u, std::min<unsigned>(concurrency, queries.size()));
    std::vector<std::thread> threads;
    for (unsigned t = 0; t < n_threads; ++t) {
        threads.emplace_back([&, t] {
            for (size_t q = t; q < queries.size(); q += n_threads) {
                auto t0 = std::chrono::steady_clock::now();
                (void)index.search(queries[q], k, nprobe);
                auto t1 = std::chrono::steady_clock::now();
                ms[q] = std::chrono::duration<double, std::milli>(t1 - t0).count();
            }
        });
    }
    for (auto& th : threads) th.join();

    SearchTiming out;
    out.n_queries = queries.size();
    out.min_ms = ms[0];
    out.max_ms = ms[0];
    double sum = 0.0;
    for (double v : ms) {
        sum += v;
        out.min_ms = std::min(out.min_ms, v);
        out.max_ms = std::max(out.max_ms, v);
    }
    out.avg_ms = sum / double(ms.size());
    return out;
}

namespace {
constexpr uint32_t kIndexMagic = 0x56494c52;  // "RLIV"
constexpr uint32_t kIndexVersion = 1;
}  // namespace

void IvfIndex::save(const std::string& path) const {
    if (!trained_) fail("save: index is not trained");
    // payload is built in memory first so the header can carry its checksum
    std::string tmp = path + ".payload.tmp";
    {
        BinaryWriter w(tmp);
        for (const auto& c : centroids_) w.f32_array(c.data(), c.size());
        for (uint32_t c = 0; c < ncentroids(); ++c) {
            w.u64(list_ids_[c].size());
            for (uint64_t id : list_ids_[c]) w.u64(id);
            w.f32_array(list_vecs_[c].data(), list_vecs_[c].size());
        }
        w.close();
    }
    auto payload = read_file_bytes(tmp);
    std::remove(tmp.c_str());

    BinaryWriter w(path);
    w.u32(kIndexMagic);
    w.u32(kIndexVersion);
    w.u32(d_);
    w.u32(uint32_t(metric_));
    w.u32(ncentroids());
    w.u64(n_entries_);
    w.u32(crc32(payload.data(), payload.size()));
    w.bytes(payload.data(), payload.size());
    w.close();
}

IvfIndex IvfIndex::load(const std::string& path) {
    BinaryReader r(path);
    if (r.u32() != kIndexMagic) fail("bad index magic: ", path);
    if (r.u32() != kIndexVersion) fail("unsupported index version: ", path);
    IvfIndex idx;
    idx.d_ = r.u32();
    idx.metric_ = Metric(r.u32());
    const uint32_t nc = r.u32();
    idx.n_entries_ = r.u64();
    const uint32_t want_crc = r.u32();

    const size_t header_bytes = 4 * 6 + 8;
    auto file = read_file_bytes(path);
    if (file.size() < header_bytes) fail("truncated index file: ", path);
    const uint32_t got_crc = crc32(file.data() + header_bytes, file.size() - header_bytes);
    if (got_crc != want_crc) fail("index checksum mismatch: ", path);

    idx.centroids_.resize(nc);
    for (uint32_t c = 0; c < nc; ++c) {
        idx.centroids_[c].resize(idx.d_);
        r.f32_array(idx.centroids_[c].data(), idx.d_);
    }
    idx.list_ids_.resize(nc);
    idx.list_vecs_.resize(nc);
    uint64_t total = 0;
    for (uint32_t c = 0; c < nc; ++c) {
        uint64_t len = r.u64();
        idx.list_ids_[c].resize(len);
        for (uint64_t i = 0; i < len; ++i) idx.list_ids_[c][i] = r.u64();
        idx.list_vecs_[c].resize(len * idx.d_);
        r.f32_array(idx.list_vecs_[c].data(), idx.list_vecs_[c].size());
        total += len;
    }
    if (total != idx.n_entries_) fail("index entry count mismatch: ", path);
    idx.trained_ = true;
    return idx;
}

}  // namespace retrolite

#include "retrolite/embed.hpp"

#include <cmath>

#include "retrolite/common.hpp"

namespace retrolite {

namespace {

// Bucket and sign for one n-gram. The low bit picks the sign, the rest the
// bucket, so bucket and sign stay independent.
inline void hash_feature(uint64_t seed, uint64_t a, uint64_t b, uint32_t d_emb, uint32_t& bucket,
                         float& sign) {
    uint64_t h = splitmix64(seed ^ splitmix64(a + 0x51ed2701));
    if (b != UINT64_MAX) h = splitmix64(h ^ splitmix64(b + 0x2c9277b5));
    sign = (h & 1) ? 1.0f : -1.0f;
    bucket = uint32_t((h >> 1) % d_emb);
}

}  // namespace

EmbeddingVector embed_tokens(const std::vector<TokenId>& tokens, const EmbedderSpec& spec) {
    if (spec.kind != EmbedderKind::BuiltinHash)
        fail("embed_tokens requires the builtin-hash embedder");
    if (spec.d_emb == 0) fail("d_emb must be positive");
    if (tokens.empty()) fail("cannot embed an empty token array");

    EmbeddingVector v(spec.d_emb, 0.0f);
    uint32_t bucket;
    float sign;
    for (size_t i = 0; i < tokens.size(); ++i) {
        hash_feature(spec.seed, tokens[i], UINT64_MAX, spec.d_emb, bucket, sign);
        v[bucket] += sign;
        if (i + 1 < tokens.size()) {
            hash_feature(spec.seed + 0x9e37, tokens[i], tokens[i + 1], spec.d_emb, bucket, sign);
            v[bucket] += sign;
        }
    }

    double norm2 = 0.0;
    for (float x : v) norm2 += double(x) * double(x);
    if (norm2 == 0.0) {
        // signed counts cancelled out entirely; perturb deterministically
        v[0] = 1.0f;
        norm2 = 1.0;
    }
    const float inv = float(1.0 / std::sqrt(norm2));
    for (float& x : v) x *= inv;
    return v;
}

namespace {
constexpr uint32_t kTableMagic = 0x42454c52;  // "RLEB"
constexpr uint32_t kTableVersion = 1;
}  // namespace

void save_embedding_table(const std::string& path, const std::vector<EmbeddingVector>& vectors,
                          uint32_t d_emb) {
    BinaryWriter w(path);
    w.u32(kTableMagic);
    w.u32(kTableVersion);
    w.u32(d_emb);
    w.u32(uint32_t(vectors.size()));
    for (const auto& v : vectors) {
        if (v.size() != d_emb) fail("vector dimension ", v.size(), " != d_emb ", d_emb);
        w.f32_array(v.data(), v.size());
    }
    w.close();
}

EmbeddingTable load_embedding_table(const std::string& path, const EmbedderSpec& spec) {
    BinaryReader r(path);
    if (r.u32() != kTableMagic) fail("bad embedding table magic: ", path);
    if (r.u32() != kTableVersion) fail("unsupported embedding table version: ", path);
    const uint32_t d = r.u32();
    if (d != spec.d_emb)
        fail("embedding table dimension mismatch: file has ", d, ", spec wants ", spec.d_emb);
    const uint32_t count = r.u32();
    EmbeddingTable table;
    table.reserve(count);
    for (uint32_t id = 0; id < count; ++id) {
        EmbeddingVector v(d);
        r.f32_array(v.data(), d);
        for (float x : v)
            if (!std::isfinite(x)) fail("non-finite embedding entry in vector ", id, ": ", path);
        table.emplace(id, std::move(v));
    }
    return table;
}

}  // namespace retrolite

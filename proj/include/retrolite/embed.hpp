#pragma once

// Chunk-embedding providers. The builtin embedder hashes token 1-grams and
// 2-grams into signed buckets and L2-normalizes; it is cheap, deterministic
// across platforms (integer hashing only), and its similarity notion is
// brute-force verifiable. An external table path ingests precomputed vectors.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "retrolite/corpus.hpp"

namespace retrolite {

using EmbeddingVector = std::vector<float>;

enum class EmbedderKind { BuiltinHash, PrecomputedTable };

struct EmbedderSpec {
    EmbedderKind kind = EmbedderKind::BuiltinHash;
    uint32_t d_emb = 64;
    uint64_t seed = 0;
};

// Embeds any non-empty token array; unit L2 norm on output. Chunk-length
// preconditions are enforced by callers that require them.
EmbeddingVector embed_tokens(const std::vector<TokenId>& tokens, const EmbedderSpec& spec);

inline EmbeddingVector embed_chunk(const Chunk& chunk, const EmbedderSpec& spec) {
    return embed_tokens(chunk.tokens, spec);
}

inline float dot(const EmbeddingVector& a, const EmbeddingVector& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
    return float(s);
}

// similarity = dot, distance = 1 - dot (unit vectors make dot == cosine)
inline float embedding_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
    return 1.0f - dot(a, b);
}

using EmbeddingTable = std::unordered_map<uint64_t, EmbeddingVector>;

// Table file: header (magic, version, d_emb, count) then count x d_emb
// little-endian f32, implicit ids 0..count-1.
void save_embedding_table(const std::string& path, const std::vector<EmbeddingVector>& vectors,
                          uint32_t d_emb);
EmbeddingTable load_embedding_table(const std::string& path, const EmbedderSpec& spec);

}  // namespace retrolite

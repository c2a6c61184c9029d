#pragma once

// Text normalization, tokenization, chunking and training-sample windows.
// All functions here are pure and deterministic.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace retrolite {

using TokenId = uint32_t;

struct TokenSequence {
    std::vector<TokenId> tokens;
    uint32_t doc_id = 0;
    uint64_t offset = 0;  // start of this sequence within the document, in tokens

    size_t size() const { return tokens.size(); }
};

struct Chunk {
    std::vector<TokenId> tokens;  // exactly chunk_len
    uint32_t doc_id = 0;
    uint64_t offset = 0;
};

// src/tgt pair; tgt is src shifted one token forward in the stream.
struct SequenceSample {
    TokenSequence src;
    TokenSequence tgt;
};

// NFC-compose (Latin/Greek/Cyrillic coverage), case-fold, collapse
// whitespace runs to single spaces, strip. Idempotent.
std::string normalize_text(const std::string& raw);

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual uint32_t vocab_size() const = 0;
    virtual std::vector<TokenId> encode(const std::string& text) const = 0;
    virtual std::string decode(const std::vector<TokenId>& tokens) const = 0;
    virtual std::string name() const = 0;
};

// vocab 256, token id == byte value; encode/decode are exact inverses.
class ByteTokenizer final : public Tokenizer {
public:
    uint32_t vocab_size() const override { return 256; }
    std::vector<TokenId> encode(const std::string& text) const override;
    std::string decode(const std::vector<TokenId>& tokens) const override;
    std::string name() const override { return "byte"; }
};

std::unique_ptr<Tokenizer> make_tokenizer(const std::string& name);

// Requires len(seq) % chunk_len == 0; chunks carry provenance offsets.
std::vector<Chunk> split_into_chunks(const TokenSequence& seq, size_t chunk_len);

struct SampleSet {
    std::vector<SequenceSample> samples;
    bool stream_too_short = false;
};

// Non-overlapping windows stepping by seq_len; window i is emitted iff
// i + seq_len + 1 <= len(stream). Trailing remainder is dropped.
SampleSet make_samples(const TokenSequence& stream, size_t seq_len);

enum class DocMode { FilePerDoc, LinePerDoc };
enum class DocSeparator { None, Newline };

struct Corpus {
    std::vector<TokenSequence> documents;  // doc_id == index
    uint32_t vocab_size = 0;

    // documents concatenated in order, with the configured separator between them
    TokenSequence concat_stream(DocSeparator sep) const;
    uint64_t total_tokens() const;
};

// Reads every regular file under `dir` (sorted by name), normalizes and
// tokenizes each document.
Corpus load_corpus_dir(const std::string& dir, const Tokenizer& tok, DocMode mode);
Corpus corpus_from_texts(const std::vector<std::string>& texts, const Tokenizer& tok);

// Token stream file: 16-byte header (magic, version, vocab_size, count)
// then count little-endian u32 tokens.
void save_token_stream(const std::string& path, const TokenSequence& seq, uint32_t vocab_size);
TokenSequence load_token_stream(const std::string& path, uint32_t* vocab_size_out = nullptr);

}  // namespace retrolite

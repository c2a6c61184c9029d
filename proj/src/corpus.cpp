#include "retrolite/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "retrolite/common.hpp"

namespace retrolite {

namespace {

struct CompositionEntry {
    uint32_t base, mark, composed;
};
struct FoldEntry {
    uint32_t upper, lower;
};

#include "unicode_tables.inc"

uint32_t compose_pair(uint32_t base, uint32_t mark) {
    for (const auto& e : kCompositions)
        if (e.base == base && e.mark == mark) return e.composed;
    return 0;
}

uint32_t fold_case(uint32_t cp) {
    if (cp >= 'A' && cp <= 'Z') return cp + 32;
    if (cp < 0x80) return cp;
    for (const auto& e : kCaseFolds)
        if (e.upper == cp) return e.lower;
    return cp;
}

bool is_space_cp(uint32_t cp) {
    switch (cp) {
        case 0x09: case 0x0a: case 0x0b: case 0x0c: case 0x0d: case 0x20:
        case 0x85: case 0xa0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202f: case 0x205f: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200a;
    }
}

bool is_combining_mark(uint32_t cp) { return cp >= 0x0300 && cp <= 0x036f; }

// Decodes one UTF-8 codepoint; invalid bytes become U+FFFD and advance by one.
uint32_t decode_utf8(const std::string& s, size_t& i) {
    const auto b = [&](size_t k) { return uint8_t(s[i + k]); };
    uint8_t c = b(0);
    if (c < 0x80) {
        i += 1;
        return c;
    }
    auto cont = [&](size_t k) { return i + k < s.size() && (b(k) & 0xc0) == 0x80; };
    if ((c & 0xe0) == 0xc0 && cont(1)) {
        uint32_t cp = (uint32_t(c & 0x1f) << 6) | (b(1) & 0x3f);
        i += 2;
        return cp >= 0x80 ? cp : 0xfffd;
    }
    if ((c & 0xf0) == 0xe0 && cont(1) && cont(2)) {
        uint32_t cp = (uint32_t(c & 0x0f) << 12) | (uint32_t(b(1) & 0x3f) << 6) | (b(2) & 0x3f);
        i += 3;
        return (cp >= 0x800 && !(cp >= 0xd800 && cp <= 0xdfff)) ? cp : 0xfffd;
    }
    if ((c & 0xf8) == 0xf0 && cont(1) && cont(2) && cont(3)) {
        uint32_t cp = (uint32_t(c & 0x07) << 18) | (uint32_t(b(1) & 0x3f) << 12) |
                      (uint32_t(b(2) & 0x3f) << 6) | (b(3) & 0x3f);
        i += 4;
        return (cp >= 0x10000 && cp <= 0x10ffff) ? cp : 0xfffd;
    }
    i += 1;
    return 0xfffd;
}

void encode_utf8(uint32_t cp, std::string& out) {
    if (cp < 0x80) {
        out.push_back(char(cp));
    } else if (cp < 0x800) {
        out.push_back(char(0xc0 | (cp >> 6)));
        out.push_back(char(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        out.push_back(char(0xe0 | (cp >> 12)));
        out.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(char(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(char(0xf0 | (cp >> 18)));
        out.push_back(char(0x80 | ((cp >> 12) & 0x3f)));
        out.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(char(0x80 | (cp & 0x3f)));
    }
}

}  // namespace

std::string normalize_text(const std::string& raw) {
    // pass 1: decode, compose base+mark pairs, fold case
    std::vector<uint32_t> cps;
    cps.reserve(raw.size());
    size_t i = 0;
    while (i < raw.size()) {
        uint32_t cp = decode_utf8(raw, i);
        if (is_combining_mark(cp) && !cps.empty()) {
            if (uint32_t composed = compose_pair(cps.back(), cp)) {
                cps.back() = composed;
                continue;
            }
        }
        cps.push_back(cp);
    }
    for (auto& cp : cps) cp = fold_case(cp);

    // pass 2: collapse whitespace runs to single spaces, strip ends
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (uint32_t cp : cps) {
        if (is_space_cp(cp)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        encode_utf8(cp, out);
    }
    return out;
}

std::vector<TokenId> ByteTokenizer::encode(const std::string& text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(c);
    return out;
}

std::string ByteTokenizer::decode(const std::vector<TokenId>& tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= 256) fail("invalid byte token id ", tokens[i], " at position ", i);
        out.push_back(char(uint8_t(tokens[i])));
    }
    return out;
}

std::unique_ptr<Tokenizer> make_tokenizer(const std::string& name) {
    if (name == "byte") return std::make_unique<ByteTokenizer>();
    fail("unknown tokenizer: ", name);
}

std::vector<Chunk> split_into_chunks(const TokenSequence& seq, size_t chunk_len) {
    if (chunk_len == 0) fail("chunk_len must be positive");
    if (seq.size() % chunk_len != 0)
        fail("sequence length ", seq.size(), " is not a multiple of chunk_len ", chunk_len);
    std::vector<Chunk> chunks;
    chunks.reserve(seq.size() / chunk_len);
    for (size_t p = 0; p < seq.size(); p += chunk_len) {
        Chunk c;
        c.tokens.assign(seq.tokens.begin() + long(p), seq.tokens.begin() + long(p + chunk_len));
        c.doc_id = seq.doc_id;
        c.offset = seq.offset + p;
        chunks.push_back(std::move(c));
    }
    return chunks;
}

SampleSet make_samples(const TokenSequence& stream, size_t seq_len) {
    SampleSet out;
    if (seq_len == 0) fail("seq_len must be positive");
    if (stream.size() < seq_len + 1) {
        out.stream_too_short = true;
        return out;
    }
    for (size_t i = 0; i + seq_len + 1 <= stream.size(); i += seq_len) {
        SequenceSample s;
        s.src.tokens.assign(stream.tokens.begin() + long(i), stream.tokens.begin() + long(i + seq_len));
        s.src.doc_id = stream.doc_id;
        s.src.offset = stream.offset + i;
        s.tgt.tokens.assign(stream.tokens.begin() + long(i + 1),
                            stream.tokens.begin() + long(i + 1 + seq_len));
        s.tgt.doc_id = stream.doc_id;
        s.tgt.offset = stream.offset + i + 1;
        out.samples.push_back(std::move(s));
    }
    return out;
}

TokenSequence Corpus::concat_stream(DocSeparator sep) const {
    TokenSequence out;
    for (const auto& doc : documents) {
        if (sep == DocSeparator::Newline && !out.tokens.empty()) out.tokens.push_back('\n');
        out.tokens.insert(out.tokens.end(), doc.tokens.begin(), doc.tokens.end());
    }
    return out;
}

uint64_t Corpus::total_tokens() const {
    uint64_t n = 0;
    for (const auto& d : documents) n += d.size();
    return n;
}

Corpus corpus_from_texts(const std::vector<std::string>& texts, const Tokenizer& tok) {
    Corpus c;
    c.vocab_size = tok.vocab_size();
    for (const auto& t : texts) {
        TokenSequence seq;
        seq.tokens = tok.encode(normalize_text(t));
        seq.doc_id = uint32_t(c.documents.size());
        c.documents.push_back(std::move(seq));
    }
    return c;
}

Corpus load_corpus_dir(const std::string& dir, const Tokenizer& tok, DocMode mode) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) fail("corpus directory not found: ", dir);
    std::vector<std::string> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) fail("corpus directory is empty: ", dir);

    std::vector<std::string> texts;
    for (const auto& p : paths) {
        std::ifstream is(p, std::ios::binary);
        if (!is) fail("cannot read corpus file: ", p);
        std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        if (mode == DocMode::FilePerDoc) {
            texts.push_back(std::move(content));
        } else {
            size_t start = 0;
            while (start <= content.size()) {
                size_t nl = content.find('\n', start);
                std::string line = content.substr(start, nl == std::string::npos ? nl : nl - start);
                if (!line.empty()) texts.push_back(std::move(line));
                if (nl == std::string::npos) break;
                start = nl + 1;
            }
        }
    }
    return corpus_from_texts(texts, tok);
}

namespace {
constexpr uint32_t kStreamMagic = 0x4b544c52;  // "RLTK"
constexpr uint32_t kStreamVersion = 1;
}  // namespace

void save_token_stream(const std::string& path, const TokenSequence& seq, uint32_t vocab_size) {
    BinaryWriter w(path);
    w.u32(kStreamMagic);
    w.u32(kStreamVersion);
    w.u32(vocab_size);
    w.u32(uint32_t(seq.size()));
    w.u32_array(seq.tokens.data(), seq.size());
    w.close();
}

TokenSequence load_token_stream(const std::string& path, uint32_t* vocab_size_out) {
    BinaryReader r(path);
    if (r.u32() != kStreamMagic) fail("bad token stream magic: ", path);
    if (r.u32() != kStreamVersion) fail("unsupported token stream version: ", path);
    uint32_t vocab = r.u32();
    uint32_t count = r.u32();
    TokenSequence seq;
    seq.tokens.resize(count);
    r.u32_array(seq.tokens.data(), count);
    for (size_t i = 0; i < seq.tokens.size(); ++i)
        if (seq.tokens[i] >= vocab) fail("token id ", seq.tokens[i], " out of range at position ", i);
    if (vocab_size_out) *vocab_size_out = vocab;
    return seq;
}

}  // namespace retrolite

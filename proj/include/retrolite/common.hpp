#pragma once

// Shared plumbing: deterministic RNG, hashing, checksums, little-endian
// binary I/O. Everything here is bit-reproducible across runs; the RNG
// transforms avoid std::*_distribution on purpose (their output is
// implementation-defined, mt19937_64 itself is not).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace retrolite {

template <typename... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw std::runtime_error(concat(std::forward<Args>(args)...));
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent stream derivation: mixing the ids keeps streams decorrelated
// for any (seed, stream) combination.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // 53-bit uniform in [0, 1)
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller, no cached spare: one value per two uniform draws.
    double gauss() {
        double u1 = uniform01();
        double u2 = uniform01();
        // u1 == 0 would take log(0); nudge to the smallest representable draw
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // uniform integer in [0, n)
    uint64_t next_range(uint64_t n) {
        // rejection sampling keeps this exactly uniform
        const uint64_t limit = n * (UINT64_MAX / n);
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v / (UINT64_MAX / n);
    }

private:
    std::mt19937_64 gen_;
};

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint32_t crc32(const void* data, size_t n, uint32_t seed = 0);

// ---------------------------------------------------------------------
// Little-endian binary file I/O
// ---------------------------------------------------------------------

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), os_(path, std::ios::binary) {
        if (!os_) fail("cannot open for writing: ", path);
    }

    void u8(uint8_t v) { put(&v, 1); }
    void u32(uint32_t v) {
        uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
        put(b, 4);
    }
    void u64(uint64_t v) {
        u32(uint32_t(v));
        u32(uint32_t(v >> 32));
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(std::string_view s) {
        u32(uint32_t(s.size()));
        put(s.data(), s.size());
    }
    void bytes(const void* p, size_t n) { put(p, n); }

    void u32_array(const uint32_t* p, size_t n) {
        for (size_t i = 0; i < n; ++i) u32(p[i]);
    }
    void f32_array(const float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) f32(p[i]);
    }

    void close() {
        os_.close();
        if (!os_) fail("write failed: ", path_);
    }

private:
    void put(const void* p, size_t n) {
        os_.write(static_cast<const char*>(p), std::streamsize(n));
        if (!os_) fail("write failed: ", path_);
    }
    std::string path_;
    std::ofstream os_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), is_(path, std::ios::binary) {
        if (!is_) fail("cannot open for reading: ", path);
    }

    uint8_t u8() {
        uint8_t v;
        get(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint8_t b[4];
        get(b, 4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    }
    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | hi << 32;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        std::string s(n, '\0');
        get(s.data(), n);
        return s;
    }
    void bytes(void* p, size_t n) { get(p, n); }

    void u32_array(uint32_t* p, size_t n) {
        for (size_t i = 0; i < n; ++i) p[i] = u32();
    }
    void f32_array(float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) p[i] = f32();
    }

    bool at_eof() {
        is_.peek();
        return is_.eof();
    }

private:
    void get(void* p, size_t n) {
        is_.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(is_.gcount()) != n) fail("truncated file: ", path_);
    }
    std::string path_;
    std::ifstream is_;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
uint32_t file_crc32(const std::string& path);

}  // namespace retrolite

#include "retrolite/common.hpp"

namespace retrolite {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        t[i] = c;
    }
    return t;
}

}  // namespace

uint32_t crc32(const void* data, size_t n, uint32_t seed) {
    static const std::array<uint32_t, 256> table = make_crc_table();
    uint32_t c = seed ^ 0xffffffffu;
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open for reading: ", path);
    std::vector<uint8_t> out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return out;
}

uint32_t file_crc32(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return crc32(bytes.data(), bytes.size());
}

}  // namespace retrolite

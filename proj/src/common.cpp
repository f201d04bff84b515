#include "mvrefine/common.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

namespace mvr {

uint64_t fnv1a64(const void* data, size_t size, uint64_t state) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < size; ++i) {
        state ^= bytes[i];
        state *= 0x100000001b3ull;
    }
    return state;
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open file for hashing: " + path);
    uint64_t state = 0xcbf29ce484222325ull;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        state = fnv1a64(buf.data(), static_cast<size_t>(in.gcount()), state);
    }
    return state;
}

std::string hex64(uint64_t value) {
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(value));
    return out;
}

std::string hash_hex(const std::string& text) {
    return hex64(fnv1a64(text.data(), text.size()));
}

}  // namespace mvr

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace salab {

// FNV-1a 64-bit, hex-encoded. Content pinning for manifests and corpora.
inline uint64_t fnv1a64(const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string fnv1a64_hex(const void* data, size_t n);
std::string fnv1a64_hex(const std::string& s);
std::string file_digest_hex(const std::string& path); // throws on unreadable file

} // namespace salab

#pragma once

// Content digests (SHA-256 via OpenSSL) and seed derivation for the
// deterministic samplers.

#include <openssl/evp.h>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

#include "selfexplain/error.hpp"

namespace selfexplain {

inline std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    bool ok = ctx != nullptr &&
              EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
              EVP_DigestUpdate(ctx, data.data(), data.size()) == 1 &&
              EVP_DigestFinal_ex(ctx, digest, &digest_len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw Error(ErrorKind::internal, "sha256 digest failed");

    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(digest_len * 2, '0');
    for (unsigned int i = 0; i < digest_len; ++i) {
        out[2 * i] = kHex[digest[i] >> 4];
        out[2 * i + 1] = kHex[digest[i] & 0xf];
    }
    return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derives an independent RNG stream from a base seed and a list of string
// tags (e.g. {"wrong-label", instance_id}). Same inputs, same stream.
inline std::uint64_t stream_seed(std::uint64_t base,
                                 std::initializer_list<std::string_view> tags) {
    std::uint64_t h = base;
    for (std::string_view tag : tags) h = splitmix64(h ^ fnv1a64(tag));
    return splitmix64(h);
}

} // namespace selfexplain

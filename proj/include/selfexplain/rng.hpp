#pragma once

// Seeded randomness helpers. mt19937_64 output is fully specified by the
// standard, but std::uniform_int_distribution is implementation-defined, so
// the draws here are hand-rolled to keep sampled outputs identical across
// platforms and standard libraries.

#include <cstdint>
#include <random>
#include <vector>

namespace selfexplain {

class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 engine_;
};

// k distinct indices drawn uniformly from [0, n), in sampled order.
// Partial Fisher-Yates over an index array.
inline std::vector<std::size_t> sample_indices_without_replacement(
    std::size_t n, std::size_t k, SeededRng& rng) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k && i < n; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

} // namespace selfexplain

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <utility>

namespace maninex {

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator: output k is mix64(key + k * golden). Children are
// derived by keying on a tag, so (seed, epoch, ordinal) addresses a stream
// directly and batches can be generated in any order with identical results.
//
// All derived draws (uniform reals, bounded integers, normals) are computed
// here rather than through <random> distributions, whose algorithms are
// implementation-defined.
class SamplerRng {
public:
    using result_type = std::uint64_t;
    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    explicit SamplerRng(std::uint64_t seed = 0) noexcept : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

    SamplerRng split(std::uint64_t tag) const noexcept {
        SamplerRng child;
        child.key_ = mix64(key_ ^ mix64(tag + 0x9e3779b97f4a7c15ULL));
        return child;
    }
    SamplerRng split(std::uint64_t a, std::uint64_t b) const noexcept { return split(a).split(b); }

    result_type operator()() noexcept { return mix64(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), unbiased (Lemire's multiply-shift with rejection).
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>((*this)()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Standard normal via Box-Muller; one draw per call.
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    template <class T>
    void shuffle(std::span<T> xs) noexcept {
        for (std::size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[below(i)]);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace maninex

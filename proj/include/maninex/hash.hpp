#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <string_view>

#include "maninex/errors.hpp"

namespace maninex {

// FNV-1a, 64 bit. Used for schema fingerprints, artifact hashes and
// parameter hashes; stable across platforms.
class Fnv1a64 {
public:
    static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
    static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

    Fnv1a64& update(std::span<const std::byte> bytes) noexcept {
        for (std::byte b : bytes) {
            state_ ^= static_cast<std::uint64_t>(b);
            state_ *= kPrime;
        }
        return *this;
    }
    Fnv1a64& update(std::string_view s) noexcept {
        return update(std::as_bytes(std::span<const char>(s.data(), s.size())));
    }
    template <class T>
    Fnv1a64& update_pod(const T& v) noexcept {
        return update(std::as_bytes(std::span<const T, 1>(&v, 1)));
    }
    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = kOffset;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    Fnv1a64 h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        auto got = static_cast<std::size_t>(in.gcount());
        h.update(std::as_bytes(std::span<const char>(buf, got)));
    }
    return h.digest();
}

}  // namespace maninex

#pragma once
// Precomputed per-anchor distance buckets over a manifestation dataset.
//
// For anchor a, the other N-1 instance positions are stored contiguously,
// sorted by (distance, position). A per-anchor offset table with one entry
// per distance 0..n_bits (plus an end sentinel) turns candidates_at(a, d)
// into a constant-time span lookup.
//
// On-disk format (all integers little-endian):
//   char[4]  magic "MNIX"
//   u16      format version (kFormatVersion)
//   u16      n_bits
//   u32      N
//   u64      schema fingerprint
//   u32      d_max_observed
//   u32      offsets[N][n_bits + 2]
//   u32      ids[N][N - 1]

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "maninex/errors.hpp"
#include "maninex/manifest.hpp"

namespace maninex {

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
    std::array<char, sizeof(T)> buf;
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    out.write(buf.data(), buf.size());
}

template <class T>
T get_le(std::istream& in) {
    std::array<unsigned char, sizeof(T)> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw ParseError("index file truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

inline void get_le_array(std::istream& in, std::vector<std::uint32_t>& out, std::size_t count) {
    out.resize(count);
    std::vector<unsigned char> buf(count * 4);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw ParseError("index file truncated");
    for (std::size_t i = 0; i < count; ++i)
        out[i] = static_cast<std::uint32_t>(buf[4 * i]) | (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                 (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) | (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
}

inline void put_le_array(std::ostream& out, const std::vector<std::uint32_t>& v) {
    std::vector<char> buf(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t k = 0; k < 4; ++k) buf[4 * i + k] = static_cast<char>((v[i] >> (8 * k)) & 0xFF);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace detail

class HammingIndex {
public:
    static constexpr std::uint16_t kFormatVersion = 1;
    static constexpr std::array<char, 4> kMagic{'M', 'N', 'I', 'X'};

    HammingIndex() = default;

    // Anchors are independent; `threads` > 1 splits them into contiguous
    // blocks. The result does not depend on the thread count.
    static HammingIndex build(const ManifestDataset& ds, unsigned threads = 1) {
        if (ds.empty()) throw InvalidArgument("build_index: dataset is empty");
        if (ds.size() > 0xFFFFFFFEULL) throw InvalidArgument("build_index: dataset too large");
        if (ds.schema().size() > 0xFFFFU) throw InvalidArgument("build_index: schema too wide");

        HammingIndex idx;
        idx.n_ = static_cast<std::uint32_t>(ds.size());
        idx.n_bits_ = static_cast<std::uint16_t>(ds.schema().size());
        idx.schema_fingerprint_ = ds.schema().fingerprint();
        const std::size_t row = idx.row_len();
        const std::size_t stride = idx.offset_stride();
        idx.offsets_.assign(std::size_t{idx.n_} * stride, 0);
        idx.ids_.assign(std::size_t{idx.n_} * row, 0);

        std::vector<std::uint32_t> row_max(idx.n_, 0);
        auto fill = [&](std::uint32_t begin, std::uint32_t end) {
            std::vector<std::uint16_t> dist(idx.n_);
            std::vector<std::uint32_t> count(stride, 0);
            for (std::uint32_t a = begin; a < end; ++a) {
                std::fill(count.begin(), count.end(), 0);
                for (std::uint32_t j = 0; j < idx.n_; ++j) {
                    if (j == a) continue;
                    dist[j] = static_cast<std::uint16_t>(hamming(ds[a], ds[j]));
                    ++count[dist[j] + 1];
                    row_max[a] = std::max<std::uint32_t>(row_max[a], dist[j]);
                }
                // exclusive prefix sum -> bucket starts
                std::uint32_t* off = idx.offsets_.data() + std::size_t{a} * stride;
                for (std::size_t d = 1; d < stride; ++d) count[d] += count[d - 1];
                std::copy(count.begin(), count.end(), off);
                std::uint32_t* ids = idx.ids_.data() + std::size_t{a} * row;
                for (std::uint32_t j = 0; j < idx.n_; ++j) {
                    if (j == a) continue;
                    ids[count[dist[j]]++] = j;
                }
            }
        };

        threads = std::max(1U, std::min<unsigned>(threads, idx.n_));
        if (threads == 1) {
            fill(0, idx.n_);
        } else {
            std::vector<std::thread> pool;
            const std::uint32_t chunk = (idx.n_ + threads - 1) / threads;
            for (unsigned t = 0; t < threads; ++t) {
                const std::uint32_t b = std::min(idx.n_, t * chunk);
                const std::uint32_t e = std::min(idx.n_, b + chunk);
                if (b < e) pool.emplace_back(fill, b, e);
            }
            for (auto& th : pool) th.join();
        }
        idx.d_max_observed_ = idx.n_ > 1 ? *std::max_element(row_max.begin(), row_max.end()) : 0;
        return idx;
    }

    std::size_t size() const noexcept { return n_; }
    std::size_t n_bits() const noexcept { return n_bits_; }
    std::uint32_t d_max_observed() const noexcept { return d_max_observed_; }
    std::uint64_t schema_fingerprint() const noexcept { return schema_fingerprint_; }

    std::span<const std::uint32_t> candidates_at(std::size_t anchor, long d) const {
        if (anchor >= n_) throw UnknownAnchor("anchor " + std::to_string(anchor) + " not in index of size " +
                                              std::to_string(n_));
        if (d < 0) throw InvalidArgument("candidates_at: negative distance");
        if (static_cast<std::size_t>(d) > n_bits_) return {};
        const std::uint32_t* off = offsets_.data() + anchor * offset_stride();
        const std::uint32_t* ids = ids_.data() + anchor * row_len();
        return {ids + off[d], ids + off[d + 1]};
    }

    std::size_t bucket_size(std::size_t anchor, long d) const { return candidates_at(anchor, d).size(); }

    // All other instances of `anchor`, sorted by (distance, position).
    std::span<const std::uint32_t> row(std::size_t anchor) const {
        if (anchor >= n_) throw UnknownAnchor("anchor " + std::to_string(anchor) + " not in index");
        return {ids_.data() + anchor * row_len(), row_len()};
    }

    // Throws unless the index was built over a dataset of this size and schema.
    void check_compatible(const ManifestDataset& ds) const {
        if (ds.size() != n_)
            throw SchemaError("index covers " + std::to_string(n_) + " instances, dataset has " +
                              std::to_string(ds.size()));
        if (ds.schema().fingerprint() != schema_fingerprint_)
            throw SchemaError("index was built with a different manifestation schema");
    }

    void write(std::ostream& out) const {
        out.write(kMagic.data(), kMagic.size());
        detail::put_le<std::uint16_t>(out, kFormatVersion);
        detail::put_le<std::uint16_t>(out, n_bits_);
        detail::put_le<std::uint32_t>(out, n_);
        detail::put_le<std::uint64_t>(out, schema_fingerprint_);
        detail::put_le<std::uint32_t>(out, d_max_observed_);
        detail::put_le_array(out, offsets_);
        detail::put_le_array(out, ids_);
    }

    static HammingIndex read(std::istream& in) {
        std::array<char, 4> magic{};
        in.read(magic.data(), magic.size());
        if (in.gcount() != 4 || magic != kMagic) throw ParseError("not a Hamming index file (bad magic)");
        const auto version = detail::get_le<std::uint16_t>(in);
        if (version != kFormatVersion)
            throw VersionMismatch("index format version " + std::to_string(version) + ", expected " +
                                  std::to_string(kFormatVersion));
        HammingIndex idx;
        idx.n_bits_ = detail::get_le<std::uint16_t>(in);
        idx.n_ = detail::get_le<std::uint32_t>(in);
        idx.schema_fingerprint_ = detail::get_le<std::uint64_t>(in);
        idx.d_max_observed_ = detail::get_le<std::uint32_t>(in);
        if (idx.n_ == 0) throw ParseError("index file declares zero instances");
        detail::get_le_array(in, idx.offsets_, std::size_t{idx.n_} * idx.offset_stride());
        detail::get_le_array(in, idx.ids_, std::size_t{idx.n_} * idx.row_len());
        if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after index payload");
        idx.validate();
        return idx;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write index file " + path.string());
        write(out);
        if (!out) throw IoError("write failed for " + path.string());
    }

    static HammingIndex load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open index file " + path.string());
        return read(in);
    }

    bool operator==(const HammingIndex&) const = default;

private:
    std::size_t row_len() const noexcept { return n_ == 0 ? 0 : n_ - 1; }
    std::size_t offset_stride() const noexcept { return std::size_t{n_bits_} + 2; }

    void validate() const {
        const std::size_t stride = offset_stride();
        std::uint32_t seen_max = 0;
        for (std::size_t a = 0; a < n_; ++a) {
            const std::uint32_t* off = offsets_.data() + a * stride;
            if (off[0] != 0 || off[stride - 1] != row_len()) throw ParseError("corrupt index offset table");
            for (std::size_t d = 1; d < stride; ++d) {
                if (off[d] < off[d - 1]) throw ParseError("corrupt index offset table");
                if (off[d] > off[d - 1]) seen_max = std::max<std::uint32_t>(seen_max, static_cast<std::uint32_t>(d - 1));
            }
            const std::uint32_t* ids = ids_.data() + a * row_len();
            for (std::size_t k = 0; k < row_len(); ++k)
                if (ids[k] >= n_ || ids[k] == a) throw ParseError("corrupt index id array");
        }
        if (seen_max != d_max_observed_) throw ParseError("index d_max_observed disagrees with payload");
    }

    std::uint32_t n_ = 0;
    std::uint16_t n_bits_ = 0;
    std::uint64_t schema_fingerprint_ = 0;
    std::uint32_t d_max_observed_ = 0;
    std::vector<std::uint32_t> offsets_;
    std::vector<std::uint32_t> ids_;
};

inline HammingIndex build_index(const ManifestDataset& ds, unsigned threads = 1) {
    return HammingIndex::build(ds, threads);
}

inline std::span<const std::uint32_t> candidates_at(const HammingIndex& idx, std::size_t anchor, long d) {
    return idx.candidates_at(anchor, d);
}

inline void save_index(const HammingIndex& idx, const std::filesystem::path& path) { idx.save(path); }
inline HammingIndex load_index(const std::filesystem::path& path) { return HammingIndex::load(path); }

}  // namespace maninex

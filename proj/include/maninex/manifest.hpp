#pragma once
// Manifestation schema, packed binary trait vectors, Hamming distance and
// dataset ingestion (CSV / JSON).
//
// Bit layout is frozen: groups in schema order, options in listed order,
// cumulative offsets. For the default mammography schema the group offsets
// are 0,4,8,11,14,17,20,23,26 (35 bits total). Persisted indexes carry a
// schema fingerprint so a layout change is detected on load.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maninex/errors.hpp"
#include "maninex/hash.hpp"

namespace maninex {

struct TraitGroup {
    std::string name;
    std::vector<std::string> options;
    bool exclusive = true;

    bool operator==(const TraitGroup&) const = default;
};

class ManifestationSchema {
public:
    ManifestationSchema() = default;

    explicit ManifestationSchema(std::vector<TraitGroup> groups) : groups_(std::move(groups)) {
        std::set<std::string> seen_groups;
        offsets_.reserve(groups_.size());
        for (const auto& g : groups_) {
            if (g.name.empty()) throw SchemaError("schema group with empty name");
            if (g.options.empty()) throw SchemaError("schema group '" + g.name + "' has no options");
            if (!seen_groups.insert(g.name).second)
                throw SchemaError("duplicate schema group '" + g.name + "'");
            std::set<std::string> seen_opts;
            for (const auto& o : g.options) {
                if (!seen_opts.insert(o).second)
                    throw SchemaError("duplicate option '" + o + "' in group '" + g.name + "'");
                if (o.find(',') != std::string::npos || o.find(':') != std::string::npos)
                    throw SchemaError("option names may not contain ',' or ':' ('" + o + "')");
            }
            offsets_.push_back(n_bits_);
            n_bits_ += g.options.size();
        }
    }

    // Mammography lesion traits: four mass traits, four calcification traits
    // and nine independent miscellaneous signs.
    static const ManifestationSchema& mammography() {
        static const ManifestationSchema schema({
            {"mass shape", {"irregular", "lobulated", "ovoid", "round"}, true},
            {"mass edge", {"microlobulated", "obscured", "spiculated", "well-circumscribed"}, true},
            {"mass density", {"low", "median", "high"}, true},
            {"mass size", {"<=2cm", "2-5cm", ">5cm"}, true},
            {"calcification shape",
             {"branching", "crescentic/annular/gritty/thread-like",
              "granular/popcorn-like/large rod-like/eggshell-like"},
             true},
            {"calcification size", {"coarse", "tiny", "uneven"}, true},
            {"calcification density", {"low", "high", "uneven"}, true},
            {"calcification distribution", {"scattered", "clustered", "linear/segmental"}, true},
            {"miscellaneous",
             {"architectural distortion", "focal asymmetrical density", "duct sign", "comet tail sign",
              "halo sign", "focal skin thickening/retraction", "nipple retraction",
              "abnormal blood vessel shadow", "abnormal lymph node shadow"},
             false},
        });
        return schema;
    }

    // n unconstrained traits named t0..t{n-1}; used for synthetic populations.
    static ManifestationSchema independent(std::size_t n_bits) {
        if (n_bits == 0) throw SchemaError("independent schema needs at least one trait");
        TraitGroup g{"traits", {}, false};
        for (std::size_t i = 0; i < n_bits; ++i) g.options.push_back("t" + std::to_string(i));
        return ManifestationSchema({std::move(g)});
    }

    std::span<const TraitGroup> groups() const noexcept { return groups_; }
    std::size_t n_groups() const noexcept { return groups_.size(); }
    std::size_t size() const noexcept { return n_bits_; }
    std::size_t offset(std::size_t group) const { return offsets_.at(group); }

    std::optional<std::size_t> group_index(std::string_view name) const {
        for (std::size_t g = 0; g < groups_.size(); ++g)
            if (groups_[g].name == name) return g;
        return std::nullopt;
    }

    std::optional<std::size_t> position(std::string_view group, std::string_view option) const {
        auto g = group_index(group);
        if (!g) return std::nullopt;
        const auto& opts = groups_[*g].options;
        auto it = std::find(opts.begin(), opts.end(), option);
        if (it == opts.end()) return std::nullopt;
        return offsets_[*g] + static_cast<std::size_t>(it - opts.begin());
    }

    // Group owning bit `pos`.
    std::size_t group_of(std::size_t pos) const {
        auto it = std::upper_bound(offsets_.begin(), offsets_.end(), pos);
        return static_cast<std::size_t>(it - offsets_.begin()) - 1;
    }

    // CSV column name of every bit, "group:option".
    std::vector<std::string> column_names() const {
        std::vector<std::string> out;
        out.reserve(n_bits_);
        for (const auto& g : groups_)
            for (const auto& o : g.options) out.push_back(g.name + ":" + o);
        return out;
    }

    std::uint64_t fingerprint() const {
        Fnv1a64 h;
        for (const auto& g : groups_) {
            h.update(g.name).update(std::string_view("\x1f", 1));
            for (const auto& o : g.options) h.update(o).update(std::string_view("\x1e", 1));
            h.update(g.exclusive ? std::string_view("E") : std::string_view("I"));
        }
        return h.digest();
    }

    nlohmann::json to_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& g : groups_)
            arr.push_back({{"name", g.name}, {"options", g.options}, {"exclusive", g.exclusive}});
        return arr;
    }

    static ManifestationSchema from_json(const nlohmann::json& j) {
        if (!j.is_array()) throw SchemaError("schema JSON must be a list of groups");
        std::vector<TraitGroup> groups;
        try {
            for (const auto& e : j) {
                TraitGroup g;
                g.name = e.at("name").get<std::string>();
                g.options = e.at("options").get<std::vector<std::string>>();
                g.exclusive = e.value("exclusive", true);
                groups.push_back(std::move(g));
            }
        } catch (const nlohmann::json::exception& ex) {
            throw SchemaError(std::string("malformed schema entry: ") + ex.what());
        }
        return ManifestationSchema(std::move(groups));
    }

    bool operator==(const ManifestationSchema& o) const { return groups_ == o.groups_; }

private:
    std::vector<TraitGroup> groups_;
    std::vector<std::size_t> offsets_;
    std::size_t n_bits_ = 0;
};

inline ManifestationSchema load_schema(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open schema file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError("schema file " + path.string() + ": " + ex.what());
    }
    return ManifestationSchema::from_json(j);
}

// Fixed-length binary trait vector packed into 64-bit words. Unused high bits
// of the last word are always zero.
class Manifestation {
public:
    Manifestation() = default;
    explicit Manifestation(std::size_t n_bits, std::string id = {})
        : words_((n_bits + 63) / 64, 0), n_bits_(n_bits), id_(std::move(id)) {}

    static Manifestation from_bits(std::span<const std::uint8_t> bits, std::string id = {}) {
        Manifestation m(bits.size(), std::move(id));
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) m.set(i);
        return m;
    }

    std::size_t size() const noexcept { return n_bits_; }
    const std::string& id() const noexcept { return id_; }
    std::span<const std::uint64_t> words() const noexcept { return words_; }

    bool test(std::size_t i) const { return (words_.at(i / 64) >> (i % 64)) & 1U; }
    void set(std::size_t i, bool value = true) {
        if (i >= n_bits_) throw std::out_of_range("manifestation bit index out of range");
        const auto mask = std::uint64_t{1} << (i % 64);
        if (value)
            words_[i / 64] |= mask;
        else
            words_[i / 64] &= ~mask;
    }

    std::size_t count() const noexcept {
        std::size_t c = 0;
        for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
        return c;
    }

    std::vector<std::uint8_t> bits() const {
        std::vector<std::uint8_t> out(n_bits_);
        for (std::size_t i = 0; i < n_bits_; ++i) out[i] = test(i) ? 1 : 0;
        return out;
    }

    std::string to_string() const {
        std::string s(n_bits_, '0');
        for (std::size_t i = 0; i < n_bits_; ++i)
            if (test(i)) s[i] = '1';
        return s;
    }

    bool same_bits(const Manifestation& o) const noexcept {
        return n_bits_ == o.n_bits_ && words_ == o.words_;
    }
    bool operator==(const Manifestation& o) const noexcept { return same_bits(o) && id_ == o.id_; }

private:
    std::vector<std::uint64_t> words_;
    std::size_t n_bits_ = 0;
    std::string id_;
};

inline std::size_t hamming(const Manifestation& a, const Manifestation& b) {
    if (a.size() != b.size())
        throw LengthMismatch("hamming: lengths " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    const auto wa = a.words();
    const auto wb = b.words();
    std::size_t d = 0;
    for (std::size_t i = 0; i < wa.size(); ++i) d += static_cast<std::size_t>(std::popcount(wa[i] ^ wb[i]));
    return d;
}

// Equal iff the bit vectors are identical; ids are ignored.
class DedupKey {
public:
    DedupKey() = default;
    explicit DedupKey(const Manifestation& m)
        : words_(m.words().begin(), m.words().end()), n_bits_(m.size()) {}

    bool operator==(const DedupKey&) const = default;
    auto operator<=>(const DedupKey&) const = default;

    std::size_t hash() const noexcept {
        Fnv1a64 h;
        h.update_pod(n_bits_);
        for (auto w : words_) h.update_pod(w);
        return static_cast<std::size_t>(h.digest());
    }

private:
    std::vector<std::uint64_t> words_;
    std::size_t n_bits_ = 0;
};

struct DedupKeyHash {
    std::size_t operator()(const DedupKey& k) const noexcept { return k.hash(); }
};

inline DedupKey dedup_key(const Manifestation& m) { return DedupKey(m); }

// Selected options per group name. Groups not present are empty.
using RawRecord = std::map<std::string, std::vector<std::string>>;

inline Manifestation encode_record(const RawRecord& raw, const ManifestationSchema& schema,
                                   std::string id = {}) {
    Manifestation m(schema.size(), std::move(id));
    for (const auto& [group, selected] : raw) {
        auto g = schema.group_index(group);
        if (!g) throw UnknownOption("unknown group '" + group + "'");
        const auto& tg = schema.groups()[*g];
        std::set<std::string> distinct(selected.begin(), selected.end());
        if (tg.exclusive && distinct.size() > 1)
            throw ExclusivityViolation("group '" + group + "' is exclusive but " +
                                       std::to_string(distinct.size()) + " options were selected");
        for (const auto& opt : distinct) {
            auto pos = schema.position(group, opt);
            if (!pos) throw UnknownOption("unknown option '" + opt + "' in group '" + group + "'");
            m.set(*pos);
        }
    }
    return m;
}

inline RawRecord decode_record(const Manifestation& m, const ManifestationSchema& schema) {
    if (m.size() != schema.size())
        throw LengthMismatch("manifestation has " + std::to_string(m.size()) + " bits, schema " +
                             std::to_string(schema.size()));
    RawRecord raw;
    for (std::size_t g = 0; g < schema.n_groups(); ++g) {
        const auto& tg = schema.groups()[g];
        for (std::size_t k = 0; k < tg.options.size(); ++k)
            if (m.test(schema.offset(g) + k)) raw[tg.name].push_back(tg.options[k]);
    }
    return raw;
}

// Name of the first exclusive group with more than one bit set, if any.
inline std::optional<std::string> exclusivity_violation(const Manifestation& m,
                                                        const ManifestationSchema& schema) {
    for (std::size_t g = 0; g < schema.n_groups(); ++g) {
        const auto& tg = schema.groups()[g];
        if (!tg.exclusive) continue;
        std::size_t set = 0;
        for (std::size_t k = 0; k < tg.options.size(); ++k) set += m.test(schema.offset(g) + k) ? 1 : 0;
        if (set > 1) return tg.name;
    }
    return std::nullopt;
}

class ManifestDataset {
public:
    ManifestDataset() = default;

    ManifestDataset(ManifestationSchema schema, std::vector<Manifestation> records,
                    std::optional<std::vector<std::uint8_t>> labels = std::nullopt)
        : schema_(std::move(schema)), records_(std::move(records)), labels_(std::move(labels)) {
        if (labels_ && labels_->size() != records_.size())
            throw SchemaError("label count " + std::to_string(labels_->size()) + " != record count " +
                              std::to_string(records_.size()));
        std::unordered_set<std::string> ids;
        for (std::size_t r = 0; r < records_.size(); ++r) {
            const auto& m = records_[r];
            if (m.size() != schema_.size())
                throw LengthMismatch("record " + std::to_string(r) + " has " + std::to_string(m.size()) +
                                     " bits, schema has " + std::to_string(schema_.size()));
            if (!ids.insert(m.id()).second) throw SchemaError("duplicate instance id '" + m.id() + "'");
            if (auto g = exclusivity_violation(m, schema_))
                throw ExclusivityViolation("record " + std::to_string(r) + " (id '" + m.id() +
                                           "'): more than one option set in exclusive group '" + *g + "'");
        }
        if (labels_)
            for (auto l : *labels_)
                if (l > 1) throw SchemaError("labels must be 0 or 1");
    }

    const ManifestationSchema& schema() const noexcept { return schema_; }
    std::span<const Manifestation> records() const noexcept { return records_; }
    const Manifestation& operator[](std::size_t i) const { return records_.at(i); }
    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    bool has_labels() const noexcept { return labels_.has_value(); }
    const std::optional<std::vector<std::uint8_t>>& labels() const noexcept { return labels_; }

    // Records at the given positions, in that order, with their labels.
    ManifestDataset subset(std::span<const std::size_t> positions) const {
        std::vector<Manifestation> recs;
        std::optional<std::vector<std::uint8_t>> labs;
        if (labels_) labs.emplace();
        recs.reserve(positions.size());
        for (auto p : positions) {
            recs.push_back(records_.at(p));
            if (labs) labs->push_back((*labels_)[p]);
        }
        return ManifestDataset(schema_, std::move(recs), std::move(labs));
    }

    bool operator==(const ManifestDataset&) const = default;

private:
    ManifestationSchema schema_;
    std::vector<Manifestation> records_;
    std::optional<std::vector<std::uint8_t>> labels_;
};

enum class DataFormat { csv, json };

inline DataFormat format_from_path(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".json" ? DataFormat::json : DataFormat::csv;
}

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, ',')) cells.push_back(trim(cur));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline std::uint8_t parse_bit(const std::string& cell, std::size_t row, const std::string& column) {
    if (cell == "0") return 0;
    if (cell == "1") return 1;
    throw ParseError("row " + std::to_string(row) + ", column '" + column + "': expected 0 or 1, got '" +
                     cell + "'");
}

inline ManifestDataset read_csv(std::istream& in, const ManifestationSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty CSV: missing header row");
    const auto header = split_csv_line(line);
    const auto expected = schema.column_names();

    std::optional<std::size_t> id_col, label_col;
    std::vector<std::size_t> bit_cols;
    std::vector<std::string> unknown;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == "id") {
            if (id_col) throw SchemaError("duplicate 'id' column");
            id_col = c;
        } else if (header[c] == "label") {
            if (label_col) throw SchemaError("duplicate 'label' column");
            label_col = c;
        } else {
            bit_cols.push_back(c);
        }
    }
    std::vector<std::string> got;
    for (auto c : bit_cols) got.push_back(header[c]);
    if (got != expected) {
        std::string msg = "CSV header does not match schema: expected " + std::to_string(expected.size()) +
                          " option columns in schema order, got " + std::to_string(got.size());
        for (std::size_t i = 0; i < std::min(got.size(), expected.size()); ++i)
            if (got[i] != expected[i]) {
                msg += " (first mismatch at option " + std::to_string(i) + ": '" + got[i] + "' vs '" +
                       expected[i] + "')";
                break;
            }
        throw SchemaError(msg);
    }

    std::vector<Manifestation> records;
    std::optional<std::vector<std::uint8_t>> labels;
    if (label_col) labels.emplace();
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                             " cells, got " + std::to_string(cells.size()));
        std::string id = id_col ? cells[*id_col] : std::to_string(row - 1);
        if (id.empty()) throw ParseError("row " + std::to_string(row) + ": empty id");
        Manifestation m(schema.size(), std::move(id));
        for (std::size_t b = 0; b < bit_cols.size(); ++b)
            if (parse_bit(cells[bit_cols[b]], row, header[bit_cols[b]])) m.set(b);
        if (auto g = exclusivity_violation(m, schema))
            throw ExclusivityViolation("row " + std::to_string(row) + " (id '" + m.id() +
                                       "'): more than one option set in exclusive group '" + *g + "'");
        if (labels) labels->push_back(parse_bit(cells[*label_col], row, "label"));
        records.push_back(std::move(m));
    }
    return ManifestDataset(schema, std::move(records), std::move(labels));
}

inline ManifestDataset read_json(std::istream& in, const ManifestationSchema& schema) {
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("malformed JSON: ") + ex.what());
    }
    if (!j.is_array()) throw SchemaError("dataset JSON must be an array of records");
    std::vector<Manifestation> records;
    std::optional<std::vector<std::uint8_t>> labels;
    for (std::size_t r = 0; r < j.size(); ++r) {
        const auto& e = j[r];
        const auto where = "record " + std::to_string(r + 1);
        if (!e.is_object() || !e.contains("bits")) throw SchemaError(where + ": missing 'bits'");
        const auto& bits = e["bits"];
        if (!bits.is_array() || bits.size() != schema.size())
            throw SchemaError(where + ": 'bits' must be a list of " + std::to_string(schema.size()) + " values");
        std::string id = std::to_string(r);
        if (e.contains("id")) id = e["id"].is_string() ? e["id"].get<std::string>() : e["id"].dump();
        Manifestation m(schema.size(), std::move(id));
        for (std::size_t b = 0; b < bits.size(); ++b) {
            if (!bits[b].is_number_integer() || (bits[b] != 0 && bits[b] != 1))
                throw ParseError(where + ": bit " + std::to_string(b) + " is not 0/1");
            if (bits[b] == 1) m.set(b);
        }
        if (auto g = exclusivity_violation(m, schema))
            throw ExclusivityViolation(where + " (id '" + m.id() +
                                       "'): more than one option set in exclusive group '" + *g + "'");
        const bool has_label = e.contains("label");
        if (r == 0 && has_label) labels.emplace();
        if (has_label != labels.has_value())
            throw SchemaError(where + ": 'label' must be present on every record or none");
        if (has_label) {
            const auto& l = e["label"];
            if (!l.is_number_integer() || (l != 0 && l != 1)) throw ParseError(where + ": label is not 0/1");
            labels->push_back(l.get<std::uint8_t>());
        }
        records.push_back(std::move(m));
    }
    return ManifestDataset(schema, std::move(records), std::move(labels));
}

}  // namespace detail

inline ManifestDataset load_dataset(const std::filesystem::path& path, DataFormat format,
                                    const ManifestationSchema& schema = ManifestationSchema::mammography()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    try {
        return format == DataFormat::csv ? detail::read_csv(in, schema) : detail::read_json(in, schema);
    } catch (const Error& e) {
        // Re-raise with the file name attached, keeping the error kind.
        const std::string msg = path.string() + ": " + e.what();
        if (dynamic_cast<const ExclusivityViolation*>(&e)) throw ExclusivityViolation(msg);
        if (dynamic_cast<const SchemaError*>(&e)) throw SchemaError(msg);
        if (dynamic_cast<const LengthMismatch*>(&e)) throw LengthMismatch(msg);
        throw ParseError(msg);
    }
}

inline ManifestDataset load_dataset(const std::filesystem::path& path,
                                    const ManifestationSchema& schema = ManifestationSchema::mammography()) {
    return load_dataset(path, format_from_path(path), schema);
}

inline void write_dataset(std::ostream& out, const ManifestDataset& ds, DataFormat format) {
    if (format == DataFormat::csv) {
        out << "id";
        for (const auto& c : ds.schema().column_names()) out << ',' << c;
        if (ds.has_labels()) out << ",label";
        out << '\n';
        for (std::size_t r = 0; r < ds.size(); ++r) {
            const auto& m = ds[r];
            out << m.id();
            for (std::size_t b = 0; b < m.size(); ++b) out << (m.test(b) ? ",1" : ",0");
            if (ds.has_labels()) out << ',' << static_cast<int>((*ds.labels())[r]);
            out << '\n';
        }
        return;
    }
    auto arr = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < ds.size(); ++r) {
        nlohmann::ordered_json e;
        e["id"] = ds[r].id();
        e["bits"] = ds[r].bits();
        if (ds.has_labels()) e["label"] = (*ds.labels())[r];
        arr.push_back(std::move(e));
    }
    out << arr.dump() << '\n';
}

inline void save_dataset(const std::filesystem::path& path, const ManifestDataset& ds, DataFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset file " + path.string());
    write_dataset(out, ds, format);
    if (!out) throw IoError("write failed for " + path.string());
}

inline void save_dataset(const std::filesystem::path& path, const ManifestDataset& ds) {
    save_dataset(path, ds, format_from_path(path));
}

}  // namespace maninex

#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "maninex/manifest.hpp"
#include "test_util.hpp"

using namespace maninex;
using maninex::testing::naive_hamming;
using maninex::testing::TempDir;

namespace {

Manifestation random_valid(const ManifestationSchema& schema, SamplerRng& rng, std::string id) {
    Manifestation m(schema.size(), std::move(id));
    for (std::size_t g = 0; g < schema.n_groups(); ++g) {
        const auto& tg = schema.groups()[g];
        if (tg.exclusive) {
            const auto pick = rng.below(tg.options.size() + 1);
            if (pick < tg.options.size()) m.set(schema.offset(g) + pick);
        } else {
            for (std::size_t k = 0; k < tg.options.size(); ++k)
                if (rng.bernoulli(0.5)) m.set(schema.offset(g) + k);
        }
    }
    return m;
}

}  // namespace

TEST(Schema, DefaultLayout) {
    const auto& s = ManifestationSchema::mammography();
    ASSERT_EQ(s.n_groups(), 9u);
    EXPECT_EQ(s.size(), 35u);
    const std::vector<std::size_t> counts{4, 4, 3, 3, 3, 3, 3, 3, 9};
    const std::vector<std::size_t> offsets{0, 4, 8, 11, 14, 17, 20, 23, 26};
    for (std::size_t g = 0; g < 9; ++g) {
        EXPECT_EQ(s.groups()[g].options.size(), counts[g]);
        EXPECT_EQ(s.offset(g), offsets[g]);
        EXPECT_EQ(s.groups()[g].exclusive, g < 8);
    }
    EXPECT_EQ(s.group_of(0), 0u);
    EXPECT_EQ(s.group_of(13), 3u);
    EXPECT_EQ(s.group_of(34), 8u);
}

TEST(Schema, JsonRoundTripAndFingerprint) {
    const auto& s = ManifestationSchema::mammography();
    const auto back = ManifestationSchema::from_json(s.to_json());
    EXPECT_EQ(back, s);
    EXPECT_EQ(back.fingerprint(), s.fingerprint());
    EXPECT_NE(ManifestationSchema::independent(35).fingerprint(), s.fingerprint());
    EXPECT_THROW(ManifestationSchema::from_json(nlohmann::json::object()), SchemaError);
    EXPECT_THROW(ManifestationSchema({{"g", {"a", "a"}, true}}), SchemaError);
}

TEST(Schema, LoadFromFile) {
    TempDir dir;
    std::ofstream(dir / "schema.json") << R"([{"name":"shape","options":["round","oval"],"exclusive":true},
                                             {"name":"signs","options":["x","y","z"],"exclusive":false}])";
    const auto s = load_schema(dir / "schema.json");
    EXPECT_EQ(s.size(), 5u);
    EXPECT_FALSE(s.groups()[1].exclusive);
    EXPECT_THROW(load_schema(dir / "missing.json"), IoError);
}

TEST(EncodeRecord, EmptyIsZeroVector) {
    const auto m = encode_record({}, ManifestationSchema::mammography());
    EXPECT_EQ(m.size(), 35u);
    EXPECT_EQ(m.count(), 0u);
}

TEST(EncodeRecord, RoundMassShapeIsBitThree) {
    const auto m = encode_record({{"mass shape", {"round"}}}, ManifestationSchema::mammography());
    EXPECT_EQ(m.count(), 1u);
    EXPECT_TRUE(m.test(3));
}

TEST(EncodeRecord, PositionsFromCumulativeOffsets) {
    const auto& s = ManifestationSchema::mammography();
    const auto m = encode_record({{"mass size", {"2-5cm"}}, {"miscellaneous", {"duct sign", "halo sign"}}}, s);
    EXPECT_EQ(m.count(), 3u);
    // mass size starts at 11, miscellaneous at 26
    EXPECT_TRUE(m.test(11 + 1));
    EXPECT_TRUE(m.test(26 + 2));
    EXPECT_TRUE(m.test(26 + 4));
}

TEST(EncodeRecord, Errors) {
    const auto& s = ManifestationSchema::mammography();
    EXPECT_THROW(encode_record({{"mass shape", {"square"}}}, s), UnknownOption);
    EXPECT_THROW(encode_record({{"no such group", {"x"}}}, s), UnknownOption);
    EXPECT_THROW(encode_record({{"mass shape", {"round", "ovoid"}}}, s), ExclusivityViolation);
}

TEST(EncodeRecord, DecodeIsInverseOnValidRecords) {
    const auto& s = ManifestationSchema::mammography();
    SamplerRng rng(7);
    for (int i = 0; i < 500; ++i) {
        const auto m = random_valid(s, rng, "x");
        const auto back = encode_record(decode_record(m, s), s, "x");
        ASSERT_TRUE(back.same_bits(m)) << m.to_string();
    }
}

TEST(Hamming, BasicCases) {
    Manifestation zero(35), k(35);
    for (std::size_t b : {1u, 5u, 17u, 34u}) k.set(b);
    EXPECT_EQ(hamming(zero, zero), 0u);
    EXPECT_EQ(hamming(k, k), 0u);
    EXPECT_EQ(hamming(zero, k), 4u);
    EXPECT_THROW(hamming(Manifestation(35), Manifestation(34)), LengthMismatch);
}

TEST(Hamming, PackedMatchesNaiveOnRandomPairs) {
    SamplerRng rng(11);
    for (std::size_t len : {35u, 64u, 65u, 130u}) {
        for (int i = 0; i < 10000 / 4; ++i) {
            Manifestation a(len), b(len);
            for (std::size_t j = 0; j < len; ++j) {
                if (rng.bernoulli(0.5)) a.set(j);
                if (rng.bernoulli(0.5)) b.set(j);
            }
            ASSERT_EQ(hamming(a, b), naive_hamming(a, b));
        }
    }
}

TEST(Hamming, MetricAxiomsOnRandomTriples) {
    SamplerRng rng(3);
    for (int i = 0; i < 2000; ++i) {
        Manifestation x(35), y(35), z(35);
        for (std::size_t j = 0; j < 35; ++j) {
            if (rng.bernoulli(0.3)) x.set(j);
            if (rng.bernoulli(0.5)) y.set(j);
            if (rng.bernoulli(0.7)) z.set(j);
        }
        EXPECT_EQ(hamming(x, y), hamming(y, x));
        EXPECT_LE(hamming(x, z), hamming(x, y) + hamming(y, z));
        EXPECT_EQ(hamming(x, y) == 0, x.same_bits(y));
    }
}

TEST(DedupKey, EqualityFollowsBits) {
    Manifestation a(35, "a"), b(35, "b");
    a.set(4);
    b.set(4);
    EXPECT_EQ(dedup_key(a), dedup_key(b));
    b.set(5);
    EXPECT_NE(dedup_key(a), dedup_key(b));
}

TEST(DedupKey, DistinctCountMatchesStringSet) {
    // Few bits so that duplicates are common.
    const auto ds = maninex::testing::bernoulli_dataset(3000, 10, 0.5, 99);
    std::set<std::string> strings;
    std::set<DedupKey> keys;
    for (const auto& m : ds.records()) {
        strings.insert(m.to_string());
        keys.insert(dedup_key(m));
    }
    EXPECT_EQ(keys.size(), strings.size());
    EXPECT_LT(keys.size(), ds.size());
}

TEST(Dataset, RejectsDuplicateIdsAndBadRecords) {
    const auto& s = ManifestationSchema::mammography();
    std::vector<Manifestation> recs{Manifestation(35, "a"), Manifestation(35, "a")};
    EXPECT_THROW(ManifestDataset(s, recs), SchemaError);
    Manifestation bad(35, "b");
    bad.set(0);
    bad.set(1);
    EXPECT_THROW(ManifestDataset(s, {bad}), ExclusivityViolation);
    EXPECT_THROW(ManifestDataset(s, {Manifestation(34, "c")}), LengthMismatch);
}

class DatasetFiles : public ::testing::Test {
protected:
    TempDir dir;
    std::string header() const {
        std::string h = "id";
        for (const auto& c : ManifestationSchema::mammography().column_names()) h += "," + c;
        return h;
    }
    static std::string row(const std::string& id, const std::vector<int>& set_bits, const std::string& tail = "") {
        std::vector<int> bits(35, 0);
        for (int b : set_bits) bits[b] = 1;
        std::string r = id;
        for (int b : bits) r += "," + std::to_string(b);
        return r + tail;
    }
};

TEST_F(DatasetFiles, LoadsWellFormedCsv) {
    std::ofstream(dir / "d.csv") << header() << ",label\n"
                                 << row("p1", {3, 26}, ",1") << "\n"
                                 << row("p2", {}, ",0") << "\n"
                                 << row("p3", {12, 28, 30}, ",1") << "\n";
    const auto ds = load_dataset(dir / "d.csv");
    ASSERT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds[0].id(), "p1");
    EXPECT_TRUE(ds[0].test(3));
    EXPECT_EQ(ds[2].count(), 3u);
    ASSERT_TRUE(ds.has_labels());
    EXPECT_EQ((*ds.labels())[1], 0);
}

TEST_F(DatasetFiles, IdColumnOptional) {
    std::string h;
    for (const auto& c : ManifestationSchema::mammography().column_names()) h += (h.empty() ? "" : ",") + c;
    std::string r(35 * 2 - 1, ',');
    for (std::size_t i = 0; i < 35; ++i) r[2 * i] = '0';
    std::ofstream(dir / "d.csv") << h << "\n" << r << "\n" << r << "\n";
    const auto ds = load_dataset(dir / "d.csv");
    EXPECT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds[1].id(), "1");
    EXPECT_FALSE(ds.has_labels());
}

TEST_F(DatasetFiles, ExclusivityViolationNamesRowAndGroup) {
    std::ofstream(dir / "d.csv") << header() << "\n" << row("ok", {0}) << "\n" << row("bad", {0, 2}) << "\n";
    try {
        load_dataset(dir / "d.csv");
        FAIL() << "expected ExclusivityViolation";
    } catch (const ExclusivityViolation& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("mass shape"), std::string::npos) << msg;
    }
}

TEST_F(DatasetFiles, SchemaAndParseErrors) {
    std::ofstream(dir / "cols.csv") << "id,a,b\n1,0,1\n";
    EXPECT_THROW(load_dataset(dir / "cols.csv"), SchemaError);
    std::ofstream(dir / "cell.csv") << header() << "\n" << row("x", {}).replace(2, 1, "7") << "\n";
    EXPECT_THROW(load_dataset(dir / "cell.csv"), ParseError);
    std::ofstream(dir / "short.csv") << header() << "\nx,1,0\n";
    EXPECT_THROW(load_dataset(dir / "short.csv"), ParseError);
    EXPECT_THROW(load_dataset(dir / "absent.csv"), IoError);
    std::ofstream(dir / "bad.json") << "[{\"id\":\"a\",\"bits\":[0,1]}]";
    EXPECT_THROW(load_dataset(dir / "bad.json"), SchemaError);
}

TEST_F(DatasetFiles, SaveLoadRoundTripIsBitIdentical) {
    const auto& s = ManifestationSchema::mammography();
    SamplerRng rng(5);
    std::vector<Manifestation> recs;
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 200; ++i) {
        recs.push_back(random_valid(s, rng, "case-" + std::to_string(i)));
        labels.push_back(static_cast<std::uint8_t>(rng.below(2)));
    }
    const ManifestDataset ds(s, recs, labels);
    for (auto fmt : {DataFormat::csv, DataFormat::json}) {
        const auto path = dir / (fmt == DataFormat::csv ? "rt.csv" : "rt.json");
        save_dataset(path, ds, fmt);
        const auto back = load_dataset(path, fmt);
        EXPECT_EQ(back, ds);
        // saving again yields identical bytes
        const auto again = dir / (fmt == DataFormat::csv ? "rt2.csv" : "rt2.json");
        save_dataset(again, back, fmt);
        EXPECT_EQ(hash_file(path.string()), hash_file(again.string()));
    }
}

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "maninex/cli.hpp"
#include "test_util.hpp"

namespace {

using namespace maninex;
using maninex::testing::TempDir;
namespace fs = std::filesystem;

struct Invocation {
    int code = 0;
    std::string out;
    std::string err;
};

Invocation run(std::vector<std::string> args) {
    args.insert(args.begin(), "maninex");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Invocation r;
    r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

fs::path write_toy_csv(const TempDir& dir, std::size_t n, const std::string& name = "toy.csv") {
    SyntheticSpec spec;
    spec.n_instances = n;
    spec.data_seed = 11;
    const auto data = generate_synthetic(spec);
    const auto path = dir / name;
    save_dataset(path, data.manifestations);
    return path;
}

TEST(CliIndex, ToyCsvWritesIndexAndSummary) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 120);
    const auto r = run({"--out-dir", dir.path().string(), "index", "--data", csv.string(), "--out",
                        (dir / "toy.mnix").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "toy.mnix"));
    EXPECT_NE(r.out.find("N = 120"), std::string::npos);
    EXPECT_NE(r.out.find("d_max_observed = "), std::string::npos);
    const auto idx = load_index(dir / "toy.mnix");
    EXPECT_EQ(idx.size(), 120U);
}

TEST(CliIndex, MissingFileNamesThePath) {
    TempDir dir;
    const auto missing = (dir / "no_such_table.csv").string();
    const auto r = run({"--out-dir", dir.path().string(), "index", "--data", missing});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "index.mnix"));
}

TEST(CliIndex, RebuildIsByteIdentical) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 150);
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "index", "--data", csv.string(), "--out",
                   (dir / "a.mnix").string()})
                  .code,
              0);
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "index", "--data", csv.string(), "--out",
                   (dir / "b.mnix").string(), "--threads", "3"})
                  .code,
              0);
    EXPECT_EQ(hash_file((dir / "a.mnix").string()), hash_file((dir / "b.mnix").string()));
}

TEST(CliDemo, TwoMeansGiveTwoHistogramPairsAndTheTrend) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 300);
    const auto r = run({"--out-dir", dir.path().string(), "demo", "--data", csv.string(), "--mu", "11,0", "--draws",
                        "20000", "--b", "auto"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto hist = read_csv_rows(dir / "demo_histograms.csv");
    ASSERT_FALSE(hist.empty());
    EXPECT_EQ(hist[0], (std::vector<std::string>{"mu", "kind", "distance", "count"}));
    std::map<std::pair<std::string, std::string>, std::uint64_t> totals;
    for (std::size_t i = 1; i < hist.size(); ++i) totals[{hist[i][0], hist[i][1]}] += std::stoull(hist[i][3]);
    EXPECT_EQ(totals.size(), 4U);
    // Anchor counts are taken after within-batch duplicates are dropped.
    for (const std::string mu : {"11", "0"}) {
        EXPECT_GT((totals[{mu, "anchor"}]), 0U);
        EXPECT_LE((totals[{mu, "anchor"}]), 20000U);
    }

    const auto summary = read_csv_rows(dir / "demo_histograms_summary.csv");
    ASSERT_EQ(summary.size(), 3U);
    EXPECT_EQ(summary[0][5], "pairwise_mean");
    EXPECT_EQ(summary[1][0], "11");
    EXPECT_EQ(summary[2][0], "0");
    EXPECT_LE(std::stod(summary[2][5]), std::stod(summary[1][5]));
    EXPECT_LT(std::stod(summary[2][3]), std::stod(summary[1][3]));
}

TEST(CliDemo, SingleInstanceIsExhausted) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 1);
    const auto r = run({"--out-dir", dir.path().string(), "demo", "--data", csv.string(), "--draws", "10"});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("ExhaustedCandidates"), std::string::npos) << r.err;
}

TEST(CliDemo, ZeroDrawsWritesEmptyHistograms) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 50);
    const auto r = run({"--quiet", "--out-dir", dir.path().string(), "demo", "--data", csv.string(), "--draws", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_csv_rows(dir / "demo_histograms.csv").size(), 1U);
    for (const auto& row : read_csv_rows(dir / "demo_histograms_summary.csv"))
        if (row[0] != "mu") EXPECT_EQ(row[2], "0");
}

TEST(CliDemo, UsesAPrebuiltIndexAndRejectsAMismatchedOne) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 80);
    const auto other = write_toy_csv(dir, 81, "other.csv");
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "index", "--data", other.string()}).code, 0);
    const auto r = run({"--out-dir", dir.path().string(), "demo", "--data", csv.string(), "--index",
                        (dir / "index.mnix").string(), "--draws", "100"});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("error: "), std::string::npos);
}

TEST(CliBound, KnownRowAndShape) {
    TempDir dir;
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "bound", "--p", "0.5", "--n-max", "200"}).code, 0);
    const auto rows = read_csv_rows(dir / "bound.csv");
    ASSERT_EQ(rows.size(), 201U);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"n", "bound"}));
    EXPECT_EQ(rows[35][0], "35");
    EXPECT_NEAR(std::stod(rows[35][1]), 17.5 - 1.5 * std::sqrt(35.0), 1e-7);
    EXPECT_NEAR(std::stod(rows[35][1]), 8.626, 5e-4);
    // n/2 - 1.5 sqrt(n) dips once between n = 1 and n = 2, then rises.
    EXPECT_LT(std::stod(rows[2][1]), std::stod(rows[1][1]));
    for (std::size_t n = 3; n <= 200; ++n) EXPECT_GT(std::stod(rows[n][1]), std::stod(rows[n - 1][1])) << n;
}

TEST(CliBound, SmallProbabilityKeepsNegativeValues) {
    TempDir dir;
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "bound", "--p", "1e-6", "--n-max", "5"}).code, 0);
    const auto rows = read_csv_rows(dir / "bound.csv");
    for (std::size_t n = 1; n <= 5; ++n) {
        const double v = std::stod(rows[n][1]);
        EXPECT_LT(v, 0.0);
        EXPECT_GT(v, -0.01);
    }
}

TEST(CliBound, RejectsEmptyRange) {
    TempDir dir;
    const auto r = run({"--out-dir", dir.path().string(), "bound", "--n-min", "5", "--n-max", "4"});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("InvalidArgument"), std::string::npos);
}

TEST(CliSample, BatchLogLinesParse) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 100);
    for (const std::string sampler : {"maninegs", "uniform"}) {
        const auto out = dir / (sampler + ".jsonl");
        ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "sample", "--data", csv.string(), "--sampler",
                       sampler, "--batches", "7", "--batch-size", "16", "--out", out.string()})
                      .code,
                  0);
        std::ifstream in(out);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            EXPECT_EQ(j.at("step").get<std::size_t>(), n);
            EXPECT_LE(j.at("members").size(), 15U);
            for (const auto& m : j.at("members")) {
                EXPECT_TRUE(m.contains("id"));
                EXPECT_TRUE(m.contains("d"));
                EXPECT_TRUE(m.contains("fallback"));
            }
            ++n;
        }
        EXPECT_EQ(n, 7U);
    }
}

TEST(CliSample, SameSeedSameBytes) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 100);
    for (const std::string name : {"a.jsonl", "b.jsonl"})
        ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "--seed", "9", "sample", "--data", csv.string(),
                       "--out", (dir / name).string()})
                      .code,
                  0);
    EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
}

// Small population and short schedule so a 2 x 2 x 10 grid runs in seconds.
fs::path write_small_config(const TempDir& dir) {
    nlohmann::ordered_json j;
    SyntheticSpec data;
    data.n_instances = 200;
    TrainConfig train;
    train.steps = 30;
    train.warmup_steps = 5;
    train.batch_size = 16;
    train.log_every = 10;
    j["data"] = to_json(data);
    j["train"] = to_json(train);
    const auto path = dir / "cfg.json";
    std::ofstream(path) << j.dump(2);
    return path;
}

TEST(CliTrainReport, FullGridGivesFourCellsAndRerunsAreIdentical) {
    TempDir dir;
    const auto cfg = write_small_config(dir);
    for (const std::string tag : {"a", "b"}) {
        const auto out = dir / tag;
        const auto r = run({"--quiet", "--config", cfg.string(), "--out-dir", out.string(), "train", "--grid",
                            "--threads", tag == "a" ? "1" : "2"});
        ASSERT_EQ(r.code, 0) << r.err;
        std::size_t n_files = 0;
        for (const auto& e : fs::directory_iterator(out / "runs")) n_files += e.path().extension() == ".json";
        EXPECT_EQ(n_files, 40U);
        ASSERT_EQ(run({"--quiet", "--out-dir", out.string(), "report", "--runs", (out / "runs").string()}).code, 0);
    }
    const auto summary = read_csv_rows(dir / "a" / "report_summary.csv");
    ASSERT_EQ(summary.size(), 5U);
    for (std::size_t i = 1; i < summary.size(); ++i) EXPECT_EQ(summary[i][2], "10");
    const auto rows = read_csv_rows(dir / "a" / "report.csv");
    ASSERT_EQ(rows.size(), 41U);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"sampler", "scenario", "seed", "auc", "alignment_mean", "final_tau"}));
    for (const std::string f : {"report.csv", "report_summary.csv", "report.json"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(CliTrainReport, SummaryStdUsesTheUnbiasedEstimator) {
    TempDir dir;
    fs::create_directories(dir / "runs");
    const double aucs[] = {1.0, 2.0, 4.0};
    for (int k = 0; k < 3; ++k) {
        RunResult r;
        r.sampler = SamplerKind::uniform;
        r.scenario = Scenario::unimodal;
        r.seed = static_cast<std::uint64_t>(k);
        r.auc = aucs[k];
        r.final_tau = 0.5;
        std::ofstream(dir / "runs" / ("r" + std::to_string(k) + ".json")) << to_json(r).dump();
    }
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "report", "--runs", (dir / "runs").string()}).code, 0);
    const auto summary = read_csv_rows(dir / "report_summary.csv");
    ASSERT_EQ(summary.size(), 2U);
    // mean 7/3, squared deviations sum 14/3, over n - 1 = 2 -> 7/3
    EXPECT_NEAR(std::stod(summary[1][3]), 7.0 / 3.0, 1e-8);
    EXPECT_NEAR(std::stod(summary[1][4]), std::sqrt(7.0 / 3.0), 1e-8);
    EXPECT_EQ(summary[1][5], "nan");
}

TEST(CliTrainReport, ForeignJsonIsAParseError) {
    TempDir dir;
    fs::create_directories(dir / "runs");
    std::ofstream(dir / "runs" / "x.json") << R"({"hello": 1})";
    const auto r = run({"--out-dir", dir.path().string(), "report", "--runs", (dir / "runs").string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("ParseError"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("x.json"), std::string::npos);
}

TEST(CliTrainReport, EmptyRunsDirectoryFails) {
    TempDir dir;
    fs::create_directories(dir / "runs");
    EXPECT_NE(run({"--out-dir", dir.path().string(), "report", "--runs", (dir / "runs").string()}).code, 0);
}

TEST(CliConfig, FlagsOverrideConfigWhichOverridesDefaults) {
    TempDir dir;
    const auto cfg = write_small_config(dir);
    ASSERT_EQ(run({"--quiet", "--config", cfg.string(), "--out-dir", dir.path().string(), "train", "--steps", "20",
                   "--seed", "4", "--sampler", "uniform", "--scenario", "uni"})
                  .code,
              0);
    std::ifstream in(dir / "manifest.jsonl");
    std::string line;
    std::getline(in, line);
    const auto m = nlohmann::json::parse(line);
    EXPECT_EQ(m.at("config").at("train").at("steps"), 20);
    EXPECT_EQ(m.at("config").at("train").at("batch_size"), 16);
    EXPECT_EQ(m.at("config").at("train").at("lr_peak"), TrainConfig{}.lr_peak);
    EXPECT_EQ(m.at("config").at("data").at("n_instances"), 200);
    EXPECT_EQ(m.at("seed"), 4);
    const auto run_json = nlohmann::json::parse(slurp(dir / "run.json"));
    EXPECT_EQ(run_json.at("seed"), 4);
    EXPECT_EQ(run_json.at("sampler"), "uniform");
    EXPECT_TRUE(run_json.at("alignment_mean").is_null());
}

TEST(CliConfig, BadConfigFileFails) {
    TempDir dir;
    std::ofstream(dir / "bad.json") << "{ not json";
    const auto r = run({"--config", (dir / "bad.json").string(), "--out-dir", dir.path().string(), "train"});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("ParseError"), std::string::npos);
}

TEST(CliManifest, EachCommandAppendsOneRecordWithOutputHashes) {
    TempDir dir;
    const auto csv = write_toy_csv(dir, 60);
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "index", "--data", csv.string()}).code, 0);
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "bound", "--n-max", "10"}).code, 0);
    std::ifstream in(dir / "manifest.jsonl");
    std::vector<nlohmann::json> records;
    std::string line;
    while (std::getline(in, line)) records.push_back(nlohmann::json::parse(line));
    ASSERT_EQ(records.size(), 2U);
    EXPECT_EQ(records[0].at("command"), "index");
    EXPECT_EQ(records[1].at("command"), "bound");
    std::map<std::string, int> referenced;
    for (const auto& r : records) {
        EXPECT_EQ(r.at("code_version"), cli::kVersion);
        EXPECT_TRUE(r.contains("wall_time_s"));
        for (const auto& o : r.at("outputs")) {
            const std::string path = o.at("path");
            ++referenced[path];
            EXPECT_EQ(o.at("fnv1a64"), hex64(hash_file(path)));
        }
    }
    EXPECT_EQ(referenced.size(), 2U);
    for (const auto& [path, count] : referenced) EXPECT_EQ(count, 1) << path;
    EXPECT_EQ(records[0].at("inputs").at(0).at("fnv1a64"), hex64(hash_file(csv.string())));
}

TEST(CliManifest, FailedCommandWritesNoRecord) {
    TempDir dir;
    run({"--out-dir", dir.path().string(), "index", "--data", (dir / "missing.csv").string()});
    EXPECT_FALSE(fs::exists(dir / "manifest.jsonl"));
}

TEST(CliUsage, UnknownSubcommandAndMissingRequiredFlagFail) {
    EXPECT_NE(run({"frobnicate"}).code, 0);
    EXPECT_NE(run({"index"}).code, 0);
    EXPECT_NE(run({}).code, 0);
    EXPECT_NE(run({"train", "--sampler", "hardest"}).code, 0);
}

TEST(CliSynth, WritesALoadableTable) {
    TempDir dir;
    const auto out = dir / "s.json";
    ASSERT_EQ(run({"--quiet", "--out-dir", dir.path().string(), "synth", "--n-instances", "40", "--out", out.string()})
                  .code,
              0);
    const auto ds = load_dataset(out);
    EXPECT_EQ(ds.size(), 40U);
    EXPECT_TRUE(ds.has_labels());
}

}  // namespace

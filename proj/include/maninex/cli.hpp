#pragma once
// Command-line front end: one binary, one subcommand per artifact.
//
//   synth   write a synthetic manifestation table (CSV/JSON)
//   index   build and save the Hamming index for a dataset
//   demo    fixed-mean sampling sweep -> distance histograms
//   bound   scarcity lower bound curve
//   sample  epoch sampler batch log (JSON lines)
//   train   one pretraining run, or the full sampler x scenario x seed grid
//   report  per-run table and per-cell mean / std from run files
//
// Every invocation appends one record to <out-dir>/manifest.jsonl; the
// artifacts themselves carry no timestamps so reruns are byte-identical.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maninex/errors.hpp"
#include "maninex/hamming_index.hpp"
#include "maninex/hash.hpp"
#include "maninex/manifest.hpp"
#include "maninex/negsampler.hpp"
#include "maninex/toytrain.hpp"

namespace maninex::cli {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

inline std::string fmt9(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

struct RunManifest {
    std::string command;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;   // path, hash
    std::vector<std::pair<std::string, std::string>> outputs;  // path, hash

    void add_input(const fs::path& p) { inputs.emplace_back(p.string(), hex64(hash_file(p.string()))); }
    void add_output(const fs::path& p) { outputs.emplace_back(p.string(), hex64(hash_file(p.string()))); }
};

inline void append_manifest(const fs::path& out_dir, const RunManifest& m, double wall_seconds) {
    nlohmann::ordered_json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["seed"] = m.seed;
    j["code_version"] = kVersion;
    auto& in = j["inputs"] = nlohmann::ordered_json::array();
    for (const auto& [p, h] : m.inputs) in.push_back({{"path", p}, {"fnv1a64", h}});
    auto& out = j["outputs"] = nlohmann::ordered_json::array();
    for (const auto& [p, h] : m.outputs) out.push_back({{"path", p}, {"fnv1a64", h}});
    j["wall_time_s"] = wall_seconds;
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    j["finished_at"] = stamp;
    std::ofstream f(out_dir / "manifest.jsonl", std::ios::app);
    if (!f) throw IoError("cannot append to " + (out_dir / "manifest.jsonl").string());
    f << j.dump() << '\n';
}

inline std::ofstream open_output(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    return f;
}

inline void close_checked(std::ofstream& f, const fs::path& p) {
    f.close();
    if (!f) throw IoError("failed writing " + p.string());
}

inline nlohmann::json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(p.string() + ": " + e.what());
    }
}

// Options shared by every subcommand plus the union of per-command flags.
struct Options {
    std::uint64_t seed = 0;
    std::string config;
    std::string out_dir = ".";
    bool quiet = false;

    std::string data;
    std::string schema;
    std::string index;
    std::string out;
    unsigned threads = 1;

    std::vector<double> mus{11.0, 7.0, 3.0, 0.0};
    std::size_t draws = 100000;
    std::size_t batches = 0;

    long n_min = 1;
    long n_max = 200;
    double p = 0.5;

    std::string sampler = "maninegs";
    std::string scenario = "multi";
    bool grid = false;
    std::size_t n_seeds = 10;
    std::string runs;
    std::string format;
};

// Values from --config, overridden by any flag given explicitly.
struct Resolved {
    SyntheticSpec data;
    TrainConfig train;
    std::optional<std::vector<std::uint64_t>> seeds;
};

class Runner {
public:
    Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

    int run(int argc, const char* const* argv) {
        CLI::App app{"manifestation-guided negative sampling toolkit"};
        app.set_version_flag("--version", kVersion);
        app.require_subcommand(1);
        app.fallthrough();
        app.add_option("--seed", o_.seed, "random seed")->capture_default_str();
        app.add_option("--config", o_.config, "JSON config file (sections: data, train, seeds)");
        app.add_option("--out-dir", o_.out_dir, "directory for outputs and manifest.jsonl")->capture_default_str();
        app.add_flag("--quiet", o_.quiet, "suppress progress output");

        auto* synth = app.add_subcommand("synth", "write a synthetic manifestation table");
        synth->add_option("--out", o_.out, "output table (.csv or .json)");
        synth->add_option("--n-instances", overrides_.n_instances, "number of instances");
        synth->add_option("--flip-noise", overrides_.flip_noise, "trait flip probability");

        auto* index = app.add_subcommand("index", "build the Hamming index");
        index->add_option("--data", o_.data, "manifestation table (.csv or .json)")->required();
        index->add_option("--schema", o_.schema, "schema JSON (default: 35-bit lesion schema)");
        index->add_option("--out", o_.out, "index file (default <out-dir>/index.mnix)");
        index->add_option("--threads", o_.threads, "build threads")->capture_default_str();

        auto* demo = app.add_subcommand("demo", "fixed-mean sampling sweep histograms");
        add_data_options(demo);
        demo->add_option("--mu", o_.mus, "distance-law means")->delimiter(',')->capture_default_str();
        demo->add_option("--draws", o_.draws, "negative distances drawn per mean")->capture_default_str();
        demo->add_option("--out", o_.out, "histogram CSV (default <out-dir>/demo_histograms.csv)");
        add_sampler_options(demo);

        auto* bound = app.add_subcommand("bound", "scarcity lower bound curve");
        bound->add_option("--n-min", o_.n_min, "smallest manifestation size")->capture_default_str();
        bound->add_option("--n-max", o_.n_max, "largest manifestation size")->capture_default_str();
        bound->add_option("-p,--p", o_.p, "trait occurrence probability")->capture_default_str();
        bound->add_option("--out", o_.out, "CSV path (default <out-dir>/bound.csv)");

        auto* sample = app.add_subcommand("sample", "epoch sampler batch log");
        add_data_options(sample);
        sample->add_option("--sampler", o_.sampler, "maninegs or uniform")->capture_default_str();
        sample->add_option("--batches", o_.batches, "number of batches (default: one epoch)");
        sample->add_option("--out", o_.out, "JSON-lines path (default <out-dir>/batches.jsonl)");
        add_sampler_options(sample);

        auto* train = app.add_subcommand("train", "pretraining run(s) on the synthetic population");
        train->add_option("--sampler", o_.sampler, "maninegs or uniform")->capture_default_str();
        train->add_option("--scenario", o_.scenario, "uni or multi")->capture_default_str();
        train->add_option("--out", o_.out, "run JSON (default <out-dir>/run.json)");
        train->add_flag("--grid", o_.grid, "run every sampler x scenario x seed into <out-dir>/runs/");
        train->add_option("--n-seeds", o_.n_seeds, "grid seeds: --seed .. --seed + n - 1")->capture_default_str();
        train->add_option("--threads", o_.threads, "worker threads for the grid")->capture_default_str();
        train->add_option("--steps", overrides_.steps, "training steps");
        train->add_option("--warmup", overrides_.warmup, "learning-rate warmup steps");
        train->add_option("--n-instances", overrides_.n_instances, "synthetic population size");

        auto* report = app.add_subcommand("report", "aggregate run files");
        report->add_option("--runs", o_.runs, "directory of run JSON files")->required();
        report->add_option("--out", o_.out, "report CSV (default <out-dir>/report.csv)");

        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            return app.exit(e, out_, err_);
        }

        const auto t0 = std::chrono::steady_clock::now();
        try {
            fs::create_directories(o_.out_dir);
            RunManifest m;
            m.seed = o_.seed;
            CLI::App* sub = app.get_subcommands().front();
            m.command = sub->get_name();
            if (sub == synth) cmd_synth(*sub, m);
            else if (sub == index) cmd_index(m);
            else if (sub == demo) cmd_demo(*sub, m);
            else if (sub == bound) cmd_bound(m);
            else if (sub == sample) cmd_sample(*sub, m);
            else if (sub == train) cmd_train(*sub, m);
            else cmd_report(m);
            append_manifest(o_.out_dir, m,
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        } catch (const Error& e) {
            err_ << "error: " << e.kind() << ": " << e.what() << '\n';
            return 1;
        } catch (const std::exception& e) {
            err_ << "error: " << e.what() << '\n';
            return 1;
        }
        return 0;
    }

private:
    struct Overrides {
        std::optional<std::size_t> n_instances;
        std::optional<double> flip_noise;
        std::optional<std::size_t> steps;
        std::optional<std::size_t> batch_size;
        std::optional<double> sigma;
        std::optional<long> a;
        std::optional<std::string> b;
        std::optional<std::size_t> warmup;
        std::optional<std::string> empty_bucket;
    };

    std::ostream& out_;
    std::ostream& err_;
    Options o_;
    Overrides overrides_;

    void add_data_options(CLI::App* sub) {
        sub->add_option("--data", o_.data, "manifestation table (.csv or .json)")->required();
        sub->add_option("--schema", o_.schema, "schema JSON (default: 35-bit lesion schema)");
        sub->add_option("--index", o_.index, "prebuilt index (built in memory when absent)");
    }

    void add_sampler_options(CLI::App* sub) {
        sub->add_option("--batch-size", overrides_.batch_size, "batch size including the anchor");
        sub->add_option("--sigma", overrides_.sigma, "distance-law standard deviation");
        sub->add_option("--a", overrides_.a, "smallest sampled distance");
        sub->add_option("--b", overrides_.b, "largest sampled distance, or auto for the largest observed");
        sub->add_option("--empty-bucket", overrides_.empty_bucket, "nearest or renormalize");
    }

    void say(const std::string& line) {
        if (!o_.quiet) out_ << line << '\n';
    }

    fs::path out_path(const std::string& def) const { return o_.out.empty() ? fs::path(o_.out_dir) / def : fs::path(o_.out); }

    // defaults < config file < flags
    Resolved resolved() const {
        Resolved r;
        if (!o_.config.empty()) {
            const auto j = read_json_file(o_.config);
            if (j.contains("data")) from_json(j.at("data"), r.data);
            if (j.contains("train")) from_json(j.at("train"), r.train);
            if (j.contains("seeds")) r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        }
        if (overrides_.n_instances) r.data.n_instances = *overrides_.n_instances;
        if (overrides_.flip_noise) r.data.trait_flip_noise = *overrides_.flip_noise;
        if (overrides_.steps) r.train.steps = *overrides_.steps;
        if (overrides_.batch_size) r.train.batch_size = *overrides_.batch_size;
        if (overrides_.sigma) r.train.sampler.sigma = *overrides_.sigma;
        if (overrides_.a) r.train.sampler.a = *overrides_.a;
        if (overrides_.b && *overrides_.b != "auto") {
            try {
                r.train.sampler.b = std::stol(*overrides_.b);
            } catch (const std::exception&) {
                throw InvalidArgument("--b expects an integer or auto, got '" + *overrides_.b + "'");
            }
        } else if (overrides_.b) {
            r.train.sampler.b.reset();
        }
        if (overrides_.warmup) r.train.warmup_steps = *overrides_.warmup;
        if (overrides_.empty_bucket) {
            if (*overrides_.empty_bucket == "nearest") r.train.sampler.policy = EmptyBucketPolicy::nearest;
            else if (*overrides_.empty_bucket == "renormalize") r.train.sampler.policy = EmptyBucketPolicy::renormalize;
            else throw InvalidArgument("unknown --empty-bucket '" + *overrides_.empty_bucket + "'");
        }
        r.train.sampler.batch_size = r.train.batch_size;
        return r;
    }

    ManifestDataset load_data(RunManifest& m) const {
        m.add_input(o_.data);
        if (o_.schema.empty()) return load_dataset(o_.data);
        m.add_input(o_.schema);
        return load_dataset(o_.data, load_schema(o_.schema));
    }

    HammingIndex index_for(const ManifestDataset& ds, RunManifest& m) const {
        if (o_.index.empty()) return HammingIndex::build(ds, o_.threads);
        m.add_input(o_.index);
        auto idx = load_index(o_.index);
        idx.check_compatible(ds);
        return idx;
    }

    void cmd_synth(const CLI::App&, RunManifest& m) {
        const auto r = resolved();
        m.config["data"] = to_json(r.data);
        const auto data = generate_synthetic(r.data);
        const auto path = out_path("synthetic.csv");
        auto f = open_output(path);
        write_dataset(f, data.manifestations, format_from_path(path));
        close_checked(f, path);
        m.add_output(path);
        say("wrote " + std::to_string(data.size()) + " instances to " + path.string());
    }

    void cmd_index(RunManifest& m) {
        const auto ds = load_data(m);
        const auto idx = HammingIndex::build(ds, o_.threads);
        const auto path = out_path("index.mnix");
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        save_index(idx, path);
        m.config["threads"] = o_.threads;
        m.add_output(path);

        say("N = " + std::to_string(idx.size()));
        say("d_max_observed = " + std::to_string(idx.d_max_observed()));
        if (!o_.quiet && idx.size() > 0) {
            out_ << "distance,mean_bucket_size,anchors_with_candidates\n";
            for (long d = 0; d <= static_cast<long>(idx.d_max_observed()); ++d) {
                std::size_t total = 0, nonempty = 0;
                for (std::size_t a = 0; a < idx.size(); ++a) {
                    const auto s = idx.bucket_size(a, d);
                    total += s;
                    nonempty += s > 0;
                }
                out_ << d << ',' << fmt9(static_cast<double>(total) / static_cast<double>(idx.size())) << ','
                     << nonempty << '\n';
            }
        }
    }

    void cmd_demo(const CLI::App&, RunManifest& m) {
        const auto r = resolved();
        const auto ds = load_data(m);
        const auto idx = index_for(ds, m);
        m.config["train"] = to_json(r.train);
        m.config["mu"] = o_.mus;
        m.config["draws"] = o_.draws;
        const auto curves = sampling_demo(idx, ds, o_.mus, r.train.sampler, o_.draws, o_.seed);

        const auto hist_path = out_path("demo_histograms.csv");
        const auto sum_path = hist_path.parent_path() / (hist_path.stem().string() + "_summary.csv");
        auto h = open_output(hist_path);
        h << "mu,kind,distance,count\n";
        auto emit = [&](double mu, const char* kind, const DistanceHistogram& hist) {
            for (std::size_t d = 0; d < hist.counts.size(); ++d)
                h << fmt9(mu) << ',' << kind << ',' << d << ',' << hist.counts[d] << '\n';
        };
        for (const auto& c : curves) {
            emit(c.mu, "anchor", c.anchor);
            emit(c.mu, "pairwise", c.pairwise);
        }
        close_checked(h, hist_path);
        auto s = open_output(sum_path);
        s << "mu,n_batches,anchor_draws,anchor_mean,pairwise_pairs,pairwise_mean\n";
        for (const auto& c : curves)
            s << fmt9(c.mu) << ',' << c.n_batches << ',' << c.anchor.total() << ',' << fmt9(c.anchor.mean()) << ','
              << c.pairwise.total() << ',' << fmt9(c.pairwise.mean()) << '\n';
        close_checked(s, sum_path);
        m.add_output(hist_path);
        m.add_output(sum_path);
        for (const auto& c : curves)
            say("mu " + fmt9(c.mu) + ": anchor mean " + fmt9(c.anchor.mean()) + ", pairwise mean " +
                fmt9(c.pairwise.mean()));
    }

    void cmd_bound(RunManifest& m) {
        if (o_.n_min < 1 || o_.n_max < o_.n_min) throw InvalidArgument("need 1 <= --n-min <= --n-max");
        m.config["n_min"] = o_.n_min;
        m.config["n_max"] = o_.n_max;
        m.config["p"] = o_.p;
        const auto path = out_path("bound.csv");
        auto f = open_output(path);
        f << "n,bound\n";
        for (long n = o_.n_min; n <= o_.n_max; ++n) f << n << ',' << fmt9(scarcity_lower_bound(n, o_.p)) << '\n';
        close_checked(f, path);
        m.add_output(path);
        say("wrote " + std::to_string(o_.n_max - o_.n_min + 1) + " rows to " + path.string());
    }

    void cmd_sample(const CLI::App&, RunManifest& m) {
        auto r = resolved();
        r.train.sampler.kind = sampler_kind_from_string(o_.sampler);
        const auto ds = load_data(m);
        std::optional<HammingIndex> idx;
        if (r.train.sampler.kind == SamplerKind::maninegs) idx = index_for(ds, m);
        m.config["sampler"] = to_string(r.train.sampler.kind);
        m.config["train"] = to_json(r.train);
        EpochSampler sampler(idx ? &*idx : nullptr, ds, r.train.sampler, o_.seed);
        const std::size_t n = o_.batches ? o_.batches : ds.size();
        m.config["batches"] = n;
        const auto path = out_path("batches.jsonl");
        auto f = open_output(path);
        std::size_t fallbacks = 0, dropped = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Batch b = sampler.next();
            for (const auto& mem : b.members) fallbacks += mem.fallback_used;
            dropped += b.n_deduplicated;
            f << batch_to_json(b).dump() << '\n';
        }
        close_checked(f, path);
        m.add_output(path);
        say(std::to_string(n) + " batches, " + std::to_string(fallbacks) + " fallback draws, " +
            std::to_string(dropped) + " duplicates dropped");
    }

    void write_run(const fs::path& path, const RunResult& r, RunManifest& m) {
        auto f = open_output(path);
        f << to_json(r).dump(2) << '\n';
        close_checked(f, path);
        m.add_output(path);
    }

    void cmd_train(const CLI::App&, RunManifest& m) {
        const auto r = resolved();
        m.config["data"] = to_json(r.data);
        m.config["train"] = to_json(r.train);
        if (!o_.grid) {
            const auto sampler = sampler_kind_from_string(o_.sampler);
            const auto scenario = scenario_from_string(o_.scenario);
            m.config["sampler"] = to_string(sampler);
            m.config["scenario"] = to_string(scenario);
            const auto data = generate_synthetic(r.data);
            const auto split = split_instances(data.size(), r.data.data_seed);
            const TrainPool pool(data, split.train);
            const auto result = run_single(data, split, pool, sampler, scenario, r.train, o_.seed);
            write_run(out_path("run.json"), result, m);
            say(std::string(to_string(sampler)) + "/" + to_string(scenario) + " seed " + std::to_string(o_.seed) +
                ": auc " + fmt9(result.auc) + ", alignment " + fmt9(result.alignment_mean));
            return;
        }
        ExperimentConfig cfg;
        cfg.data = r.data;
        cfg.train = r.train;
        cfg.threads = o_.threads;
        if (r.seeds) {
            cfg.seeds = *r.seeds;
        } else {
            cfg.seeds.clear();
            for (std::size_t k = 0; k < o_.n_seeds; ++k) cfg.seeds.push_back(o_.seed + k);
        }
        m.config["seeds"] = cfg.seeds;
        const auto runs = run_experiment(cfg);
        const fs::path dir = o_.out.empty() ? fs::path(o_.out_dir) / "runs" : fs::path(o_.out);
        for (const auto& run : runs) {
            const auto name = std::string(to_string(run.sampler)) + "_" + to_string(run.scenario) + "_seed" +
                              std::to_string(run.seed) + ".json";
            write_run(dir / name, run, m);
        }
        say("wrote " + std::to_string(runs.size()) + " runs to " + dir.string());
    }

    void cmd_report(RunManifest& m) {
        if (!fs::is_directory(o_.runs)) throw IoError("runs directory not found: " + o_.runs);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(o_.runs))
            if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IoError("no run files in " + o_.runs);
        std::vector<RunResult> runs;
        for (const auto& p : files) {
            m.add_input(p);
            try {
                runs.push_back(run_from_json(read_json_file(p)));
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(p.string() + ": not a run file (" + e.what() + ")");
            }
        }
        std::sort(runs.begin(), runs.end(), [](const RunResult& a, const RunResult& b) {
            return std::tuple(static_cast<int>(a.sampler), static_cast<int>(a.scenario), a.seed) <
                   std::tuple(static_cast<int>(b.sampler), static_cast<int>(b.scenario), b.seed);
        });

        const auto path = out_path("report.csv");
        auto f = open_output(path);
        f << "sampler,scenario,seed,auc,alignment_mean,final_tau\n";
        for (const auto& r : runs)
            f << to_string(r.sampler) << ',' << to_string(r.scenario) << ',' << r.seed << ',' << fmt9(r.auc) << ','
              << fmt9(r.alignment_mean) << ',' << fmt9(r.final_tau) << '\n';
        close_checked(f, path);
        m.add_output(path);

        const auto summary = summarize(runs);
        const auto sum_path = path.parent_path() / (path.stem().string() + "_summary.csv");
        auto s = open_output(sum_path);
        s << "sampler,scenario,n_runs,auc_mean,auc_std,alignment_mean,alignment_std\n";
        for (const auto& c : summary)
            s << to_string(c.sampler) << ',' << to_string(c.scenario) << ',' << c.n_runs << ',' << fmt9(c.auc_mean)
              << ',' << fmt9(c.auc_std) << ',' << fmt9(c.alignment_mean) << ',' << fmt9(c.alignment_std) << '\n';
        close_checked(s, sum_path);
        m.add_output(sum_path);

        nlohmann::ordered_json j;
        auto& rows = j["runs"] = nlohmann::ordered_json::array();
        for (const auto& r : runs) {
            auto e = to_json(r);
            e.erase("loss_log");
            rows.push_back(std::move(e));
        }
        auto& cells = j["summary"] = nlohmann::ordered_json::array();
        for (const auto& c : summary) {
            nlohmann::ordered_json e;
            e["sampler"] = to_string(c.sampler);
            e["scenario"] = to_string(c.scenario);
            e["n_runs"] = c.n_runs;
            e["auc_mean"] = c.auc_mean;
            e["auc_std"] = std::isfinite(c.auc_std) ? nlohmann::ordered_json(c.auc_std) : nullptr;
            e["alignment_mean"] = std::isfinite(c.alignment_mean) ? nlohmann::ordered_json(c.alignment_mean) : nullptr;
            e["alignment_std"] = std::isfinite(c.alignment_std) ? nlohmann::ordered_json(c.alignment_std) : nullptr;
            cells.push_back(std::move(e));
        }
        const auto json_path = path.parent_path() / (path.stem().string() + ".json");
        auto jf = open_output(json_path);
        jf << j.dump(2) << '\n';
        close_checked(jf, json_path);
        m.add_output(json_path);

        for (const auto& c : summary)
            say(std::string(to_string(c.sampler)) + "/" + to_string(c.scenario) + ": auc " + fmt9(c.auc_mean) +
                " +- " + fmt9(c.auc_std) + ", alignment " + fmt9(c.alignment_mean));
    }
};

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return Runner(out, err).run(argc, argv);
}

}  // namespace maninex::cli

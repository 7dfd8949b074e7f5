#pragma once
// Desk-scale pretraining experiment on a synthetic multimodal population.
//
// Each instance has a Gaussian latent (the "lesion semantics") and optionally
// a nuisance latent seen only by the image views. Manifestation bits are thresholded / argmax projections of the
// semantic latent; the two image views are noisy linear images of both
// latents; the label is the sign of a fixed semantic direction. Small dense
// encoders are pretrained with either sampler and scored by a logistic probe
// and by cross-modal cosine distances in the projection space.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "maninex/contrastive.hpp"
#include "maninex/errors.hpp"
#include "maninex/hamming_index.hpp"
#include "maninex/hash.hpp"
#include "maninex/manifest.hpp"
#include "maninex/negsampler.hpp"
#include "maninex/rng.hpp"

namespace maninex {

enum class CorrelationMode { independent, grouped };

inline const char* to_string(CorrelationMode m) { return m == CorrelationMode::grouped ? "grouped" : "independent"; }

inline CorrelationMode correlation_mode_from_string(const std::string& s) {
    if (s == "grouped") return CorrelationMode::grouped;
    if (s == "independent") return CorrelationMode::independent;
    throw InvalidArgument("unknown correlation mode '" + s + "'");
}

struct SyntheticSpec {
    std::size_t n_instances = 2764;
    std::size_t latent_dim = 8;
    std::size_t nuisance_dim = 0;
    std::size_t n_manif_bits = 35;
    double trait_flip_noise = 0.05;
    std::size_t feature_dim = 32;
    double view_noise_sigma = 0.3;
    double label_threshold = 0.0;
    CorrelationMode correlation_mode = CorrelationMode::grouped;
    std::uint64_t data_seed = 2764;

    void validate() const {
        if (n_instances < 1 || latent_dim < 1 || n_manif_bits < 1 || feature_dim < 1)
            throw InvalidArgument("synthetic spec: dimensions must be at least 1");
        if (!(trait_flip_noise >= 0.0 && trait_flip_noise <= 1.0))
            throw InvalidArgument("synthetic spec: trait_flip_noise must lie in [0, 1]");
        if (!(view_noise_sigma >= 0.0) || !std::isfinite(view_noise_sigma))
            throw InvalidArgument("synthetic spec: view_noise_sigma must be finite and >= 0");
        if (correlation_mode == CorrelationMode::grouped &&
            n_manif_bits != ManifestationSchema::mammography().size())
            throw InvalidArgument("synthetic spec: grouped mode uses the 35-bit lesion schema");
    }
};

struct SyntheticData {
    ManifestDataset manifestations;  // carries the labels
    Eigen::MatrixXd latent;          // N x latent_dim
    Eigen::MatrixXd cc;              // N x feature_dim
    Eigen::MatrixXd mlo;             // N x feature_dim
    std::vector<std::uint8_t> labels;

    std::size_t size() const noexcept { return labels.size(); }

    Eigen::MatrixXd bits_matrix(std::span<const std::size_t> rows) const {
        const std::size_t n_bits = manifestations.schema().size();
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()),
                                                    static_cast<Eigen::Index>(n_bits));
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t b = 0; b < n_bits; ++b)
                if (manifestations[rows[r]].test(b)) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(b)) = 1.0;
        return out;
    }
};

namespace detail {

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double scale, SamplerRng rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
    return m;
}

// One trait = one exclusive group (options + "absent") or one free bit.
struct TraitSlot {
    std::size_t first_bit;
    std::size_t n_options;  // exclusive: options; free bit: 1
    bool exclusive;
};

inline std::vector<TraitSlot> trait_slots(const ManifestationSchema& schema) {
    std::vector<TraitSlot> out;
    for (std::size_t g = 0; g < schema.n_groups(); ++g) {
        const auto& grp = schema.groups()[g];
        if (grp.exclusive) {
            out.push_back({schema.offset(g), grp.options.size(), true});
        } else {
            for (std::size_t o = 0; o < grp.options.size(); ++o) out.push_back({schema.offset(g) + o, 1, false});
        }
    }
    return out;
}

}  // namespace detail

// Trait values are deterministic functions of the latent; with probability
// min(1, 2 * flip_noise) a trait is then replaced by a uniform draw over its
// values, so a binary trait flips with probability flip_noise and at 0.5 the
// bits carry no latent information.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const SamplerRng root(spec.data_seed);
    const auto n = static_cast<Eigen::Index>(spec.n_instances);
    const auto k = static_cast<Eigen::Index>(spec.latent_dim);
    const auto u = static_cast<Eigen::Index>(spec.nuisance_dim);
    const auto f = static_cast<Eigen::Index>(spec.feature_dim);

    SyntheticData out;
    out.latent = detail::gaussian_matrix(n, k, 1.0, root.split(1));
    const Eigen::MatrixXd nuisance = detail::gaussian_matrix(n, u, 1.0, root.split(2));

    const ManifestationSchema schema = spec.correlation_mode == CorrelationMode::grouped
                                           ? ManifestationSchema::mammography()
                                           : ManifestationSchema::independent(spec.n_manif_bits);
    const auto slots = detail::trait_slots(schema);
    // one projection per option plus one for "absent" in exclusive groups
    std::size_t n_proj = 0;
    for (const auto& s : slots) n_proj += s.exclusive ? s.n_options + 1 : 1;
    const Eigen::MatrixXd trait_w = detail::gaussian_matrix(static_cast<Eigen::Index>(n_proj), k, 1.0, root.split(3));
    const Eigen::MatrixXd scores = out.latent * trait_w.transpose();

    auto noise_rng = root.split(4);
    const double resample_p = std::min(1.0, 2.0 * spec.trait_flip_noise);
    std::vector<Manifestation> recs;
    recs.reserve(spec.n_instances);
    for (Eigen::Index i = 0; i < n; ++i) {
        Manifestation m(schema.size(), std::to_string(i));
        Eigen::Index col = 0;
        for (const auto& s : slots) {
            if (s.exclusive) {
                std::size_t pick = 0;
                for (std::size_t o = 1; o <= s.n_options; ++o)
                    if (scores(i, col + static_cast<Eigen::Index>(o)) > scores(i, col + static_cast<Eigen::Index>(pick))) pick = o;
                if (noise_rng.bernoulli(resample_p)) pick = noise_rng.below(s.n_options + 1);
                if (pick > 0) m.set(s.first_bit + pick - 1);
                col += static_cast<Eigen::Index>(s.n_options + 1);
            } else {
                bool on = scores(i, col) > 0.0;
                if (noise_rng.bernoulli(resample_p)) on = noise_rng.bernoulli(0.5);
                if (on) m.set(s.first_bit);
                col += 1;
            }
        }
        recs.push_back(std::move(m));
    }

    Eigen::VectorXd label_dir = detail::gaussian_matrix(k, 1, 1.0, root.split(5)).col(0);
    label_dir.normalize();
    const Eigen::VectorXd label_score = out.latent * label_dir;
    out.labels.resize(spec.n_instances);
    for (Eigen::Index i = 0; i < n; ++i) out.labels[static_cast<std::size_t>(i)] = label_score[i] > spec.label_threshold ? 1 : 0;

    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim + spec.nuisance_dim));
    const Eigen::MatrixXd map_sem = detail::gaussian_matrix(f, k, scale, root.split(6));
    const Eigen::MatrixXd map_nui = detail::gaussian_matrix(f, u, scale, root.split(7));
    const Eigen::MatrixXd clean = out.latent * map_sem.transpose() + nuisance * map_nui.transpose();
    out.cc = clean + detail::gaussian_matrix(n, f, spec.view_noise_sigma, root.split(8));
    out.mlo = clean + detail::gaussian_matrix(n, f, spec.view_noise_sigma, root.split(9));

    out.manifestations = ManifestDataset(schema, std::move(recs), out.labels);
    return out;
}

// Instance positions for the 7:1:2 train/validation/test partition.
struct Split {
    std::vector<std::size_t> train, validation, test;
};

inline Split split_instances(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    SamplerRng(seed).split(0x53504c4954ULL).shuffle(std::span<std::size_t>(order));
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                        order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    for (auto* part : {&s.train, &s.validation, &s.test}) std::sort(part->begin(), part->end());
    return s;
}

// ---------------------------------------------------------------------------
// Model

struct Dense {
    Eigen::MatrixXd w;  // out x in
    Eigen::VectorXd b;

    Dense() = default;
    Dense(std::size_t in, std::size_t out, SamplerRng rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        w.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
        b.resize(static_cast<Eigen::Index>(out));
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = bound * (2.0 * rng.uniform() - 1.0);
        for (Eigen::Index r = 0; r < b.size(); ++r) b[r] = bound * (2.0 * rng.uniform() - 1.0);
    }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const { return (x * w.transpose()).rowwise() + b.transpose(); }
};

// Linear -> ReLU -> Linear, rows are samples.
struct TwoLayer {
    Dense first, second;

    struct Cache {
        Eigen::MatrixXd input, pre;
    };
    struct Grad {
        Eigen::MatrixXd w1, w2;
        Eigen::VectorXd b1, b2;
    };

    TwoLayer() = default;
    TwoLayer(std::size_t in, std::size_t hidden, std::size_t out, SamplerRng rng)
        : first(in, hidden, rng.split(1)), second(hidden, out, rng.split(2)) {}

    std::size_t in_dim() const noexcept { return static_cast<std::size_t>(first.w.cols()); }
    std::size_t out_dim() const noexcept { return static_cast<std::size_t>(second.w.rows()); }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const {
        Eigen::MatrixXd pre = first.forward(x);
        Eigen::MatrixXd out = second.forward(pre.cwiseMax(0.0));
        if (cache) {
            cache->input = x;
            cache->pre = std::move(pre);
        }
        return out;
    }

    Grad zero_grad() const {
        return {Eigen::MatrixXd::Zero(first.w.rows(), first.w.cols()), Eigen::MatrixXd::Zero(second.w.rows(), second.w.cols()),
                Eigen::VectorXd::Zero(first.b.size()), Eigen::VectorXd::Zero(second.b.size())};
    }

    // Accumulates parameter gradients; returns d(loss)/d(input).
    Eigen::MatrixXd backward(const Cache& c, const Eigen::MatrixXd& d_out, Grad& g) const {
        const Eigen::MatrixXd act = c.pre.cwiseMax(0.0);
        g.w2.noalias() += d_out.transpose() * act;
        g.b2 += d_out.colwise().sum().transpose();
        Eigen::MatrixXd d_pre = (d_out * second.w).cwiseProduct((c.pre.array() > 0.0).cast<double>().matrix());
        g.w1.noalias() += d_pre.transpose() * c.input;
        g.b1 += d_pre.colwise().sum().transpose();
        return d_pre * first.w;
    }

    void apply(const Grad& g, double lr, double weight_decay) {
        first.w -= lr * (g.w1 + weight_decay * first.w);
        second.w -= lr * (g.w2 + weight_decay * second.w);
        first.b -= lr * g.b1;
        second.b -= lr * g.b2;
    }

    void hash_into(Fnv1a64& h) const {
        for (const auto* m : {&first.w, &second.w})
            h.update(std::as_bytes(std::span<const double>(m->data(), static_cast<std::size_t>(m->size()))));
        for (const auto* v : {&first.b, &second.b})
            h.update(std::as_bytes(std::span<const double>(v->data(), static_cast<std::size_t>(v->size()))));
    }

    bool operator==(const TwoLayer& o) const {
        return first.w == o.first.w && first.b == o.first.b && second.w == o.second.w && second.b == o.second.b;
    }
};

struct ModelDims {
    std::size_t hidden_dim = 64;
    std::size_t repr_dim = 64;
    std::size_t proj_dim = 32;
};

// f_image (shared by both views), f_manifest, shared projector, temperature.
struct ToyModel {
    TwoLayer image;
    TwoLayer manifest;
    TwoLayer projector;
    Temperature temperature;
    bool manifest_trained = false;

    static ToyModel init(std::size_t feature_dim, std::size_t n_bits, const ModelDims& dims, std::uint64_t seed,
                         double tau = 0.7) {
        const SamplerRng rng = SamplerRng(seed).split(0x494e4954ULL);
        ToyModel m;
        m.image = TwoLayer(feature_dim, dims.hidden_dim, dims.repr_dim, rng.split(1));
        m.manifest = TwoLayer(n_bits, dims.hidden_dim, dims.repr_dim, rng.split(2));
        m.projector = TwoLayer(dims.repr_dim, dims.hidden_dim, dims.proj_dim, rng.split(3));
        m.temperature = Temperature(tau);
        return m;
    }

    std::uint64_t parameter_hash() const {
        Fnv1a64 h;
        image.hash_into(h);
        manifest.hash_into(h);
        projector.hash_into(h);
        h.update_pod(temperature.log_tau());
        return h.digest();
    }

    bool operator==(const ToyModel& o) const {
        return image == o.image && manifest == o.manifest && projector == o.projector &&
               temperature.log_tau() == o.temperature.log_tau();
    }
};

// ---------------------------------------------------------------------------
// Pretraining

enum class Scenario { unimodal, multimodal };

inline const char* to_string(Scenario s) { return s == Scenario::multimodal ? "multi" : "uni"; }

inline Scenario scenario_from_string(const std::string& s) {
    if (s == "uni" || s == "unimodal") return Scenario::unimodal;
    if (s == "multi" || s == "multimodal") return Scenario::multimodal;
    throw InvalidArgument("unknown scenario '" + s + "' (expected uni or multi)");
}

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t warmup_steps = 100;
    double lr_peak = 0.1;
    double lr_min = 1e-4;
    std::size_t batch_size = 64;
    double weight_decay = 1e-4;
    double manif_dropout_p = 0.5;
    std::size_t log_every = 50;
    ModelDims dims{};
    SamplerConfig sampler{};

    void validate() const {
        if (steps == 0 || warmup_steps >= steps) throw InvalidArgument("train config: need steps > warmup_steps");
        if (!(lr_min >= 0.0) || !(lr_peak >= 0.0) || lr_min > lr_peak)
            throw InvalidArgument("train config: need 0 <= lr_min <= lr_peak");
        if (batch_size < 2) throw InvalidArgument("train config: batch_size must be at least 2");
        if (!(manif_dropout_p >= 0.0 && manif_dropout_p < 1.0))
            throw InvalidArgument("train config: manif_dropout_p must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw InvalidArgument("train config: weight_decay must be >= 0");
    }
};

// Linear warmup to the peak, then cosine decay to lr_min at the last step.
inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
    if (step < cfg.warmup_steps)
        return cfg.lr_peak * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    const double span = static_cast<double>(std::max<std::size_t>(1, cfg.steps - 1 - cfg.warmup_steps));
    const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(std::acos(-1.0) * t));
}

struct LossRecord {
    std::size_t step = 0;
    double l_uni = 0.0;
    double l_M = 0.0;
    double l_multi = 0.0;
    double tau = 0.0;
};

inline nlohmann::ordered_json to_json(const LossRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["l_uni"] = r.l_uni;
    j["l_M"] = r.l_M;
    j["l_multi"] = r.l_multi;
    j["tau"] = r.tau;
    return j;
}

struct TrainResult {
    ToyModel model;
    std::vector<LossRecord> log;
};

// The sampler population: training instances, their manifestations and index.
struct TrainPool {
    std::vector<std::size_t> positions;  // into SyntheticData
    ManifestDataset manifestations;
    HammingIndex index;

    TrainPool(const SyntheticData& data, std::vector<std::size_t> pos)
        : positions(std::move(pos)), manifestations(data.manifestations.subset(positions)),
          index(HammingIndex::build(manifestations)) {}
};

using StepHook = std::function<void(std::size_t step, const ToyModel&)>;

inline TrainResult pretrain(ToyModel model, const SyntheticData& data, const TrainPool& pool, SamplerKind sampler,
                            Scenario scenario, const TrainConfig& cfg, std::uint64_t seed,
                            const StepHook& hook = nullptr) {
    cfg.validate();
    SamplerConfig scfg = cfg.sampler;
    scfg.kind = sampler;
    scfg.batch_size = cfg.batch_size;
    const SamplerRng root(seed);
    EpochSampler batches(&pool.index, pool.manifestations, scfg, root.split(0x53414d50ULL).key());
    const SamplerRng dropout_root = root.split(0x44524f50ULL);
    const bool multi = scenario == Scenario::multimodal;
    const double keep = 1.0 - cfg.manif_dropout_p;

    TrainResult result;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const Batch batch = batches.next();
        std::vector<std::size_t> rows;
        for (auto local : batch.instances()) rows.push_back(pool.positions[local]);
        const auto b = static_cast<Eigen::Index>(rows.size());

        Eigen::MatrixXd x_img(2 * b, data.cc.cols());
        for (Eigen::Index r = 0; r < b; ++r) {
            x_img.row(r) = data.cc.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
            x_img.row(b + r) = data.mlo.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
        }
        TwoLayer::Cache c_img, c_man, c_proj;
        Eigen::MatrixXd y_img = model.image.forward(x_img, &c_img);

        Eigen::MatrixXd mask;
        Eigen::MatrixXd y_all = y_img;
        if (multi) {
            Eigen::MatrixXd y_man = model.manifest.forward(data.bits_matrix(rows), &c_man);
            auto rng = dropout_root.split(step);
            mask.resize(y_man.rows(), y_man.cols());
            for (Eigen::Index r = 0; r < mask.rows(); ++r)
                for (Eigen::Index c = 0; c < mask.cols(); ++c) mask(r, c) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
            y_all.conservativeResize(3 * b, Eigen::NoChange);
            y_all.bottomRows(b) = y_man.cwiseProduct(mask);
        }

        ProjectionSet z;
        z.vectors = model.projector.forward(y_all, &c_proj);
        const Modality order[3] = {Modality::image_cc, Modality::image_mlo, Modality::manifestation};
        for (int blk = 0; blk < (multi ? 3 : 2); ++blk)
            for (Eigen::Index r = 0; r < b; ++r) {
                z.modality.push_back(order[blk]);
                z.instance.push_back(static_cast<std::uint32_t>(r));
            }

        LossGradients g;
        try {
            g = gradients(z, model.temperature.tau(), multi ? LossKind::multimodal : LossKind::unimodal);
        } catch (const ZeroNorm& e) {
            throw DivergedLoss("degenerate projections at step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(g.loss) || !g.d_vectors.allFinite())
            throw DivergedLoss("non-finite loss at step " + std::to_string(step));

        if (cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
            result.log.push_back({step, g.parts.l_uni, g.parts.l_M, g.parts.l_multi, model.temperature.tau()});

        auto g_proj = model.projector.zero_grad();
        auto g_img = model.image.zero_grad();
        const Eigen::MatrixXd d_y = model.projector.backward(c_proj, g.d_vectors, g_proj);
        model.image.backward(c_img, d_y.topRows(2 * b), g_img);
        const double lr = learning_rate(cfg, step);
        if (multi) {
            auto g_man = model.manifest.zero_grad();
            model.manifest.backward(c_man, d_y.bottomRows(b).cwiseProduct(mask), g_man);
            model.manifest.apply(g_man, lr, cfg.weight_decay);
        }
        model.projector.apply(g_proj, lr, cfg.weight_decay);
        model.image.apply(g_img, lr, cfg.weight_decay);
        model.temperature.step(g.d_log_tau, lr);
        if (hook) hook(step, model);
    }
    if (multi) model.manifest_trained = true;
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

// Probability that a random positive outscores a random negative, ties
// counting one half; computed from average ranks.
inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw LengthMismatch("roc_auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                rank_sum += avg_rank;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw SingleClassSplit("roc_auc needs both classes");
    const double p = static_cast<double>(n_pos);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

struct LogisticModel {
    Eigen::VectorXd mean, scale;  // feature standardization
    Eigen::VectorXd w;
    double bias = 0.0;
    std::size_t iterations = 0;

    Eigen::VectorXd decision(const Eigen::MatrixXd& x) const {
        const Eigen::MatrixXd xs = (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
        return (xs * w).array() + bias;
    }
};

// Minimizes sum of log-losses + (l2 / 2) |w|^2 (intercept unpenalized) by Newton steps.
inline LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, double l2 = 3.16,
                                  std::size_t max_iter = 1000) {
    if (static_cast<std::size_t>(x.rows()) != y.size()) throw LengthMismatch("fit_logistic: rows and labels differ");
    const bool has_pos = std::find(y.begin(), y.end(), 1) != y.end();
    const bool has_neg = std::find(y.begin(), y.end(), 0) != y.end();
    if (!has_pos || !has_neg) throw SingleClassSplit("probe training split holds a single class");

    LogisticModel m;
    const auto n = x.rows();
    const auto d = x.cols();
    m.mean = x.colwise().mean().transpose();
    m.scale = ((x.rowwise() - m.mean.transpose()).array().square().colwise().sum() / static_cast<double>(n)).sqrt().transpose();
    for (Eigen::Index c = 0; c < d; ++c)
        if (!(m.scale[c] > 1e-12)) m.scale[c] = 1.0;

    Eigen::MatrixXd a(n, d + 1);
    a.leftCols(d) = (x.rowwise() - m.mean.transpose()).array().rowwise() / m.scale.transpose().array();
    a.col(d).setOnes();
    Eigen::VectorXd target(n);
    for (Eigen::Index i = 0; i < n; ++i) target[i] = y[static_cast<std::size_t>(i)];
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(d + 1, l2);
    penalty[d] = 0.0;

    for (m.iterations = 0; m.iterations < max_iter; ++m.iterations) {
        const Eigen::VectorXd p = (1.0 + (-(a * theta)).array().exp()).inverse().matrix();
        const Eigen::VectorXd grad = a.transpose() * (p - target) + penalty.cwiseProduct(theta);
        const Eigen::VectorXd curv = p.array() * (1.0 - p.array());
        Eigen::MatrixXd hess = a.transpose() * curv.asDiagonal() * a;
        hess.diagonal() += penalty;
        hess.diagonal().array() += 1e-10;
        const Eigen::VectorXd delta = hess.ldlt().solve(grad);
        theta -= delta;
        if (delta.lpNorm<Eigen::Infinity>() < 1e-10) {
            ++m.iterations;
            break;
        }
    }
    m.w = theta.head(d);
    m.bias = theta[d];
    return m;
}

// Frozen representations y for a set of instances: mean of the two views.
inline Eigen::MatrixXd image_representations(const ToyModel& model, const SyntheticData& data,
                                             std::span<const std::size_t> rows) {
    Eigen::MatrixXd cc(static_cast<Eigen::Index>(rows.size()), data.cc.cols());
    Eigen::MatrixXd mlo(cc.rows(), data.mlo.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        cc.row(static_cast<Eigen::Index>(r)) = data.cc.row(static_cast<Eigen::Index>(rows[r]));
        mlo.row(static_cast<Eigen::Index>(r)) = data.mlo.row(static_cast<Eigen::Index>(rows[r]));
    }
    return 0.5 * (model.image.forward(cc) + model.image.forward(mlo));
}

inline std::vector<std::uint8_t> gather_labels(const SyntheticData& data, std::span<const std::size_t> rows) {
    std::vector<std::uint8_t> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(data.labels[r]);
    return out;
}

// Fits the probe on `train` rows and returns the AUC on `test` rows.
inline double linear_probe(const ToyModel& model, const SyntheticData& data, std::span<const std::size_t> train,
                           std::span<const std::size_t> test, double l2 = 3.16, std::size_t max_iter = 1000) {
    const auto y_test = gather_labels(data, test);
    const bool has_pos = std::find(y_test.begin(), y_test.end(), 1) != y_test.end();
    const bool has_neg = std::find(y_test.begin(), y_test.end(), 0) != y_test.end();
    if (!has_pos || !has_neg) throw SingleClassSplit("probe test split holds a single class");
    const auto probe = fit_logistic(image_representations(model, data, train), gather_labels(data, train), l2, max_iter);
    const Eigen::VectorXd scores = probe.decision(image_representations(model, data, test));
    return roc_auc(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), y_test);
}

struct AlignmentHistogram {
    double bin_width = 0.1;
    std::vector<std::uint64_t> counts;  // bins over [0, 2]
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::size_t total = 0;
};

// 1 - cos(z_view, z_manifest) for both views of every listed instance.
inline AlignmentHistogram alignment_histogram(const ToyModel& model, const SyntheticData& data,
                                              std::span<const std::size_t> rows, double bin_width = 0.1) {
    if (!model.manifest_trained) throw MissingModality("alignment needs a model pretrained with manifestations");
    AlignmentHistogram h;
    h.bin_width = bin_width;
    h.counts.assign(static_cast<std::size_t>(std::ceil(2.0 / bin_width - 1e-9)), 0);
    if (rows.empty()) return h;
    Eigen::MatrixXd cc(static_cast<Eigen::Index>(rows.size()), data.cc.cols());
    Eigen::MatrixXd mlo(cc.rows(), data.mlo.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        cc.row(static_cast<Eigen::Index>(r)) = data.cc.row(static_cast<Eigen::Index>(rows[r]));
        mlo.row(static_cast<Eigen::Index>(r)) = data.mlo.row(static_cast<Eigen::Index>(rows[r]));
    }
    const Eigen::MatrixXd z_cc = model.projector.forward(model.image.forward(cc));
    const Eigen::MatrixXd z_mlo = model.projector.forward(model.image.forward(mlo));
    const Eigen::MatrixXd z_man = model.projector.forward(model.manifest.forward(data.bits_matrix(rows)));
    double sum = 0.0;
    for (Eigen::Index r = 0; r < z_man.rows(); ++r)
        for (const auto* view : {&z_cc, &z_mlo}) {
            const double dist = 1.0 - cosine_sim(view->row(r).transpose(), z_man.row(r).transpose());
            const auto bin = std::min(h.counts.size() - 1, static_cast<std::size_t>(std::max(0.0, dist) / bin_width));
            ++h.counts[bin];
            sum += dist;
            ++h.total;
        }
    h.mean = sum / static_cast<double>(h.total);
    return h;
}

// ---------------------------------------------------------------------------
// Experiment grid

struct ExperimentConfig {
    SyntheticSpec data{};
    TrainConfig train{};
    std::vector<SamplerKind> samplers{SamplerKind::maninegs, SamplerKind::uniform};
    std::vector<Scenario> scenarios{Scenario::unimodal, Scenario::multimodal};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::size_t threads = 0;  // 0: hardware concurrency
};

struct RunResult {
    SamplerKind sampler = SamplerKind::maninegs;
    Scenario scenario = Scenario::unimodal;
    std::uint64_t seed = 0;
    double auc = 0.0;
    double alignment_mean = std::numeric_limits<double>::quiet_NaN();
    double final_tau = 0.0;
    std::string parameter_hash;
    std::optional<AlignmentHistogram> alignment;
    std::vector<LossRecord> log;
};

// Initialization depends on the seed only, so every sampler/scenario cell of
// one seed starts from the same weights.
inline RunResult run_single(const SyntheticData& data, const Split& split, const TrainPool& pool, SamplerKind sampler,
                            Scenario scenario, const TrainConfig& cfg, std::uint64_t seed) {
    const ToyModel init = ToyModel::init(static_cast<std::size_t>(data.cc.cols()), data.manifestations.schema().size(),
                                         cfg.dims, seed);
    auto trained = pretrain(init, data, pool, sampler, scenario, cfg, seed);
    RunResult r;
    r.sampler = sampler;
    r.scenario = scenario;
    r.seed = seed;
    r.auc = linear_probe(trained.model, data, split.train, split.test);
    if (scenario == Scenario::multimodal) {
        r.alignment = alignment_histogram(trained.model, data, split.test);
        r.alignment_mean = r.alignment->mean;
    }
    r.final_tau = trained.model.temperature.tau();
    r.parameter_hash = hex64(trained.model.parameter_hash());
    r.log = std::move(trained.log);
    return r;
}

// Cells run on worker threads; results come back in grid order
// (seed-major, then scenario, then sampler) whatever the scheduling.
inline std::vector<RunResult> run_experiment(const ExperimentConfig& cfg) {
    const SyntheticData data = generate_synthetic(cfg.data);
    const Split split = split_instances(data.size(), cfg.data.data_seed);
    const TrainPool pool(data, split.train);

    struct Cell {
        SamplerKind sampler;
        Scenario scenario;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (auto seed : cfg.seeds)
        for (auto scenario : cfg.scenarios)
            for (auto sampler : cfg.samplers) cells.push_back({sampler, scenario, seed});

    std::vector<RunResult> results(cells.size());
    std::vector<std::exception_ptr> errors(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
            try {
                results[i] = run_single(data, split, pool, cells[i].sampler, cells[i].scenario, cfg.train, cells[i].seed);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::size_t n_threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
    n_threads = std::min(n_threads, cells.size());
    std::vector<std::thread> pool_threads;
    for (std::size_t t = 1; t < n_threads; ++t) pool_threads.emplace_back(worker);
    worker();
    for (auto& t : pool_threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

struct CellSummary {
    SamplerKind sampler;
    Scenario scenario;
    std::size_t n_runs = 0;
    double auc_mean = 0.0;
    double auc_std = 0.0;  // unbiased (n - 1)
    double alignment_mean = std::numeric_limits<double>::quiet_NaN();
    double alignment_std = std::numeric_limits<double>::quiet_NaN();
};

inline std::pair<double, double> mean_and_sample_std(std::span<const double> v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, std::numeric_limits<double>::quiet_NaN()};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

// One row per (sampler, scenario) present, in first-seen order.
inline std::vector<CellSummary> summarize(std::span<const RunResult> runs) {
    std::vector<CellSummary> out;
    for (const auto& r : runs) {
        const bool seen = std::any_of(out.begin(), out.end(), [&](const CellSummary& c) {
            return c.sampler == r.sampler && c.scenario == r.scenario;
        });
        if (seen) continue;
        CellSummary c{r.sampler, r.scenario};
        std::vector<double> auc, align;
        for (const auto& q : runs)
            if (q.sampler == r.sampler && q.scenario == r.scenario) {
                auc.push_back(q.auc);
                if (std::isfinite(q.alignment_mean)) align.push_back(q.alignment_mean);
            }
        c.n_runs = auc.size();
        std::tie(c.auc_mean, c.auc_std) = mean_and_sample_std(auc);
        std::tie(c.alignment_mean, c.alignment_std) = mean_and_sample_std(align);
        out.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json to_json(const SyntheticSpec& s) {
    nlohmann::ordered_json j;
    j["n_instances"] = s.n_instances;
    j["latent_dim"] = s.latent_dim;
    j["nuisance_dim"] = s.nuisance_dim;
    j["n_manif_bits"] = s.n_manif_bits;
    j["trait_flip_noise"] = s.trait_flip_noise;
    j["feature_dim"] = s.feature_dim;
    j["view_noise_sigma"] = s.view_noise_sigma;
    j["label_threshold"] = s.label_threshold;
    j["correlation_mode"] = to_string(s.correlation_mode);
    j["data_seed"] = s.data_seed;
    return j;
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    s.n_instances = j.value("n_instances", s.n_instances);
    s.latent_dim = j.value("latent_dim", s.latent_dim);
    s.nuisance_dim = j.value("nuisance_dim", s.nuisance_dim);
    s.n_manif_bits = j.value("n_manif_bits", s.n_manif_bits);
    s.trait_flip_noise = j.value("trait_flip_noise", s.trait_flip_noise);
    s.feature_dim = j.value("feature_dim", s.feature_dim);
    s.view_noise_sigma = j.value("view_noise_sigma", s.view_noise_sigma);
    s.label_threshold = j.value("label_threshold", s.label_threshold);
    if (j.contains("correlation_mode")) s.correlation_mode = correlation_mode_from_string(j.at("correlation_mode"));
    s.data_seed = j.value("data_seed", s.data_seed);
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["steps"] = c.steps;
    j["warmup_steps"] = c.warmup_steps;
    j["lr_peak"] = c.lr_peak;
    j["lr_min"] = c.lr_min;
    j["batch_size"] = c.batch_size;
    j["weight_decay"] = c.weight_decay;
    j["manif_dropout_p"] = c.manif_dropout_p;
    j["log_every"] = c.log_every;
    j["hidden_dim"] = c.dims.hidden_dim;
    j["repr_dim"] = c.dims.repr_dim;
    j["proj_dim"] = c.dims.proj_dim;
    j["sigma"] = c.sampler.sigma;
    j["a"] = c.sampler.a;
    if (c.sampler.b) j["b"] = *c.sampler.b;
    j["mu_max"] = c.sampler.schedule.mu_max;
    j["mu_min"] = c.sampler.schedule.mu_min;
    j["anneal_steps"] = c.sampler.schedule.steps_to_min;
    j["empty_bucket"] = c.sampler.policy == EmptyBucketPolicy::nearest ? "nearest" : "renormalize";
    j["uniform_dedup"] = c.sampler.uniform_dedup;
    return j;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.manif_dropout_p = j.value("manif_dropout_p", c.manif_dropout_p);
    c.log_every = j.value("log_every", c.log_every);
    c.dims.hidden_dim = j.value("hidden_dim", c.dims.hidden_dim);
    c.dims.repr_dim = j.value("repr_dim", c.dims.repr_dim);
    c.dims.proj_dim = j.value("proj_dim", c.dims.proj_dim);
    c.sampler.sigma = j.value("sigma", c.sampler.sigma);
    c.sampler.a = j.value("a", c.sampler.a);
    if (j.contains("b")) c.sampler.b = j.at("b").get<long>();
    c.sampler.schedule.mu_max = j.value("mu_max", c.sampler.schedule.mu_max);
    c.sampler.schedule.mu_min = j.value("mu_min", c.sampler.schedule.mu_min);
    c.sampler.schedule.steps_to_min = j.value("anneal_steps", c.sampler.schedule.steps_to_min);
    if (j.contains("empty_bucket")) {
        const std::string p = j.at("empty_bucket");
        if (p == "nearest") c.sampler.policy = EmptyBucketPolicy::nearest;
        else if (p == "renormalize") c.sampler.policy = EmptyBucketPolicy::renormalize;
        else throw InvalidArgument("unknown empty_bucket policy '" + p + "'");
    }
    c.sampler.uniform_dedup = j.value("uniform_dedup", c.sampler.uniform_dedup);
}

inline nlohmann::ordered_json to_json(const RunResult& r) {
    nlohmann::ordered_json j;
    j["sampler"] = to_string(r.sampler);
    j["scenario"] = to_string(r.scenario);
    j["seed"] = r.seed;
    j["auc"] = r.auc;
    j["alignment_mean"] = std::isfinite(r.alignment_mean) ? nlohmann::ordered_json(r.alignment_mean) : nullptr;
    j["final_tau"] = r.final_tau;
    j["parameter_hash"] = r.parameter_hash;
    if (r.alignment) {
        j["alignment_bin_width"] = r.alignment->bin_width;
        j["alignment_counts"] = r.alignment->counts;
    }
    auto& log = j["loss_log"] = nlohmann::ordered_json::array();
    for (const auto& rec : r.log) log.push_back(to_json(rec));
    return j;
}

inline RunResult run_from_json(const nlohmann::json& j) {
    RunResult r;
    r.sampler = sampler_kind_from_string(j.at("sampler"));
    r.scenario = scenario_from_string(j.at("scenario"));
    r.seed = j.at("seed");
    r.auc = j.at("auc");
    r.alignment_mean = j.at("alignment_mean").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                        : j.at("alignment_mean").get<double>();
    r.final_tau = j.at("final_tau");
    r.parameter_hash = j.value("parameter_hash", "");
    if (j.contains("alignment_counts")) {
        AlignmentHistogram h;
        h.bin_width = j.at("alignment_bin_width");
        h.counts = j.at("alignment_counts").get<std::vector<std::uint64_t>>();
        h.mean = r.alignment_mean;
        for (auto c : h.counts) h.total += c;
        r.alignment = h;
    }
    if (j.contains("loss_log"))
        for (const auto& e : j.at("loss_log"))
            r.log.push_back({e.at("step"), e.at("l_uni"), e.at("l_M"), e.at("l_multi"), e.at("tau")});
    return r;
}

}  // namespace maninex

#pragma once
// Manifestation-guided negative sampling.
//
// A batch is built around an anchor: batch_size - 1 Hamming distances are
// drawn (with replacement) from a truncated Gaussian discretized onto the
// integers [a, b]; for each distance one instance is picked uniformly from the
// anchor's bucket at that distance. Members whose manifestation equals the
// anchor's or an earlier member's are then dropped (no refill). The mean of
// the distance law is annealed over training steps so negatives get harder.
//
// The uniform baseline draws batch_size - 1 other instances without
// replacement and, by default, does not deduplicate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "maninex/errors.hpp"
#include "maninex/hamming_index.hpp"
#include "maninex/manifest.hpp"
#include "maninex/rng.hpp"

namespace maninex {

struct TruncGaussSpec {
    double mu = 11.0;
    double sigma = 3.0;
    long a = 1;
    long b = 18;
};

// Probability mass over consecutive integers first, first+1, ...
struct DistanceLaw {
    long first = 0;
    std::vector<double> probs;

    long last() const noexcept { return first + static_cast<long>(probs.size()) - 1; }
    double at(long d) const noexcept {
        if (d < first || d > last()) return 0.0;
        return probs[static_cast<std::size_t>(d - first)];
    }
    double mean() const noexcept {
        double m = 0.0;
        for (std::size_t k = 0; k < probs.size(); ++k) m += probs[k] * static_cast<double>(first + static_cast<long>(k));
        return m;
    }
};

// p(x) proportional to exp(-(x - mu)^2 / (2 sigma^2)) on integers a..b. The
// continuous normalizer of the truncated density cancels after normalization.
inline DistanceLaw trunc_gauss_pmf(const TruncGaussSpec& spec) {
    if (spec.a > spec.b)
        throw DegenerateSupport("truncated Gaussian support is empty: a=" + std::to_string(spec.a) +
                                " > b=" + std::to_string(spec.b));
    if (!(spec.sigma > 0.0) || !std::isfinite(spec.sigma))
        throw InvalidArgument("truncated Gaussian sigma must be positive and finite");
    if (!std::isfinite(spec.mu)) throw InvalidArgument("truncated Gaussian mu must be finite");

    DistanceLaw law;
    law.first = spec.a;
    const auto n = static_cast<std::size_t>(spec.b - spec.a + 1);
    law.probs.resize(n);
    std::vector<double> expo(n);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
        const double z = (static_cast<double>(spec.a + static_cast<long>(k)) - spec.mu) / spec.sigma;
        expo[k] = -0.5 * z * z;
        top = std::max(top, expo[k]);
    }
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) total += (law.probs[k] = std::exp(expo[k] - top));
    for (auto& p : law.probs) p /= total;
    return law;
}

// Inverse-CDF draw.
inline long sample_distance(const DistanceLaw& law, SamplerRng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < law.probs.size(); ++k) {
        acc += law.probs[k];
        if (u < acc) return law.first + static_cast<long>(k);
    }
    // u landed in the rounding slack above the accumulated total
    for (std::size_t k = law.probs.size(); k-- > 0;)
        if (law.probs[k] > 0.0) return law.first + static_cast<long>(k);
    return law.last();
}

enum class AnnealShape { linear };

struct AnnealSchedule {
    double mu_max = 11.0;
    double mu_min = 0.0;
    std::size_t steps_to_min = 150;
    AnnealShape shape = AnnealShape::linear;

    static AnnealSchedule constant(double mu) { return {mu, mu, 1, AnnealShape::linear}; }
};

inline double anneal_mu(const AnnealSchedule& s, std::size_t step) {
    if (s.steps_to_min == 0 || step >= s.steps_to_min) return s.mu_min;
    const double frac = static_cast<double>(step) / static_cast<double>(s.steps_to_min);
    return s.mu_max + (s.mu_min - s.mu_max) * frac;
}

struct BatchMember {
    std::uint32_t id = 0;
    std::uint32_t distance = 0;
    bool fallback_used = false;

    bool operator==(const BatchMember&) const = default;
};

struct Batch {
    std::uint64_t step = 0;
    std::uint32_t anchor = 0;
    std::vector<BatchMember> members;
    std::size_t target_size = 0;
    std::size_t n_deduplicated = 0;
    double mu = std::numeric_limits<double>::quiet_NaN();

    // Anchor followed by member ids.
    std::vector<std::uint32_t> instances() const {
        std::vector<std::uint32_t> out;
        out.reserve(members.size() + 1);
        out.push_back(anchor);
        for (const auto& m : members) out.push_back(m.id);
        return out;
    }
    std::size_t size() const noexcept { return members.size() + 1; }
};

// Drops members that share a manifestation with the anchor or with an earlier
// member. Order of survivors is preserved.
inline void deduplicate(Batch& batch, const ManifestDataset& ds) {
    std::unordered_set<DedupKey, DedupKeyHash> seen;
    seen.insert(dedup_key(ds[batch.anchor]));
    std::vector<BatchMember> kept;
    kept.reserve(batch.members.size());
    for (const auto& m : batch.members)
        if (seen.insert(dedup_key(ds[m.id])).second) kept.push_back(m);
    batch.n_deduplicated += batch.members.size() - kept.size();
    batch.members = std::move(kept);
}

enum class EmptyBucketPolicy {
    nearest,      // walk to the closest nonempty distance, ties toward the smaller one
    renormalize,  // restrict the law to nonempty distances in [a, b] before drawing
};

namespace detail {

inline std::optional<long> nearest_nonempty(const HammingIndex& idx, std::size_t anchor, long d) {
    const long lo = 1;
    const long hi = static_cast<long>(idx.n_bits());
    d = std::clamp(d, lo, hi);
    for (long off = 0; off <= hi - lo; ++off) {
        if (d - off >= lo && idx.bucket_size(anchor, d - off) > 0) return d - off;
        if (d + off <= hi && idx.bucket_size(anchor, d + off) > 0) return d + off;
    }
    return std::nullopt;
}

}  // namespace detail

inline Batch sample_batch_maninegs(const HammingIndex& idx, const ManifestDataset& ds, std::uint32_t anchor,
                                   const TruncGaussSpec& spec, std::size_t size, SamplerRng& rng,
                                   EmptyBucketPolicy policy = EmptyBucketPolicy::nearest) {
    if (size < 2) throw InvalidArgument("batch size must be at least 2");
    if (anchor >= idx.size())
        throw UnknownAnchor("anchor " + std::to_string(anchor) + " not in index of size " + std::to_string(idx.size()));
    if (idx.bucket_size(anchor, 0) == idx.size() - 1)
        throw ExhaustedCandidates("no instance differs from anchor " + std::to_string(anchor) +
                                  " (fewer than 2 distinct manifestations)");

    DistanceLaw law = trunc_gauss_pmf(spec);
    if (policy == EmptyBucketPolicy::renormalize) {
        DistanceLaw masked = law;
        double total = 0.0;
        for (std::size_t k = 0; k < masked.probs.size(); ++k) {
            const long d = masked.first + static_cast<long>(k);
            if (d < 1 || idx.bucket_size(anchor, d) == 0) masked.probs[k] = 0.0;
            total += masked.probs[k];
        }
        if (total > 0.0) {
            for (auto& p : masked.probs) p /= total;
            law = std::move(masked);
        }
    }

    std::vector<long> draws(size - 1);
    for (auto& d : draws) d = sample_distance(law, rng);

    Batch batch;
    batch.anchor = anchor;
    batch.target_size = size;
    batch.mu = spec.mu;
    batch.members.reserve(draws.size());
    for (long d : draws) {
        long realized = d;
        bool fallback = false;
        if (d < 1 || idx.bucket_size(anchor, d) == 0) {
            auto near = detail::nearest_nonempty(idx, anchor, d);
            if (!near) throw ExhaustedCandidates("anchor " + std::to_string(anchor) + " has no candidates");
            realized = *near;
            fallback = true;
        }
        const auto bucket = idx.candidates_at(anchor, realized);
        const auto pick = bucket[rng.below(bucket.size())];
        batch.members.push_back({pick, static_cast<std::uint32_t>(realized), fallback});
    }
    deduplicate(batch, ds);
    return batch;
}

inline Batch sample_batch_uniform(const ManifestDataset& ds, std::uint32_t anchor, std::size_t size, SamplerRng& rng,
                                  bool dedup = false) {
    const std::size_t n = ds.size();
    if (anchor >= n) throw UnknownAnchor("anchor " + std::to_string(anchor) + " out of range");
    if (size < 2) throw InvalidArgument("batch size must be at least 2");
    if (size > n)
        throw SizeExceedsDataset("batch size " + std::to_string(size) + " exceeds dataset size " + std::to_string(n));

    // Floyd's algorithm over the n - 1 positions that skip the anchor.
    const std::size_t k = size - 1;
    const std::size_t pool = n - 1;
    std::unordered_set<std::size_t> chosen;
    std::vector<std::size_t> order;
    order.reserve(k);
    for (std::size_t j = pool - k; j < pool; ++j) {
        const auto t = static_cast<std::size_t>(rng.below(j + 1));
        const std::size_t pick = chosen.count(t) ? j : t;
        chosen.insert(pick);
        order.push_back(pick);
    }

    Batch batch;
    batch.anchor = anchor;
    batch.target_size = size;
    batch.members.reserve(k);
    for (auto slot : order) {
        const auto id = static_cast<std::uint32_t>(slot >= anchor ? slot + 1 : slot);
        batch.members.push_back({id, static_cast<std::uint32_t>(hamming(ds[anchor], ds[id])), false});
    }
    if (dedup) deduplicate(batch, ds);
    return batch;
}

enum class SamplerKind { maninegs, uniform };

inline const char* to_string(SamplerKind k) { return k == SamplerKind::maninegs ? "maninegs" : "uniform"; }

inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "maninegs" || s == "maninex" || s == "maniNeg") return SamplerKind::maninegs;
    if (s == "uniform") return SamplerKind::uniform;
    throw InvalidArgument("unknown sampler '" + s + "' (expected maninegs or uniform)");
}

struct SamplerConfig {
    SamplerKind kind = SamplerKind::maninegs;
    std::size_t batch_size = 64;
    double sigma = 3.0;
    long a = 1;
    std::optional<long> b;  // defaults to the index's d_max_observed
    AnnealSchedule schedule{};
    EmptyBucketPolicy policy = EmptyBucketPolicy::nearest;
    bool uniform_dedup = false;
};

// Visits every anchor once per epoch in a seeded shuffled order. The global
// step counts batches and drives the annealed mean. Each batch draws from its
// own stream keyed by (seed, epoch, ordinal).
class EpochSampler {
public:
    EpochSampler(const HammingIndex* idx, const ManifestDataset& ds, SamplerConfig cfg, std::uint64_t seed)
        : idx_(idx), ds_(&ds), cfg_(std::move(cfg)), root_(seed) {
        if (ds.empty()) throw InvalidArgument("EpochSampler: dataset is empty");
        if (cfg_.kind == SamplerKind::maninegs) {
            if (!idx_) throw InvalidArgument("EpochSampler: the manifestation-guided sampler needs an index");
            idx_->check_compatible(ds);
        }
        order_ = epoch_order(0);
    }

    std::vector<std::uint32_t> epoch_order(std::size_t epoch) const {
        std::vector<std::uint32_t> order(ds_->size());
        for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
        auto rng = root_.split(kShuffleTag, epoch);
        rng.shuffle(std::span<std::uint32_t>(order));
        return order;
    }

    TruncGaussSpec spec_at(std::size_t step) const {
        TruncGaussSpec spec;
        spec.mu = anneal_mu(cfg_.schedule, step);
        spec.sigma = cfg_.sigma;
        spec.a = cfg_.a;
        spec.b = cfg_.b ? *cfg_.b : static_cast<long>(idx_ ? idx_->d_max_observed() : 0);
        return spec;
    }

    Batch next() {
        if (ordinal_ == order_.size()) {
            ++epoch_;
            ordinal_ = 0;
            order_ = epoch_order(epoch_);
        }
        const std::uint32_t anchor = order_[ordinal_];
        auto rng = root_.split(kBatchTag, epoch_).split(ordinal_);
        Batch batch;
        if (cfg_.kind == SamplerKind::maninegs) {
            const auto spec = spec_at(step_);
            batch = sample_batch_maninegs(*idx_, *ds_, anchor, spec, cfg_.batch_size, rng, cfg_.policy);
        } else {
            batch = sample_batch_uniform(*ds_, anchor, cfg_.batch_size, rng, cfg_.uniform_dedup);
        }
        batch.step = step_;
        ++step_;
        ++ordinal_;
        return batch;
    }

    std::vector<Batch> take(std::size_t n) {
        std::vector<Batch> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(next());
        return out;
    }

    std::size_t step() const noexcept { return step_; }
    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batches_per_epoch() const noexcept { return ds_->size(); }
    const SamplerConfig& config() const noexcept { return cfg_; }

private:
    static constexpr std::uint64_t kShuffleTag = 0x5348554646ULL;
    static constexpr std::uint64_t kBatchTag = 0x4241544348ULL;

    const HammingIndex* idx_;
    const ManifestDataset* ds_;
    SamplerConfig cfg_;
    SamplerRng root_;
    std::vector<std::uint32_t> order_;
    std::size_t epoch_ = 0;
    std::size_t ordinal_ = 0;
    std::size_t step_ = 0;
};

struct DistanceHistogram {
    std::vector<std::uint64_t> counts;  // counts[d]

    void add(std::size_t d, std::uint64_t n = 1) {
        if (d >= counts.size()) counts.resize(d + 1, 0);
        counts[d] += n;
    }
    std::uint64_t total() const noexcept {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
    std::uint64_t at(std::size_t d) const noexcept { return d < counts.size() ? counts[d] : 0; }
    double mean() const noexcept {
        const auto t = total();
        if (t == 0) return std::numeric_limits<double>::quiet_NaN();
        double s = 0.0;
        for (std::size_t d = 0; d < counts.size(); ++d) s += static_cast<double>(d) * static_cast<double>(counts[d]);
        return s / static_cast<double>(t);
    }
    std::vector<double> frequencies() const {
        std::vector<double> f(counts.size(), 0.0);
        const auto t = static_cast<double>(total());
        if (t > 0)
            for (std::size_t d = 0; d < counts.size(); ++d) f[d] = static_cast<double>(counts[d]) / t;
        return f;
    }
};

// Anchor-to-member distances as recorded in the batches.
inline DistanceHistogram anchor_distance_histogram(std::span<const Batch> batches) {
    DistanceHistogram h;
    for (const auto& b : batches)
        for (const auto& m : b.members) h.add(m.distance);
    return h;
}

// Distances over every unordered pair of batch instances, anchor included.
inline DistanceHistogram pairwise_distance_histogram(std::span<const Batch> batches, const ManifestDataset& ds) {
    DistanceHistogram h;
    for (const auto& b : batches) {
        const auto ids = b.instances();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = i + 1; j < ids.size(); ++j) h.add(hamming(ds[ids[i]], ds[ids[j]]));
    }
    return h;
}

// Distance below which a Binomial(n, p_m) anchor-to-negative distance is
// practically never observed under uniform sampling: mean minus three
// standard deviations of the Gaussian approximation. Not clamped at zero.
inline double scarcity_lower_bound(long n, double p_m) {
    if (n < 1) throw InvalidArgument("scarcity_lower_bound: n must be >= 1");
    if (!(p_m > 0.0 && p_m < 1.0)) throw InvalidArgument("scarcity_lower_bound: p_m must lie in (0, 1)");
    const double nn = static_cast<double>(n);
    return nn * p_m - 3.0 * std::sqrt(nn * p_m * (1.0 - p_m));
}

inline nlohmann::ordered_json batch_to_json(const Batch& b) {
    nlohmann::ordered_json j;
    j["step"] = b.step;
    j["anchor"] = b.anchor;
    auto members = nlohmann::ordered_json::array();
    for (const auto& m : b.members) {
        nlohmann::ordered_json e;
        e["id"] = m.id;
        e["d"] = m.distance;
        e["fallback"] = m.fallback_used;
        members.push_back(std::move(e));
    }
    j["members"] = std::move(members);
    return j;
}

// One JSON object per line: {step, anchor, members:[{id, d, fallback}]}.
inline void write_batch_log(std::ostream& out, std::span<const Batch> batches) {
    for (const auto& b : batches) out << batch_to_json(b).dump() << '\n';
}

struct DemoCurve {
    double mu = 0.0;
    std::size_t n_batches = 0;
    DistanceHistogram anchor;
    DistanceHistogram pairwise;
};

// Fixed-mean sampling sweep: for each mu, draw batches until `draws` negative
// distances have been sampled and histogram both views of the batch.
inline std::vector<DemoCurve> sampling_demo(const HammingIndex& idx, const ManifestDataset& ds,
                                            std::span<const double> mus, const SamplerConfig& base,
                                            std::size_t draws, std::uint64_t seed) {
    std::vector<DemoCurve> out;
    const std::size_t per_batch = base.batch_size - 1;
    for (std::size_t k = 0; k < mus.size(); ++k) {
        SamplerConfig cfg = base;
        cfg.kind = SamplerKind::maninegs;
        cfg.schedule = AnnealSchedule::constant(mus[k]);
        EpochSampler sampler(&idx, ds, cfg, seed);
        DemoCurve c;
        c.mu = mus[k];
        c.n_batches = draws == 0 ? 0 : (draws + per_batch - 1) / per_batch;
        for (std::size_t i = 0; i < c.n_batches; ++i) {
            const Batch b = sampler.next();
            const std::span<const Batch> one(&b, 1);
            for (const auto& m : b.members) c.anchor.add(m.distance);
            const auto p = pairwise_distance_histogram(one, ds);
            for (std::size_t d = 0; d < p.counts.size(); ++d)
                if (p.counts[d]) c.pairwise.add(d, p.counts[d]);
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace maninex

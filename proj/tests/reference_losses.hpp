#pragma once
// Naive double-loop references for the contrastive losses, kept free of the
// vectorized code paths they check.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "maninex/contrastive.hpp"
#include "maninex/rng.hpp"

namespace maninex::testing {

inline Eigen::MatrixXd random_rows(std::size_t rows, std::size_t dim, SamplerRng& rng) {
    Eigen::MatrixXd m(rows, dim);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal();
    return m;
}

inline ProjectionSet plain_rows(const Eigen::MatrixXd& v) {
    ProjectionSet p;
    p.vectors = v;
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        p.modality.push_back(Modality::image_cc);
        p.instance.push_back(static_cast<std::uint32_t>(r));
    }
    return p;
}

// cc rows first, then mlo, then (optionally) manifestation, instance ids 0..n-1.
inline ProjectionSet paired_batch(std::size_t n, std::size_t dim, bool with_manifest, SamplerRng& rng) {
    const std::size_t blocks = with_manifest ? 3 : 2;
    ProjectionSet p;
    p.vectors = random_rows(n * blocks, dim, rng);
    const Modality order[3] = {Modality::image_cc, Modality::image_mlo, Modality::manifestation};
    for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            p.modality.push_back(order[b]);
            p.instance.push_back(static_cast<std::uint32_t>(i));
        }
    return p;
}

inline double cos_ref(const ProjectionSet& p, std::size_t a, std::size_t b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (Eigen::Index c = 0; c < p.vectors.cols(); ++c) {
        dot += p.vectors(a, c) * p.vectors(b, c);
        na += p.vectors(a, c) * p.vectors(a, c);
        nb += p.vectors(b, c) * p.vectors(b, c);
    }
    return dot / std::sqrt(na * nb);
}

inline double cross_entropy_ref(const ProjectionSet& p, std::size_t i, std::size_t j,
                                const std::vector<std::size_t>& cands, double tau) {
    double top = -1e300;
    for (auto k : cands) top = std::max(top, cos_ref(p, i, k) / tau);
    double z = 0.0;
    for (auto k : cands) z += std::exp(cos_ref(p, i, k) / tau - top);
    return -(cos_ref(p, i, j) / tau - top - std::log(z));
}

inline std::size_t row_of(const ProjectionSet& p, Modality m, std::uint32_t inst) {
    for (std::size_t r = 0; r < p.rows(); ++r)
        if (p.modality[r] == m && p.instance[r] == inst) return r;
    throw std::logic_error("row not found");
}

inline double unimodal_ref(const ProjectionSet& p, double tau) {
    std::vector<std::size_t> images;
    for (std::size_t r = 0; r < p.rows(); ++r)
        if (p.modality[r] != Modality::manifestation) images.push_back(r);
    double total = 0.0;
    for (auto r : images) {
        const Modality other = p.modality[r] == Modality::image_cc ? Modality::image_mlo : Modality::image_cc;
        std::vector<std::size_t> cands;
        for (auto k : images)
            if (k != r) cands.push_back(k);
        total += cross_entropy_ref(p, r, row_of(p, other, p.instance[r]), cands, tau);
    }
    return total / static_cast<double>(images.size());
}

inline double inter_ref(const ProjectionSet& p, Modality view, double tau) {
    std::vector<std::size_t> img, man;
    for (std::size_t r = 0; r < p.rows(); ++r) {
        if (p.modality[r] == view) img.push_back(r);
        if (p.modality[r] == Modality::manifestation) man.push_back(r);
    }
    double total = 0.0;
    for (auto r : img) total += cross_entropy_ref(p, r, row_of(p, Modality::manifestation, p.instance[r]), man, tau);
    for (auto r : man) total += cross_entropy_ref(p, r, row_of(p, view, p.instance[r]), img, tau);
    return total / (2.0 * static_cast<double>(img.size()));
}

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double rel_err(double a, double f) { return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-3}); }

template <class LossFn, class GradFn>
double max_gradient_error(ProjectionSet batch, double tau, LossFn loss, GradFn grad) {
    const double h = 1e-5;
    const LossGradients g = grad(batch, tau);
    double worst = 0.0;
    for (Eigen::Index r = 0; r < batch.vectors.rows(); ++r)
        for (Eigen::Index c = 0; c < batch.vectors.cols(); ++c) {
            const double keep = batch.vectors(r, c);
            batch.vectors(r, c) = keep + h;
            const double up = loss(batch, tau);
            batch.vectors(r, c) = keep - h;
            const double down = loss(batch, tau);
            batch.vectors(r, c) = keep;
            worst = std::max(worst, rel_err(g.d_vectors(r, c), (up - down) / (2 * h)));
        }
    const double lt = std::log(tau);
    const double fd_tau = (loss(batch, std::exp(lt + h)) - loss(batch, std::exp(lt - h))) / (2 * h);
    return std::max(worst, rel_err(g.d_log_tau, fd_tau));
}

}  // namespace maninex::testing

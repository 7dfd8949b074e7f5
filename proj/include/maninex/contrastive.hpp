#pragma once
// NT-Xent and the unimodal / multimodal contrastive objectives built from it,
// with exact gradients with respect to the raw projection vectors and log(tau).
//
// Every loss here is a weighted sum of softmax cross-entropy terms
//     L_t = -s(i, j) / tau + log sum_{k in C_t} exp(s(i, k) / tau)
// where s is cosine similarity, i the anchor row, j its positive and C_t the
// candidate rows (j included). The objectives differ only in how terms,
// candidate sets and weights are laid out:
//   unimodal   every image row anchors against all other image rows
//   inter      image view V <-> manifestation, candidates restricted to the
//              opposite modality, averaged over both anchor directions
//   multimodal l_M = (inter(cc) + inter(mlo)) / 2, l_multi = l_M + l_uni

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "maninex/errors.hpp"

namespace maninex {

enum class Modality : std::uint8_t { image_cc, image_mlo, manifestation };

inline const char* to_string(Modality m) {
    switch (m) {
        case Modality::image_cc: return "image_cc";
        case Modality::image_mlo: return "image_mlo";
        case Modality::manifestation: return "manifestation";
    }
    return "?";
}

inline bool is_image(Modality m) noexcept { return m != Modality::manifestation; }

struct ProjectionSet {
    Eigen::MatrixXd vectors;  // one projection per row
    std::vector<Modality> modality;
    std::vector<std::uint32_t> instance;

    std::size_t rows() const noexcept { return static_cast<std::size_t>(vectors.rows()); }

    void check_shape() const {
        if (modality.size() != rows() || instance.size() != rows())
            throw InvalidArgument("ProjectionSet: modality/instance tags do not match row count");
    }
};

// Trainable temperature kept in the log domain and clamped to [kMin, kMax].
class Temperature {
public:
    static constexpr double kMin = 0.01;
    static constexpr double kMax = 10.0;

    explicit Temperature(double tau = 0.7) { set_tau(tau); }

    double tau() const noexcept { return std::exp(log_tau_); }
    double log_tau() const noexcept { return log_tau_; }

    void set_log_tau(double v) noexcept { log_tau_ = std::clamp(v, std::log(kMin), std::log(kMax)); }
    void set_tau(double tau) {
        if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
        set_log_tau(std::log(tau));
    }
    void step(double grad_log_tau, double lr) noexcept { set_log_tau(log_tau_ - lr * grad_log_tau); }

private:
    double log_tau_ = 0.0;
};

inline double cosine_sim(const Eigen::Ref<const Eigen::VectorXd>& u, const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (u.size() != v.size()) throw LengthMismatch("cosine_sim: vector sizes differ");
    const double nu = u.norm();
    const double nv = v.norm();
    if (!(nu > 0.0) || !(nv > 0.0)) throw ZeroNorm("cosine_sim: zero-norm vector");
    return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

struct MultimodalLoss {
    double l_multi = 0.0;
    double l_uni = 0.0;
    double l_M = 0.0;
};

enum class LossKind { unimodal, multimodal };

struct LossGradients {
    double loss = 0.0;
    MultimodalLoss parts;         // l_uni only for unimodal
    Eigen::MatrixXd d_vectors;    // same shape as ProjectionSet::vectors
    double d_log_tau = 0.0;
};

namespace detail {

struct ContrastTerm {
    std::uint32_t anchor;
    std::uint32_t positive;
    std::vector<std::uint32_t> candidates;
    double weight;
};

struct Normalized {
    Eigen::MatrixXd unit;     // rows scaled to unit norm
    Eigen::VectorXd norms;
    Eigen::MatrixXd sim;      // unit * unit^T
};

inline Normalized normalize(const ProjectionSet& batch) {
    batch.check_shape();
    Normalized n;
    // Row by row on a row-major copy: each norm and similarity then depends
    // only on its own rows, whatever else is in the batch.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = batch.vectors;
    const Eigen::Index m = rows.rows();
    n.norms.resize(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        n.norms[r] = rows.row(r).norm();
        if (!(n.norms[r] > 0.0) || !std::isfinite(n.norms[r]))
            throw ZeroNorm("projection row " + std::to_string(r) + " has zero or non-finite norm");
        rows.row(r) /= n.norms[r];
    }
    n.unit = rows;
    n.sim.resize(m, m);
    for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index b = a; b < m; ++b) n.sim(a, b) = n.sim(b, a) = rows.row(a).dot(rows.row(b));
    return n;
}

// Sum of weighted terms; when `grad` is set, accumulates dL/ds into it and
// returns dL/dlog(tau) through `d_log_tau`.
inline double evaluate_terms(const Normalized& n, std::span<const ContrastTerm> terms, double tau,
                             Eigen::MatrixXd* grad_sim, double* d_log_tau) {
    double total = 0.0;
    std::vector<double> logits;
    for (const auto& t : terms) {
        logits.resize(t.candidates.size());
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < t.candidates.size(); ++c) {
            logits[c] = n.sim(t.anchor, t.candidates[c]) / tau;
            top = std::max(top, logits[c]);
        }
        double z = 0.0;
        for (double l : logits) z += std::exp(l - top);
        const double lse = top + std::log(z);
        const double s_pos = n.sim(t.anchor, t.positive);
        total += t.weight * (lse - s_pos / tau);
        if (grad_sim) {
            double expected_s = 0.0;
            for (std::size_t c = 0; c < t.candidates.size(); ++c) {
                const double q = std::exp(logits[c] - lse);
                (*grad_sim)(t.anchor, t.candidates[c]) += t.weight * q / tau;
                expected_s += q * n.sim(t.anchor, t.candidates[c]);
            }
            (*grad_sim)(t.anchor, t.positive) -= t.weight / tau;
            *d_log_tau += t.weight * (s_pos - expected_s) / tau;
        }
    }
    return total;
}

// Chain rule from dL/ds through the cosine normalization to the raw rows.
inline Eigen::MatrixXd grad_vectors(const Normalized& n, const Eigen::MatrixXd& grad_sim) {
    Eigen::MatrixXd d_unit = grad_sim * n.unit + grad_sim.transpose() * n.unit;
    Eigen::VectorXd radial = (d_unit.cwiseProduct(n.unit)).rowwise().sum();
    d_unit -= radial.asDiagonal() * n.unit;
    return n.norms.cwiseInverse().asDiagonal() * d_unit;
}

inline void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("temperature must be positive and finite");
}

inline std::vector<ContrastTerm> nt_xent_terms(const ProjectionSet& batch, std::size_t i, std::size_t j) {
    const std::size_t n = batch.rows();
    if (n < 2) throw InvalidArgument("nt_xent needs at least two rows");
    if (i >= n || j >= n) throw InvalidArgument("nt_xent: row index out of range");
    if (i == j) throw InvalidArgument("nt_xent: anchor and positive must differ");
    ContrastTerm t{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), {}, 1.0};
    for (std::size_t k = 0; k < n; ++k)
        if (k != i) t.candidates.push_back(static_cast<std::uint32_t>(k));
    return {std::move(t)};
}

// instance -> row for one modality; throws on duplicates.
inline std::map<std::uint32_t, std::uint32_t> rows_of(const ProjectionSet& batch, Modality m) {
    std::map<std::uint32_t, std::uint32_t> out;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        if (batch.modality[r] != m) continue;
        if (!out.emplace(batch.instance[r], static_cast<std::uint32_t>(r)).second)
            throw UnpairedInstance("instance " + std::to_string(batch.instance[r]) + " has more than one " +
                                   to_string(m) + " row");
    }
    return out;
}

inline void require_same_instances(const std::map<std::uint32_t, std::uint32_t>& a, Modality ma,
                                   const std::map<std::uint32_t, std::uint32_t>& b, Modality mb) {
    for (const auto& [inst, _] : a)
        if (!b.count(inst))
            throw UnpairedInstance("instance " + std::to_string(inst) + " has a " + to_string(ma) + " row but no " +
                                   to_string(mb) + " row");
    for (const auto& [inst, _] : b)
        if (!a.count(inst))
            throw UnpairedInstance("instance " + std::to_string(inst) + " has a " + to_string(mb) + " row but no " +
                                   to_string(ma) + " row");
}

// Every image view anchors once; candidates are all other image rows.
inline std::vector<ContrastTerm> unimodal_terms(const ProjectionSet& batch, double scale = 1.0) {
    batch.check_shape();
    const auto cc = rows_of(batch, Modality::image_cc);
    const auto mlo = rows_of(batch, Modality::image_mlo);
    if (cc.empty() || mlo.empty()) throw MissingModality("unimodal loss needs both cc and mlo rows");
    require_same_instances(cc, Modality::image_cc, mlo, Modality::image_mlo);

    std::vector<std::uint32_t> image_rows;
    for (std::size_t r = 0; r < batch.rows(); ++r)
        if (is_image(batch.modality[r])) image_rows.push_back(static_cast<std::uint32_t>(r));

    std::vector<ContrastTerm> terms;
    const double w = scale / static_cast<double>(image_rows.size());
    for (auto r : image_rows) {
        const auto inst = batch.instance[r];
        const auto partner = batch.modality[r] == Modality::image_cc ? mlo.at(inst) : cc.at(inst);
        ContrastTerm t{r, partner, {}, w};
        for (auto k : image_rows)
            if (k != r) t.candidates.push_back(k);
        terms.push_back(std::move(t));
    }
    return terms;
}

// Image view <-> manifestation, both directions, same-modality rows masked out.
inline std::vector<ContrastTerm> inter_terms(const ProjectionSet& batch, Modality view, double scale = 1.0) {
    batch.check_shape();
    if (!is_image(view)) throw InvalidArgument("inter loss view must be an image modality");
    const auto img = rows_of(batch, view);
    const auto man = rows_of(batch, Modality::manifestation);
    if (img.empty()) throw MissingModality(std::string("no ") + to_string(view) + " rows");
    if (man.empty()) throw MissingModality("no manifestation rows");
    require_same_instances(img, view, man, Modality::manifestation);

    std::vector<std::uint32_t> img_rows, man_rows;
    for (const auto& [_, r] : img) img_rows.push_back(r);
    for (const auto& [_, r] : man) man_rows.push_back(r);

    std::vector<ContrastTerm> terms;
    const double w = 0.5 * scale / static_cast<double>(img.size());
    for (const auto& [inst, r] : img) terms.push_back({r, man.at(inst), man_rows, w});
    for (const auto& [inst, r] : man) terms.push_back({r, img.at(inst), img_rows, w});
    return terms;
}

}  // namespace detail

inline double nt_xent(const ProjectionSet& batch, std::size_t i, std::size_t j, double tau) {
    detail::check_tau(tau);
    const auto terms = detail::nt_xent_terms(batch, i, j);
    return detail::evaluate_terms(detail::normalize(batch), terms, tau, nullptr, nullptr);
}

// Softmax over k != i of sim(z_i, z_k) / tau, returned at full row length
// with entry i fixed to zero. nt_xent(i, j) == -log(q[j]).
inline Eigen::VectorXd q_distribution(const ProjectionSet& batch, std::size_t i, double tau) {
    detail::check_tau(tau);
    const std::size_t n = batch.rows();
    if (n < 2 || i >= n) throw InvalidArgument("q_distribution: need two rows and a valid anchor");
    const auto norm = detail::normalize(batch);
    Eigen::VectorXd logits = norm.sim.row(static_cast<Eigen::Index>(i)).transpose() / tau;
    logits[static_cast<Eigen::Index>(i)] = -std::numeric_limits<double>::infinity();
    const double top = logits.maxCoeff();
    Eigen::VectorXd q = (logits.array() - top).exp().matrix();
    q[static_cast<Eigen::Index>(i)] = 0.0;
    return q / q.sum();
}

inline double loss_unimodal(const ProjectionSet& batch, double tau) {
    detail::check_tau(tau);
    const auto terms = detail::unimodal_terms(batch);
    return detail::evaluate_terms(detail::normalize(batch), terms, tau, nullptr, nullptr);
}

inline double loss_inter(const ProjectionSet& batch, Modality view, double tau) {
    detail::check_tau(tau);
    const auto terms = detail::inter_terms(batch, view);
    return detail::evaluate_terms(detail::normalize(batch), terms, tau, nullptr, nullptr);
}

inline MultimodalLoss loss_multimodal(const ProjectionSet& batch, double tau) {
    detail::check_tau(tau);
    const auto norm = detail::normalize(batch);
    const auto uni = detail::unimodal_terms(batch);
    const auto cc = detail::inter_terms(batch, Modality::image_cc, 0.5);
    const auto mlo = detail::inter_terms(batch, Modality::image_mlo, 0.5);
    MultimodalLoss out;
    out.l_uni = detail::evaluate_terms(norm, uni, tau, nullptr, nullptr);
    out.l_M = detail::evaluate_terms(norm, cc, tau, nullptr, nullptr) +
              detail::evaluate_terms(norm, mlo, tau, nullptr, nullptr);
    out.l_multi = out.l_M + out.l_uni;
    return out;
}

inline LossGradients gradients(const ProjectionSet& batch, double tau, LossKind kind) {
    detail::check_tau(tau);
    const auto norm = detail::normalize(batch);
    const auto n = static_cast<Eigen::Index>(batch.rows());
    Eigen::MatrixXd grad_sim = Eigen::MatrixXd::Zero(n, n);
    LossGradients g;
    g.parts.l_uni = detail::evaluate_terms(norm, detail::unimodal_terms(batch), tau, &grad_sim, &g.d_log_tau);
    if (kind == LossKind::multimodal) {
        g.parts.l_M =
            detail::evaluate_terms(norm, detail::inter_terms(batch, Modality::image_cc, 0.5), tau, &grad_sim,
                                   &g.d_log_tau) +
            detail::evaluate_terms(norm, detail::inter_terms(batch, Modality::image_mlo, 0.5), tau, &grad_sim,
                                   &g.d_log_tau);
    }
    g.parts.l_multi = g.parts.l_M + g.parts.l_uni;
    g.loss = kind == LossKind::multimodal ? g.parts.l_multi : g.parts.l_uni;
    g.d_vectors = detail::grad_vectors(norm, grad_sim);
    return g;
}

inline LossGradients nt_xent_gradients(const ProjectionSet& batch, std::size_t i, std::size_t j, double tau) {
    detail::check_tau(tau);
    const auto norm = detail::normalize(batch);
    const auto n = static_cast<Eigen::Index>(batch.rows());
    Eigen::MatrixXd grad_sim = Eigen::MatrixXd::Zero(n, n);
    LossGradients g;
    g.loss = detail::evaluate_terms(norm, detail::nt_xent_terms(batch, i, j), tau, &grad_sim, &g.d_log_tau);
    g.d_vectors = detail::grad_vectors(norm, grad_sim);
    return g;
}

}  // namespace maninex

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "progmod/rng.hpp"

namespace progmod {

using Vec = Eigen::VectorXd;

// Fused variances are floored here to guard against expert-precision blowup.
inline constexpr double kPoeVarianceFloor = 1e-12;

struct DiagonalGaussian {
    Vec mu;
    Vec sigma2;  // per-dimension variance, strictly positive

    DiagonalGaussian() = default;
    DiagonalGaussian(Vec mu_, Vec sigma2_) : mu(std::move(mu_)), sigma2(std::move(sigma2_)) {
        check();
    }

    Eigen::Index dim() const { return mu.size(); }

    void check() const {
        if (mu.size() != sigma2.size())
            throw std::invalid_argument("DiagonalGaussian: mu and sigma2 lengths differ");
        for (Eigen::Index i = 0; i < sigma2.size(); ++i)
            if (!(sigma2[i] > 0.0) || !std::isfinite(sigma2[i]) || !std::isfinite(mu[i]))
                throw std::invalid_argument(
                    "DiagonalGaussian: entries must be finite with positive variance");
    }
};

struct MixtureGaussian {
    std::vector<DiagonalGaussian> components;
    Vec weights;  // simplex

    Eigen::Index dim() const { return components.empty() ? 0 : components.front().dim(); }
};

// Product of diagonal-Gaussian experts, computed in precision space with
// compensated summation so the result is independent of expert order.
// With the flag set, a unit expert (mu = 0, sigma2 = 1) joins the product.
// dim_when_empty sizes the result when only the unit prior contributes.
inline DiagonalGaussian poe_combine(std::span<const DiagonalGaussian> experts,
                                    bool include_unit_prior,
                                    Eigen::Index dim_when_empty = 1) {
    if (experts.empty() && !include_unit_prior)
        throw std::invalid_argument("poe_combine: no experts and no unit prior");
    const Eigen::Index d = experts.empty() ? dim_when_empty : experts.front().dim();
    for (const auto& e : experts) {
        e.check();
        if (e.dim() != d)
            throw std::invalid_argument("poe_combine: experts disagree on dimension");
    }
    if (experts.empty()) return {Vec::Zero(d), Vec::Ones(d)};

    Vec precision = Vec::Zero(d);
    Vec weighted_mu = Vec::Zero(d);
    Vec c_prec = Vec::Zero(d);  // Kahan carries
    Vec c_mu = Vec::Zero(d);
    auto kahan_add = [](double& sum, double& carry, double term) {
        const double y = term - carry;
        const double t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    };
    if (include_unit_prior) {
        for (Eigen::Index i = 0; i < d; ++i) {
            kahan_add(precision[i], c_prec[i], 1.0);
            kahan_add(weighted_mu[i], c_mu[i], 0.0);
        }
    }
    for (const auto& e : experts) {
        for (Eigen::Index i = 0; i < d; ++i) {
            kahan_add(precision[i], c_prec[i], 1.0 / e.sigma2[i]);
            kahan_add(weighted_mu[i], c_mu[i], e.mu[i] / e.sigma2[i]);
        }
    }
    Vec sigma2(d), mu(d);
    for (Eigen::Index i = 0; i < d; ++i) {
        sigma2[i] = std::max(1.0 / precision[i], kPoeVarianceFloor);
        mu[i] = weighted_mu[i] * sigma2[i];
    }
    return {std::move(mu), std::move(sigma2)};
}

inline DiagonalGaussian poe_combine(const std::vector<DiagonalGaussian>& experts,
                                    bool include_unit_prior,
                                    Eigen::Index dim_when_empty = 1) {
    return poe_combine(std::span<const DiagonalGaussian>(experts), include_unit_prior,
                       dim_when_empty);
}

inline MixtureGaussian moe_combine(std::vector<DiagonalGaussian> experts, Vec weights) {
    if (experts.empty()) throw std::invalid_argument("moe_combine: empty expert list");
    if (weights.size() != static_cast<Eigen::Index>(experts.size()))
        throw std::invalid_argument("moe_combine: weights length != expert count");
    double total = 0.0;
    for (Eigen::Index i = 0; i < weights.size(); ++i) {
        if (!(weights[i] >= 0.0))
            throw std::invalid_argument("moe_combine: negative weight");
        total += weights[i];
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("moe_combine: weights must sum to 1");
    const Eigen::Index d = experts.front().dim();
    for (const auto& e : experts) {
        e.check();
        if (e.dim() != d)
            throw std::invalid_argument("moe_combine: experts disagree on dimension");
    }
    return {std::move(experts), std::move(weights)};
}

// Diagonal Gaussian matching the mixture's first two moments.
inline DiagonalGaussian moment_match(const MixtureGaussian& m) {
    const Eigen::Index d = m.dim();
    Vec mu = Vec::Zero(d);
    for (std::size_t k = 0; k < m.components.size(); ++k)
        mu += m.weights[static_cast<Eigen::Index>(k)] * m.components[k].mu;
    Vec sigma2 = Vec::Zero(d);
    for (std::size_t k = 0; k < m.components.size(); ++k) {
        const auto& c = m.components[k];
        const double w = m.weights[static_cast<Eigen::Index>(k)];
        sigma2 += w * (c.sigma2 + (c.mu - mu).cwiseProduct(c.mu - mu));
    }
    return {std::move(mu), std::move(sigma2)};
}

// Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions.
// Exactly zero when q and p hold identical values.
inline double kl_divergence(const DiagonalGaussian& q, const DiagonalGaussian& p) {
    if (q.dim() != p.dim())
        throw std::invalid_argument("kl_divergence: dimension mismatch");
    double kl = 0.0;
    for (Eigen::Index i = 0; i < q.dim(); ++i) {
        const double r = q.sigma2[i] / p.sigma2[i];
        const double dm = q.mu[i] - p.mu[i];
        kl += 0.5 * (r + dm * dm / p.sigma2[i] - 1.0 - std::log(r));
    }
    return kl;
}

// mu + sqrt(sigma2) .* eps
inline Vec sample_reparam(const DiagonalGaussian& g, const Vec& eps) {
    if (eps.size() != g.dim())
        throw std::invalid_argument("sample_reparam: eps length != dimension");
    return g.mu + g.sigma2.cwiseSqrt().cwiseProduct(eps);
}

inline Vec sample(const DiagonalGaussian& g, Rng& rng) {
    Vec eps(g.dim());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    return sample_reparam(g, eps);
}

inline int sample_component(const MixtureGaussian& m, Rng& rng) {
    double u = rng.uniform01();
    double acc = 0.0;
    for (Eigen::Index k = 0; k < m.weights.size(); ++k) {
        acc += m.weights[k];
        if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(m.weights.size() - 1);
}

inline Vec sample(const MixtureGaussian& m, Rng& rng) {
    return sample(m.components[static_cast<std::size_t>(sample_component(m, rng))], rng);
}

// Batch sampling stratified by component: each component receives a draw
// count proportional to its weight (largest-remainder rounding), so a batch
// covers the mixture instead of leaving rare components to chance.
inline std::vector<Vec> sample_batch(const MixtureGaussian& m, int n, Rng& rng) {
    const auto k = static_cast<Eigen::Index>(m.components.size());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    std::vector<std::pair<double, Eigen::Index>> remainders;
    int assigned = 0;
    for (Eigen::Index i = 0; i < k; ++i) {
        const double exact = m.weights[i] * n;
        counts[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(exact));
        assigned += counts[static_cast<std::size_t>(i)];
        remainders.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int r = 0; r < n - assigned; ++r)
        ++counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(r)].second)];

    std::vector<Vec> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < k; ++i)
        for (int j = 0; j < counts[static_cast<std::size_t>(i)]; ++j)
            out.push_back(sample(m.components[static_cast<std::size_t>(i)], rng));
    return out;
}

}  // namespace progmod

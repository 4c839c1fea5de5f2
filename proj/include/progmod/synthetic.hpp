#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "progmod/core.hpp"
#include "progmod/rng.hpp"

namespace progmod {

// Observational-cohort generator with a controllable selection-bias knob.
// A latent health state drives covariates, treatment choice and both
// potential outcomes, so evaluation can see the counterfactual ground truth
// that real cohorts never provide.
struct GeneratorSpec {
    int n = 504;
    int k = 4;                  // latent health dimension
    double bias_strength = 2.0; // lambda; 0 gives a randomized cohort
    int degree = 3;             // bias-injection degree for splitting, in 1..4
    double tab_noise = 0.4;
    double img_noise = 0.25;
    int d_tab = 17;
    int d_img = 64;
    std::uint64_t seed = 1;

    void validate() const {
        if (n < 10) throw DataError("generator: n must be >= 10");
        if (k < 1) throw DataError("generator: k must be >= 1");
        if (bias_strength < 0) throw DataError("generator: bias_strength must be >= 0");
        if (degree < 1 || degree > 4)
            throw DataError("generator: degree must be in 1..4, got " + std::to_string(degree));
        if (tab_noise < 0 || img_noise < 0)
            throw DataError("generator: noise scales must be >= 0");
        if (d_tab < 2 || d_img < 1) throw DataError("generator: dimensions too small");
    }
};

inline void to_json(json& j, const GeneratorSpec& s) {
    j = json{{"n", s.n},
             {"k", s.k},
             {"bias_strength", s.bias_strength},
             {"degree", s.degree},
             {"tab_noise", s.tab_noise},
             {"img_noise", s.img_noise},
             {"d_tab", s.d_tab},
             {"d_img", s.d_img},
             {"seed", s.seed}};
}

inline void from_json(const json& j, GeneratorSpec& s) {
    s = GeneratorSpec{};
    if (j.contains("n")) j.at("n").get_to(s.n);
    if (j.contains("k")) j.at("k").get_to(s.k);
    if (j.contains("bias_strength")) j.at("bias_strength").get_to(s.bias_strength);
    if (j.contains("degree")) j.at("degree").get_to(s.degree);
    if (j.contains("tab_noise")) j.at("tab_noise").get_to(s.tab_noise);
    if (j.contains("img_noise")) j.at("img_noise").get_to(s.img_noise);
    if (j.contains("d_tab")) j.at("d_tab").get_to(s.d_tab);
    if (j.contains("d_img")) j.at("d_img").get_to(s.d_img);
    if (j.contains("seed")) j.at("seed").get_to(s.seed);
}

namespace gen_detail {

// Fixed shape constants of the generative process. The two modalities carry
// complementary views of the latent state: the tabular channel sees all of
// it (clinical scores include the treatment-steering severity), while the
// image channel is mostly blind to the severity direction.
inline constexpr double kSeverityScale = 1.5;   // scale of the severity score
inline constexpr double kOutcomeScale = 2.6;    // scale of the outcome logits
inline constexpr double kAlign0 = 0.85;  // severity alignment of the conservative arm
inline constexpr double kAlign1 = 0.35;  // severity alignment of the surgical arm
inline constexpr double kOutcomeShift0 = 0.0;
inline constexpr double kOutcomeShift1 = -0.1;
inline constexpr double kTreatedTarget = 140.0 / 504.0;
inline constexpr double kTabSignal = 0.9;
inline constexpr double kImgSignal = 1.2;
inline constexpr double kImgSeverityAttenuation = 0.75;
inline constexpr double kSubgroupFraction = 68.0 / 504.0;

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Eigen::VectorXd random_unit(Rng& rng, int k) {
    Eigen::VectorXd v(k);
    for (int i = 0; i < k; ++i) v[i] = rng.normal();
    return v / v.norm();
}

// Unit vector at a prescribed cosine to `axis`.
inline Eigen::VectorXd aligned_unit(Rng& rng, const Eigen::VectorXd& axis, double cosine) {
    Eigen::VectorXd v = random_unit(rng, static_cast<int>(axis.size()));
    Eigen::VectorXd perp = v - v.dot(axis) * axis;
    if (perp.norm() < 1e-9) perp = random_unit(rng, static_cast<int>(axis.size()));
    perp /= perp.norm();
    return cosine * axis + std::sqrt(1.0 - cosine * cosine) * perp;
}

// All seed-determined structure of the generative process.
struct Structure {
    Eigen::MatrixXd tab_mix;    // d_tab x k
    Eigen::MatrixXd img_mix;    // d_img x k
    Eigen::VectorXd severity;   // unit direction of the treatment-steering score
    Eigen::VectorXd w0, w1;     // outcome logit directions per arm
    std::vector<double> tab_thresholds;  // NaN where the coordinate stays continuous
    double propensity_intercept = 0.0;
};

inline Structure make_structure(const GeneratorSpec& spec) {
    Rng rng(derive_seed(spec.seed, StreamTag::generator_global));
    Structure st;
    st.tab_mix.resize(spec.d_tab, spec.k);
    for (int i = 0; i < spec.d_tab; ++i)
        st.tab_mix.row(i) = kTabSignal * random_unit(rng, spec.k).transpose();
    st.img_mix.resize(spec.d_img, spec.k);
    for (int i = 0; i < spec.d_img; ++i)
        st.img_mix.row(i) = kImgSignal * random_unit(rng, spec.k).transpose();

    st.severity = random_unit(rng, spec.k);
    // worse severity lowers the favorable-outcome logit, more strongly under
    // conservative care, so treatment effects vary across patients
    st.w0 = -kOutcomeScale * aligned_unit(rng, st.severity, kAlign0);
    st.w1 = -kOutcomeScale * aligned_unit(rng, st.severity, kAlign1);

    // a handful of continuous coordinates; the rest mimic binary flags
    const int n_continuous = std::max(2, spec.d_tab / 4);
    st.tab_thresholds.assign(static_cast<std::size_t>(spec.d_tab),
                             std::numeric_limits<double>::quiet_NaN());
    for (int i = n_continuous; i < spec.d_tab; ++i)
        st.tab_thresholds[static_cast<std::size_t>(i)] = rng.uniform(-0.8, 0.8);

    // Intercept keeping the treated fraction near its target at this bias
    // strength (logistic-normal mean approximation); at lambda = 0 the
    // propensity is exactly 1/2 regardless.
    const double lambda = spec.bias_strength;
    if (lambda > 1e-12) {
        const double spread = lambda * kSeverityScale;
        const double logit_target =
            std::log(kTreatedTarget / (1.0 - kTreatedTarget));
        st.propensity_intercept =
            logit_target * std::sqrt(1.0 + M_PI * spread * spread / 8.0) / lambda;
    }
    return st;
}

inline std::string sample_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%06d", i);
    return buf;
}

}  // namespace gen_detail

inline Cohort generate_cohort(const GeneratorSpec& spec) {
    spec.validate();
    const auto st = gen_detail::make_structure(spec);

    Cohort cohort;
    cohort.d_tab = spec.d_tab;
    cohort.d_img = spec.d_img;
    json j;
    to_json(j, spec);
    cohort.generator = j;

    for (int i = 0; i < spec.n; ++i) {
        // independent per-sample stream: the cohort is invariant to
        // generation order
        Rng rng(derive_seed(spec.seed, StreamTag::generator_sample,
                            static_cast<std::uint64_t>(i)));
        Eigen::VectorXd latent(spec.k);
        for (int d = 0; d < spec.k; ++d) latent[d] = rng.normal();

        Sample s;
        s.id = gen_detail::sample_id(i);
        s.x_tab.resize(static_cast<std::size_t>(spec.d_tab));
        Eigen::VectorXd tab_raw = st.tab_mix * latent;
        for (int d = 0; d < spec.d_tab; ++d) {
            const double v = tab_raw[d] + spec.tab_noise * rng.normal();
            const double thr = st.tab_thresholds[static_cast<std::size_t>(d)];
            s.x_tab[static_cast<std::size_t>(d)] = std::isnan(thr) ? v : (v > thr ? 1.0 : 0.0);
        }
        s.x_img.resize(static_cast<std::size_t>(spec.d_img));
        Eigen::VectorXd img_latent =
            latent -
            gen_detail::kImgSeverityAttenuation * st.severity.dot(latent) * st.severity;
        Eigen::VectorXd img_raw = st.img_mix * img_latent;
        for (int d = 0; d < spec.d_img; ++d)
            s.x_img[static_cast<std::size_t>(d)] =
                std::tanh(img_raw[d]) + spec.img_noise * rng.normal();

        const double severity = gen_detail::kSeverityScale * st.severity.dot(latent) +
                                st.propensity_intercept;
        OracleInfo o;
        o.propensity = gen_detail::sigmoid(spec.bias_strength * severity);
        s.t = rng.bernoulli(o.propensity) ? 1 : 0;

        o.y0_prob = gen_detail::sigmoid(st.w0.dot(latent) + gen_detail::kOutcomeShift0);
        o.y1_prob = gen_detail::sigmoid(st.w1.dot(latent) + gen_detail::kOutcomeShift1);
        o.y0 = rng.bernoulli(o.y0_prob) ? 1 : 0;
        o.y1 = rng.bernoulli(o.y1_prob) ? 1 : 0;
        s.y = s.t == 0 ? o.y0 : o.y1;

        cohort.samples.push_back(std::move(s));
        cohort.oracle.push_back(o);
    }
    return cohort;
}

// Fractions of the confounded subgroup kept in TRAIN per degree, mirroring
// the 68-case protocol: 68/0, 48/20, 18/50, 0/68.
inline double subgroup_train_fraction(int degree) {
    switch (degree) {
        case 1: return 1.0;
        case 2: return 48.0 / 68.0;
        case 3: return 18.0 / 68.0;
        case 4: return 0.0;
    }
    throw DataError("degree must be in 1..4, got " + std::to_string(degree));
}

struct SplitResult {
    Cohort train, test;
    std::vector<int> subgroup;  // cohort indices of the confounded subgroup
};

namespace gen_detail {

inline Cohort take(const Cohort& c, const std::vector<char>& mask, char which) {
    Cohort out;
    out.schema_version = c.schema_version;
    out.d_tab = c.d_tab;
    out.d_img = c.d_img;
    out.generator = c.generator;
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        if (mask[i] != which) continue;
        out.samples.push_back(c.samples[i]);
        if (c.has_oracle()) out.oracle.push_back(c.oracle[i]);
    }
    return out;
}

}  // namespace gen_detail

// Splits a cohort while steering the confounded subgroup (the most
// surgery-leaning patients who nevertheless received conservative care)
// between train and test according to the degree protocol. Everyone else
// splits 80/20 uniformly at random.
inline SplitResult split_biased(const Cohort& cohort, int degree, std::uint64_t seed) {
    if (!cohort.has_oracle())
        throw DataError("split_biased: cohort carries no oracle info "
                        "(the subgroup marker derives from recorded propensities)");
    const double frac = subgroup_train_fraction(degree);
    const auto n = static_cast<int>(cohort.samples.size());

    std::vector<int> conservative;
    for (int i = 0; i < n; ++i)
        if (cohort.samples[static_cast<std::size_t>(i)].t == 0) conservative.push_back(i);

    const int subgroup_size =
        static_cast<int>(std::llround(gen_detail::kSubgroupFraction * n));
    if (subgroup_size < 1)
        throw DataError("split_biased: cohort too small for a nonempty subgroup");
    if (static_cast<int>(conservative.size()) < subgroup_size)
        throw DataError("split_biased: only " + std::to_string(conservative.size()) +
                        " conservatively treated samples for a subgroup of " +
                        std::to_string(subgroup_size) +
                        "; increase the cohort size or bias strength");

    double lo = 2.0, hi = -1.0;
    for (int i : conservative) {
        const double p = cohort.oracle[static_cast<std::size_t>(i)].propensity;
        lo = std::min(lo, p);
        hi = std::max(hi, p);
    }
    if (hi - lo < 1e-12)
        throw DataError("split_biased: propensities are constant across the conservative "
                        "arm (bias strength too small for a meaningful subgroup); "
                        "increase bias strength or cohort size");

    // most surgery-leaning conservatively-treated samples first
    std::stable_sort(conservative.begin(), conservative.end(), [&](int a, int b) {
        return cohort.oracle[static_cast<std::size_t>(a)].propensity >
               cohort.oracle[static_cast<std::size_t>(b)].propensity;
    });
    std::vector<int> subgroup(conservative.begin(), conservative.begin() + subgroup_size);

    Rng rng(derive_seed(seed, StreamTag::split, static_cast<std::uint64_t>(degree)));
    std::vector<int> subgroup_shuffled = subgroup;
    rng.shuffle(subgroup_shuffled);
    const int sub_train = static_cast<int>(std::llround(frac * subgroup_size));

    std::vector<char> mask(static_cast<std::size_t>(n), 0);  // 1 = train, 2 = test
    for (int j = 0; j < subgroup_size; ++j)
        mask[static_cast<std::size_t>(subgroup_shuffled[static_cast<std::size_t>(j)])] =
            j < sub_train ? 1 : 2;

    std::vector<int> rest;
    for (int i = 0; i < n; ++i)
        if (mask[static_cast<std::size_t>(i)] == 0) rest.push_back(i);
    rng.shuffle(rest);
    const int rest_train = static_cast<int>(std::llround(0.8 * rest.size()));
    for (std::size_t j = 0; j < rest.size(); ++j)
        mask[static_cast<std::size_t>(rest[j])] = static_cast<int>(j) < rest_train ? 1 : 2;

    SplitResult out;
    out.train = gen_detail::take(cohort, mask, 1);
    out.test = gen_detail::take(cohort, mask, 2);
    out.subgroup = std::move(subgroup);
    return out;
}

// Plain uniform split (no subgroup steering).
inline SplitResult split_uniform(const Cohort& cohort, double test_fraction,
                                 std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw DataError("split_uniform: test fraction must be in (0,1)");
    const auto n = static_cast<int>(cohort.samples.size());
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(seed, StreamTag::split, 0));
    rng.shuffle(idx);
    const int n_test = static_cast<int>(std::llround(test_fraction * n));
    std::vector<char> mask(static_cast<std::size_t>(n), 1);
    for (int j = 0; j < n_test; ++j)
        mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])] = 2;
    SplitResult out;
    out.train = gen_detail::take(cohort, mask, 1);
    out.test = gen_detail::take(cohort, mask, 2);
    return out;
}

}  // namespace progmod

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "progmod/core.hpp"
#include "progmod/distributions.hpp"
#include "progmod/encoders.hpp"

namespace progmod {

inline constexpr double kProbClamp = 1e-7;  // cross-entropy probability clamp

enum class Fusion { poe, moe, concat };

inline std::string to_string(Fusion f) {
    switch (f) {
        case Fusion::poe: return "poe";
        case Fusion::moe: return "moe";
        case Fusion::concat: return "concat";
    }
    return "?";
}

inline Fusion fusion_from_string(const std::string& s) {
    if (s == "poe") return Fusion::poe;
    if (s == "moe") return Fusion::moe;
    if (s == "concat") return Fusion::concat;
    throw DataError("unknown fusion variant: " + s + " (expected poe, moe or concat)");
}

struct ModelConfig {
    int d = 10;          // prognostic-score dimension
    double beta = 1.0;   // KL weight; 0.5 suits low-bias cohorts, 1.0 high-bias
    Fusion fusion = Fusion::poe;
    int d_tab = 17;
    int d_img = 64;
    std::vector<int> tab_widths{32, 32, 32};
    std::vector<int> img_widths{32, 32, 32};
    int cond_width = 32;
    int decoder_hidden = 16;
    int mc_samples_train = 1;
    bool tie_trunks = false;  // posterior reuses the prior's trunks

    void validate() const {
        if (d < 1) throw DataError("model config: d must be >= 1");
        if (beta < 0) throw DataError("model config: beta must be >= 0");
        if (mc_samples_train < 1) throw DataError("model config: mc_samples_train must be >= 1");
        if (tab_widths.empty() || img_widths.empty())
            throw DataError("model config: trunk width lists must be nonempty");
    }
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"d", c.d},
             {"beta", c.beta},
             {"fusion", to_string(c.fusion)},
             {"d_tab", c.d_tab},
             {"d_img", c.d_img},
             {"tab_widths", c.tab_widths},
             {"img_widths", c.img_widths},
             {"cond_width", c.cond_width},
             {"decoder_hidden", c.decoder_hidden},
             {"mc_samples_train", c.mc_samples_train},
             {"tie_trunks", c.tie_trunks}};
}

inline void from_json(const json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("d")) j.at("d").get_to(c.d);
    if (j.contains("beta")) j.at("beta").get_to(c.beta);
    if (j.contains("fusion")) c.fusion = fusion_from_string(j.at("fusion").get<std::string>());
    if (j.contains("d_tab")) j.at("d_tab").get_to(c.d_tab);
    if (j.contains("d_img")) j.at("d_img").get_to(c.d_img);
    if (j.contains("tab_widths")) j.at("tab_widths").get_to(c.tab_widths);
    if (j.contains("img_widths")) j.at("img_widths").get_to(c.img_widths);
    if (j.contains("cond_width")) j.at("cond_width").get_to(c.cond_width);
    if (j.contains("decoder_hidden")) j.at("decoder_hidden").get_to(c.decoder_hidden);
    if (j.contains("mc_samples_train")) j.at("mc_samples_train").get_to(c.mc_samples_train);
    if (j.contains("tie_trunks")) j.at("tie_trunks").get_to(c.tie_trunks);
}

struct DecoderParams {
    LinearParams l1, l2;
};

struct ModelParams {
    EncoderParams prior;
    EncoderParams posterior;
    DecoderParams decoder;
};

struct ArmDistributions {
    DiagonalGaussian z0, z1;
};

struct PotentialOutcomes {
    double y0_hat = 0.5;
    double y1_hat = 0.5;
};

namespace detail {

// Head input widths: the posterior sees the factual outcome appended to the
// conditioned features before its Gaussian heads.
inline void init_encoder(EncoderParams& enc, const ModelConfig& cfg, bool is_posterior,
                         Rng& rng) {
    if (!(is_posterior && cfg.tie_trunks)) {
        init_trunk(enc.tab_trunk, cfg.d_tab, cfg.tab_widths, rng);
        init_trunk(enc.img_trunk, cfg.d_img, cfg.img_widths, rng);
    }
    const int extra = is_posterior ? 1 : 0;
    init_linear(enc.tab_cond, cfg.tab_widths.back() + 1, cfg.cond_width, rng);
    init_linear(enc.img_cond, cfg.img_widths.back() + 1, cfg.cond_width, rng);
    if (cfg.fusion == Fusion::concat) {
        init_head(enc.joint_head, 2 * cfg.cond_width + extra, cfg.d, rng);
    } else {
        init_head(enc.tab_head, cfg.cond_width + extra, cfg.d, rng);
        init_head(enc.img_head, cfg.cond_width + extra, cfg.d, rng);
    }
}

}  // namespace detail

// Uniform fan-in initialization, fully determined by the seed.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, StreamTag::param_init));
    ModelParams p;
    detail::init_encoder(p.prior, cfg, false, rng);
    detail::init_encoder(p.posterior, cfg, true, rng);
    init_linear(p.decoder.l1, cfg.d + 1, cfg.decoder_hidden, rng);
    init_linear(p.decoder.l2, cfg.decoder_hidden, 1, rng);
    return p;
}

template <class F>
void visit_params(ModelParams& p, F&& f) {
    visit_encoder(p.prior, "prior", f);
    visit_encoder(p.posterior, "posterior", f);
    visit_linear(p.decoder.l1, "decoder.l1", f);
    visit_linear(p.decoder.l2, "decoder.l2", f);
}

// Dense batch view over cohort samples.
struct BatchData {
    Mat x_tab, x_img;      // B x D
    Eigen::VectorXd t, y;  // B
    std::vector<std::string> ids;

    Eigen::Index size() const { return x_tab.rows(); }
};

inline BatchData make_batch(const Cohort& c, const std::vector<int>& idx) {
    BatchData b;
    const auto n = static_cast<Eigen::Index>(idx.size());
    b.x_tab.resize(n, c.d_tab);
    b.x_img.resize(n, c.d_img);
    b.t.resize(n);
    b.y.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const Sample& s = c.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
        if (static_cast<int>(s.x_tab.size()) != c.d_tab ||
            static_cast<int>(s.x_img.size()) != c.d_img)
            throw DataError("sample " + s.id + " does not match cohort dimensions");
        for (int j = 0; j < c.d_tab; ++j) b.x_tab(r, j) = s.x_tab[static_cast<std::size_t>(j)];
        for (int j = 0; j < c.d_img; ++j) b.x_img(r, j) = s.x_img[static_cast<std::size_t>(j)];
        b.t[r] = s.t;
        b.y[r] = s.y;
        b.ids.push_back(s.id);
    }
    return b;
}

inline BatchData make_batch(const Cohort& c) {
    std::vector<int> idx(c.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    return make_batch(c, idx);
}

struct LiftedModel {
    LiftedEncoder prior, posterior;
    LiftedLinear dec_l1, dec_l2;
    ParamRegistry registry;
};

inline LiftedModel lift_model(ad::Tape& t, ModelParams& p, const ModelConfig& cfg) {
    LiftedModel m;
    m.prior = lift_encoder(t, p.prior, "prior", m.registry);
    m.posterior = lift_encoder(t, p.posterior, "posterior", m.registry);
    if (cfg.tie_trunks) {
        m.posterior.tab_trunk = m.prior.tab_trunk;
        m.posterior.img_trunk = m.prior.img_trunk;
    }
    m.dec_l1 = lift_linear(t, p.decoder.l1, "decoder.l1", m.registry);
    m.dec_l2 = lift_linear(t, p.decoder.l2, "decoder.l2", m.registry);
    return m;
}

namespace detail {

// Fused per-sample distribution plus, for the mixture variant, the two
// modality experts that sampling selects between.
struct FusedBatch {
    GaussBatch dist;                       // poe / concat / moment-matched moe
    std::optional<GaussBatch> moe_tab, moe_img;
};

inline GaussBatch poe_fuse_tape(ad::Tape& t, const GaussBatch& a, const GaussBatch& b) {
    ad::Var prec =
        ad::add_scalar(ad::add(ad::reciprocal(a.var), ad::reciprocal(b.var)), 1.0);
    ad::Var fused_var = ad::clamp_min(ad::reciprocal(prec), kPoeVarianceFloor);
    ad::Var weighted =
        ad::add(ad::mul(a.mu, ad::reciprocal(a.var)), ad::mul(b.mu, ad::reciprocal(b.var)));
    return {ad::mul(weighted, fused_var), fused_var};
}

inline GaussBatch moe_moment_match_tape(ad::Tape& t, const GaussBatch& a, const GaussBatch& b) {
    // equal weights: mu = (mu_a + mu_b)/2,
    // var = (var_a + mu_a^2 + var_b + mu_b^2)/2 - mu^2
    ad::Var mu = ad::mul_scalar(ad::add(a.mu, b.mu), 0.5);
    ad::Var second = ad::mul_scalar(ad::add(ad::add(a.var, ad::square(a.mu)),
                                            ad::add(b.var, ad::square(b.mu))),
                                    0.5);
    return {mu, ad::sub(second, ad::square(mu))};
}

// Shared forward for the prior and posterior branches. `y_col` non-null
// marks the posterior: the factual outcome joins the features ahead of the
// Gaussian heads.
inline FusedBatch branch_forward(ad::Tape& t, LiftedEncoder& enc, const Mat& x_tab,
                                 const Mat& x_img, const Eigen::VectorXd& t_col,
                                 const Eigen::VectorXd* y_col, Mode mode,
                                 const ModelConfig& cfg) {
    ad::Var f_tab = trunk_forward(t, t.constant(x_tab), enc.tab_trunk, mode);
    ad::Var f_img = trunk_forward(t, t.constant(x_img), enc.img_trunk, mode);
    ad::Var phi_tab = condition_features(t, f_tab, enc.tab_cond, t_col);
    ad::Var phi_img = condition_features(t, f_img, enc.img_cond, t_col);

    FusedBatch out;
    if (cfg.fusion == Fusion::concat) {
        ad::Var phi = ad::concat_cols(phi_tab, phi_img);
        if (y_col) phi = ad::concat_cols(phi, t.constant(Mat(*y_col)));
        out.dist = head_forward(t, phi, enc.joint_head);
        return out;
    }
    if (y_col) {
        ad::Var yc = t.constant(Mat(*y_col));
        phi_tab = ad::concat_cols(phi_tab, yc);
        phi_img = ad::concat_cols(phi_img, yc);
    }
    GaussBatch e_tab = head_forward(t, phi_tab, enc.tab_head);
    GaussBatch e_img = head_forward(t, phi_img, enc.img_head);
    if (cfg.fusion == Fusion::poe) {
        out.dist = poe_fuse_tape(t, e_tab, e_img);
    } else {
        out.dist = moe_moment_match_tape(t, e_tab, e_img);
        out.moe_tab = e_tab;
        out.moe_img = e_img;
    }
    return out;
}

// Per-sample closed-form KL between diagonal Gaussians, as a tape column.
inline ad::Var kl_rows(ad::Tape& t, const GaussBatch& q, const GaussBatch& p) {
    ad::Var r = ad::div(q.var, p.var);
    ad::Var m = ad::div(ad::square(ad::sub(q.mu, p.mu)), p.var);
    return ad::mul_scalar(
        ad::sum_cols(ad::sub(ad::add_scalar(ad::add(r, m), -1.0), ad::log(r))), 0.5);
}

inline ad::Var decode_tape(ad::Tape& t, ad::Var z, const Eigen::VectorXd& t_col,
                           const LiftedLinear& l1, const LiftedLinear& l2) {
    ad::Var h = ad::relu(affine(t, ad::concat_cols(z, t.constant(Mat(t_col))), l1));
    return ad::sigmoid(affine(t, h, l2));
}

inline DiagonalGaussian row_gaussian(const GaussBatch& g, Eigen::Index r) {
    return {g.mu.value().row(r).transpose(), g.var.value().row(r).transpose()};
}

}  // namespace detail

// --- inference ---------------------------------------------------------------

// Per-arm prior distributions (eval mode, pure).
inline std::vector<ArmDistributions> prior_distributions_batch(ModelParams& params,
                                                               const ModelConfig& cfg,
                                                               const Mat& x_tab,
                                                               const Mat& x_img) {
    ad::Tape tape;
    LiftedModel lm = lift_model(tape, params, cfg);
    const Eigen::Index n = x_tab.rows();
    auto arm0 = detail::branch_forward(tape, lm.prior, x_tab, x_img,
                                       Eigen::VectorXd::Zero(n), nullptr, Mode::eval, cfg);
    auto arm1 = detail::branch_forward(tape, lm.prior, x_tab, x_img,
                                       Eigen::VectorXd::Ones(n), nullptr, Mode::eval, cfg);
    std::vector<ArmDistributions> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r)
        out.push_back({detail::row_gaussian(arm0.dist, r), detail::row_gaussian(arm1.dist, r)});
    return out;
}

inline ArmDistributions prior_distributions(ModelParams& params, const ModelConfig& cfg,
                                            const Sample& s) {
    Mat xt(1, s.x_tab.size()), xi(1, s.x_img.size());
    for (std::size_t j = 0; j < s.x_tab.size(); ++j) xt(0, static_cast<Eigen::Index>(j)) = s.x_tab[j];
    for (std::size_t j = 0; j < s.x_img.size(); ++j) xi(0, static_cast<Eigen::Index>(j)) = s.x_img[j];
    return prior_distributions_batch(params, cfg, xt, xi).front();
}

// Factual-arm posterior (eval mode).
inline std::vector<DiagonalGaussian> posterior_distribution_batch(ModelParams& params,
                                                                  const ModelConfig& cfg,
                                                                  const BatchData& b) {
    ad::Tape tape;
    LiftedModel lm = lift_model(tape, params, cfg);
    auto q = detail::branch_forward(tape, lm.posterior, b.x_tab, b.x_img, b.t, &b.y,
                                    Mode::eval, cfg);
    std::vector<DiagonalGaussian> out;
    for (Eigen::Index r = 0; r < b.size(); ++r) out.push_back(detail::row_gaussian(q.dist, r));
    return out;
}

inline DiagonalGaussian posterior_distribution(ModelParams& params, const ModelConfig& cfg,
                                               const Sample& s) {
    Cohort tmp;
    tmp.d_tab = static_cast<int>(s.x_tab.size());
    tmp.d_img = static_cast<int>(s.x_img.size());
    tmp.samples.push_back(s);
    return posterior_distribution_batch(params, cfg, make_batch(tmp)).front();
}

// Decoder on a plain score vector.
inline double decode(const Eigen::VectorXd& z, int t_arm, ModelParams& params) {
    if (z.size() + 1 != params.decoder.l1.W.rows())
        throw std::invalid_argument("decode: score length does not match decoder input");
    ad::Tape tape;
    ParamRegistry reg;
    LiftedLinear l1 = lift_linear(tape, params.decoder.l1, "decoder.l1", reg);
    LiftedLinear l2 = lift_linear(tape, params.decoder.l2, "decoder.l2", reg);
    Mat zrow = z.transpose();
    Eigen::VectorXd tc(1);
    tc << static_cast<double>(t_arm);
    return detail::decode_tape(tape, tape.constant(zrow), tc, l1, l2).value()(0, 0);
}

// Potential outcomes from the prior means (deterministic inference path:
// the prior mean is decoded, no sampling).
inline std::vector<PotentialOutcomes> predict_batch(ModelParams& params,
                                                    const ModelConfig& cfg, const Mat& x_tab,
                                                    const Mat& x_img) {
    ad::Tape tape;
    LiftedModel lm = lift_model(tape, params, cfg);
    const Eigen::Index n = x_tab.rows();
    auto arm0 = detail::branch_forward(tape, lm.prior, x_tab, x_img,
                                       Eigen::VectorXd::Zero(n), nullptr, Mode::eval, cfg);
    auto arm1 = detail::branch_forward(tape, lm.prior, x_tab, x_img,
                                       Eigen::VectorXd::Ones(n), nullptr, Mode::eval, cfg);
    ad::Var y0 = detail::decode_tape(tape, arm0.dist.mu, Eigen::VectorXd::Zero(n), lm.dec_l1,
                                     lm.dec_l2);
    ad::Var y1 = detail::decode_tape(tape, arm1.dist.mu, Eigen::VectorXd::Ones(n), lm.dec_l1,
                                     lm.dec_l2);
    std::vector<PotentialOutcomes> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r)
        out.push_back({y0.value()(r, 0), y1.value()(r, 0)});
    return out;
}

inline PotentialOutcomes predict(ModelParams& params, const ModelConfig& cfg, const Sample& s) {
    Mat xt(1, s.x_tab.size()), xi(1, s.x_img.size());
    for (std::size_t j = 0; j < s.x_tab.size(); ++j) xt(0, static_cast<Eigen::Index>(j)) = s.x_tab[j];
    for (std::size_t j = 0; j < s.x_img.size(); ++j) xi(0, static_cast<Eigen::Index>(j)) = s.x_img[j];
    return predict_batch(params, cfg, xt, xi).front();
}

// --- training objective --------------------------------------------------------

// Reparameterization noise for one loss evaluation: one eps matrix per
// Monte Carlo sample, plus (mixture fusion only) per-row component picks.
struct ElboNoise {
    std::vector<Mat> eps;                    // each B x d
    std::vector<std::vector<int>> component; // each length B, values {0 = tab, 1 = img}
};

inline ElboNoise make_elbo_noise(Rng& rng, Eigen::Index batch, const ModelConfig& cfg) {
    ElboNoise noise;
    for (int s = 0; s < cfg.mc_samples_train; ++s) {
        Mat eps(batch, cfg.d);
        for (Eigen::Index i = 0; i < batch; ++i)
            for (int j = 0; j < cfg.d; ++j) eps(i, j) = rng.normal();
        noise.eps.push_back(std::move(eps));
        std::vector<int> comp(static_cast<std::size_t>(batch), 0);
        if (cfg.fusion == Fusion::moe)
            for (auto& c : comp) c = rng.bernoulli(0.5) ? 1 : 0;  // equal weights
        noise.component.push_back(std::move(comp));
    }
    return noise;
}

struct ElboResult {
    double loss = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    std::map<std::string, Mat> grads;
};

// Factual-arm ELBO: cross-entropy of the decoded posterior sample plus
// beta * KL(posterior || prior), both on the arm actually received.
// Minimizing this maximizes the ELBO. Train-mode batch norm updates the
// running statistics in `params` as a side effect.
inline ElboResult elbo_loss(const BatchData& batch, ModelParams& params,
                            const ModelConfig& cfg, const ElboNoise& noise,
                            bool want_grads = true) {
    cfg.validate();
    if (batch.size() < 2)
        throw DataError("elbo_loss: batch must contain at least 2 samples (batch norm)");
    if (static_cast<int>(noise.eps.size()) != cfg.mc_samples_train)
        throw std::invalid_argument("elbo_loss: noise draw count != mc_samples_train");

    ad::Tape tape;
    LiftedModel lm = lift_model(tape, params, cfg);

    auto prior = detail::branch_forward(tape, lm.prior, batch.x_tab, batch.x_img, batch.t,
                                        nullptr, Mode::train, cfg);
    auto post = detail::branch_forward(tape, lm.posterior, batch.x_tab, batch.x_img, batch.t,
                                       &batch.y, Mode::train, cfg);

    ad::Var kl = detail::kl_rows(tape, post.dist, prior.dist);

    const Eigen::Index n = batch.size();
    Eigen::VectorXd one_minus_y = Eigen::VectorXd::Ones(n) - batch.y;
    std::optional<ad::Var> ce_total;
    for (int s = 0; s < cfg.mc_samples_train; ++s) {
        if (noise.eps[static_cast<std::size_t>(s)].rows() != n ||
            noise.eps[static_cast<std::size_t>(s)].cols() != cfg.d)
            throw std::invalid_argument("elbo_loss: noise shape mismatch");
        ad::Var eps = tape.constant(noise.eps[static_cast<std::size_t>(s)]);
        ad::Var z;
        if (cfg.fusion == Fusion::moe) {
            // draw within the picked component of the posterior mixture
            Eigen::VectorXd pick(n);
            for (Eigen::Index i = 0; i < n; ++i)
                pick[i] = noise.component[static_cast<std::size_t>(s)]
                                         [static_cast<std::size_t>(i)];
            ad::Var z_tab =
                ad::add(post.moe_tab->mu, ad::mul(ad::sqrt(post.moe_tab->var), eps));
            ad::Var z_img =
                ad::add(post.moe_img->mu, ad::mul(ad::sqrt(post.moe_img->var), eps));
            z = ad::add(ad::mul_colvec_const(z_tab, Eigen::VectorXd::Ones(n) - pick),
                        ad::mul_colvec_const(z_img, pick));
        } else {
            z = ad::add(post.dist.mu, ad::mul(ad::sqrt(post.dist.var), eps));
        }
        ad::Var p = ad::clamp(detail::decode_tape(tape, z, batch.t, lm.dec_l1, lm.dec_l2),
                              kProbClamp, 1.0 - kProbClamp);
        ad::Var ll = ad::add(ad::mul_colvec_const(ad::log(p), batch.y),
                             ad::mul_colvec_const(
                                 ad::log(ad::add_scalar(ad::mul_scalar(p, -1.0), 1.0)),
                                 one_minus_y));
        ad::Var ce_s = ad::mul_scalar(ll, -1.0);
        ce_total = ce_total ? ad::add(*ce_total, ce_s) : ce_s;
    }
    ad::Var ce = ad::mul_scalar(*ce_total, 1.0 / cfg.mc_samples_train);
    ad::Var per_sample = ad::add(ce, ad::mul_scalar(kl, cfg.beta));
    ad::Var loss = ad::mean_all(per_sample);

    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(per_sample.value()(i, 0)))
            throw NumericError("non-finite loss contribution from sample " +
                               batch.ids[static_cast<std::size_t>(i)]);

    ElboResult res;
    res.loss = loss.value()(0, 0);
    res.ce = ce.value().mean();
    res.kl = kl.value().mean();
    if (want_grads) {
        tape.backward(loss);
        for (const auto& [name, var] : lm.registry) {
            const Mat& g = var.grad();
            res.grads[name] = g.size() == 0
                                  ? Mat::Zero(var.value().rows(), var.value().cols())
                                  : g;
        }
    }
    return res;
}

}  // namespace progmod

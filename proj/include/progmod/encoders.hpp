#pragma once

#include <string>
#include <utility>
#include <vector>

#include "progmod/autodiff.hpp"
#include "progmod/distributions.hpp"
#include "progmod/rng.hpp"

namespace progmod {

using ad::Mat;

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-8;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kVarianceHeadFloor = 1e-6;

struct LinearParams {
    Mat W;  // in x out
    Mat b;  // 1 x out
    bool present() const { return W.size() != 0; }
};

struct BatchNormParams {
    Mat gamma, beta;                  // 1 x k, trainable
    Mat running_mean, running_var;    // 1 x k, state
};

struct BlockParams {
    LinearParams fc;
    BatchNormParams bn;
};

// Stack of affine -> batch-norm -> rectifier blocks.
struct TrunkParams {
    std::vector<BlockParams> blocks;
};

struct GaussianHeadParams {
    LinearParams mean_head;
    LinearParams var_head;  // affine output goes through softplus with a floor
    bool present() const { return mean_head.present(); }
};

// One branch of the model (the prior network or the posterior network).
// Each modality has its own trunk and its own treatment-conditioning layer;
// the conditioning layer is shared across the two treatment arms.
// Modality heads exist for expert-based fusion; the joint head exists for
// the concatenated-features variant.
struct EncoderParams {
    TrunkParams tab_trunk, img_trunk;
    LinearParams tab_cond, img_cond;
    GaussianHeadParams tab_head, img_head;
    GaussianHeadParams joint_head;
};

// --- initialization --------------------------------------------------------

inline void init_linear(LinearParams& p, int in, int out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    p.W = Mat(in, out);
    for (Eigen::Index i = 0; i < in; ++i)
        for (Eigen::Index j = 0; j < out; ++j) p.W(i, j) = rng.uniform(-bound, bound);
    p.b = Mat(1, out);
    for (Eigen::Index j = 0; j < out; ++j) p.b(0, j) = rng.uniform(-bound, bound);
}

inline void init_batchnorm(BatchNormParams& p, int k) {
    p.gamma = Mat::Ones(1, k);
    p.beta = Mat::Zero(1, k);
    p.running_mean = Mat::Zero(1, k);
    p.running_var = Mat::Ones(1, k);
}

inline void init_trunk(TrunkParams& p, int in, const std::vector<int>& widths, Rng& rng) {
    p.blocks.clear();
    int prev = in;
    for (int w : widths) {
        BlockParams blk;
        init_linear(blk.fc, prev, w, rng);
        init_batchnorm(blk.bn, w);
        p.blocks.push_back(std::move(blk));
        prev = w;
    }
}

inline void init_head(GaussianHeadParams& p, int in, int d, Rng& rng) {
    init_linear(p.mean_head, in, d, rng);
    init_linear(p.var_head, in, d, rng);
}

// --- named parameter traversal ---------------------------------------------

enum class ParamKind { trainable, state };

template <class F>
void visit_linear(LinearParams& p, const std::string& prefix, F&& f) {
    f(prefix + ".W", p.W, ParamKind::trainable);
    f(prefix + ".b", p.b, ParamKind::trainable);
}

template <class F>
void visit_batchnorm(BatchNormParams& p, const std::string& prefix, F&& f) {
    f(prefix + ".gamma", p.gamma, ParamKind::trainable);
    f(prefix + ".beta", p.beta, ParamKind::trainable);
    f(prefix + ".running_mean", p.running_mean, ParamKind::state);
    f(prefix + ".running_var", p.running_var, ParamKind::state);
}

template <class F>
void visit_trunk(TrunkParams& p, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        visit_linear(p.blocks[i].fc, bp + ".fc", f);
        visit_batchnorm(p.blocks[i].bn, bp + ".bn", f);
    }
}

template <class F>
void visit_head(GaussianHeadParams& p, const std::string& prefix, F&& f) {
    if (!p.present()) return;
    visit_linear(p.mean_head, prefix + ".mean", f);
    visit_linear(p.var_head, prefix + ".var", f);
}

template <class F>
void visit_encoder(EncoderParams& p, const std::string& prefix, F&& f) {
    visit_trunk(p.tab_trunk, prefix + ".tab_trunk", f);
    visit_trunk(p.img_trunk, prefix + ".img_trunk", f);
    if (p.tab_cond.present()) visit_linear(p.tab_cond, prefix + ".tab_cond", f);
    if (p.img_cond.present()) visit_linear(p.img_cond, prefix + ".img_cond", f);
    visit_head(p.tab_head, prefix + ".tab_head", f);
    visit_head(p.img_head, prefix + ".img_head", f);
    visit_head(p.joint_head, prefix + ".joint_head", f);
}

// --- tape lifting -----------------------------------------------------------

struct LiftedLinear {
    ad::Var W, b;
};

struct LiftedBlock {
    LiftedLinear fc;
    ad::Var gamma, beta;
    BatchNormParams* state = nullptr;  // running statistics live outside the tape
};

struct LiftedTrunk {
    std::vector<LiftedBlock> blocks;
};

struct LiftedHead {
    LiftedLinear mean_head, var_head;
    bool present = false;
};

struct LiftedEncoder {
    LiftedTrunk tab_trunk, img_trunk;
    LiftedLinear tab_cond, img_cond;
    LiftedHead tab_head, img_head, joint_head;
};

// (name, leaf) pairs in traversal order, for gradient harvesting.
using ParamRegistry = std::vector<std::pair<std::string, ad::Var>>;

inline LiftedLinear lift_linear(ad::Tape& t, LinearParams& p, const std::string& prefix,
                                ParamRegistry& reg) {
    LiftedLinear out{t.leaf(p.W, true), t.leaf(p.b, true)};
    reg.emplace_back(prefix + ".W", out.W);
    reg.emplace_back(prefix + ".b", out.b);
    return out;
}

inline LiftedTrunk lift_trunk(ad::Tape& t, TrunkParams& p, const std::string& prefix,
                              ParamRegistry& reg) {
    LiftedTrunk out;
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        LiftedBlock blk;
        blk.fc = lift_linear(t, p.blocks[i].fc, bp + ".fc", reg);
        blk.gamma = t.leaf(p.blocks[i].bn.gamma, true);
        blk.beta = t.leaf(p.blocks[i].bn.beta, true);
        reg.emplace_back(bp + ".bn.gamma", blk.gamma);
        reg.emplace_back(bp + ".bn.beta", blk.beta);
        blk.state = &p.blocks[i].bn;
        out.blocks.push_back(blk);
    }
    return out;
}

inline LiftedHead lift_head(ad::Tape& t, GaussianHeadParams& p, const std::string& prefix,
                            ParamRegistry& reg) {
    LiftedHead out;
    if (!p.present()) return out;
    out.mean_head = lift_linear(t, p.mean_head, prefix + ".mean", reg);
    out.var_head = lift_linear(t, p.var_head, prefix + ".var", reg);
    out.present = true;
    return out;
}

inline LiftedEncoder lift_encoder(ad::Tape& t, EncoderParams& p, const std::string& prefix,
                                  ParamRegistry& reg) {
    LiftedEncoder out;
    out.tab_trunk = lift_trunk(t, p.tab_trunk, prefix + ".tab_trunk", reg);
    out.img_trunk = lift_trunk(t, p.img_trunk, prefix + ".img_trunk", reg);
    if (p.tab_cond.present()) out.tab_cond = lift_linear(t, p.tab_cond, prefix + ".tab_cond", reg);
    if (p.img_cond.present()) out.img_cond = lift_linear(t, p.img_cond, prefix + ".img_cond", reg);
    out.tab_head = lift_head(t, p.tab_head, prefix + ".tab_head", reg);
    out.img_head = lift_head(t, p.img_head, prefix + ".img_head", reg);
    out.joint_head = lift_head(t, p.joint_head, prefix + ".joint_head", reg);
    return out;
}

// --- forward pieces ----------------------------------------------------------

inline ad::Var affine(ad::Tape&, ad::Var x, const LiftedLinear& lin) {
    return ad::add_rowvec(ad::matmul(x, lin.W), lin.b);
}

inline ad::Var batchnorm_forward(ad::Tape& t, ad::Var x, LiftedBlock& blk, Mode mode) {
    if (mode == Mode::train) {
        auto bn = ad::batchnorm_train(x, blk.gamma, blk.beta, kBatchNormEps);
        // update running statistics (state, not differentiated)
        BatchNormParams& s = *blk.state;
        s.running_mean = (1.0 - kBatchNormMomentum) * s.running_mean +
                         kBatchNormMomentum * bn.batch_mean.matrix();
        s.running_var = (1.0 - kBatchNormMomentum) * s.running_var +
                        kBatchNormMomentum * bn.batch_var.matrix();
        return bn.y;
    }
    // eval: normalize by stored statistics; pure in the parameters
    ad::Var rv = t.constant(blk.state->running_var);
    ad::Var rm = t.constant(blk.state->running_mean);
    ad::Var scale = ad::mul(blk.gamma, ad::reciprocal(ad::sqrt(ad::add_scalar(rv, kBatchNormEps))));
    ad::Var shift = ad::sub(blk.beta, ad::mul(scale, rm));
    return ad::add_rowvec(ad::mul_rowvec(x, scale), shift);
}

// Three (by default) blocks of affine -> batch-norm -> rectifier.
inline ad::Var trunk_forward(ad::Tape& t, ad::Var x, LiftedTrunk& trunk, Mode mode) {
    ad::Var h = x;
    for (auto& blk : trunk.blocks)
        h = ad::relu(batchnorm_forward(t, affine(t, h, blk.fc), blk, mode));
    return h;
}

// Appends the treatment column and applies the arm-shared conditioning layer.
inline ad::Var condition_features(ad::Tape& t, ad::Var features, const LiftedLinear& cond,
                                  const Eigen::VectorXd& t_col) {
    ad::Var tc = t.constant(Mat(t_col));
    return ad::relu(affine(t, ad::concat_cols(features, tc), cond));
}

// Both arms through the SAME conditioning parameters.
inline std::pair<ad::Var, ad::Var> condition_both_arms(ad::Tape& t, ad::Var features,
                                                       const LiftedLinear& cond) {
    const Eigen::Index n = features.value().rows();
    return {condition_features(t, features, cond, Eigen::VectorXd::Zero(n)),
            condition_features(t, features, cond, Eigen::VectorXd::Ones(n))};
}

struct GaussBatch {
    ad::Var mu, var;  // both n x d
};

// Mean head is affine, variance head is affine + softplus with a floor.
inline GaussBatch head_forward(ad::Tape& t, ad::Var phi, const LiftedHead& head) {
    return {affine(t, phi, head.mean_head),
            ad::clamp_min(ad::softplus(affine(t, phi, head.var_head)), kVarianceHeadFloor)};
}

// --- plain-matrix entry points -------------------------------------------------

// Feature batch from the tabular trunk. Train mode updates the running
// batch-norm statistics; eval mode is a pure function of the inputs.
inline Mat encode_tabular(const Mat& x_tab, EncoderParams& enc, Mode mode) {
    ad::Tape tape;
    ParamRegistry reg;
    LiftedTrunk trunk = lift_trunk(tape, enc.tab_trunk, "tab_trunk", reg);
    return trunk_forward(tape, tape.constant(x_tab), trunk, mode).value();
}

inline Mat encode_image_features(const Mat& x_img, EncoderParams& enc, Mode mode) {
    ad::Tape tape;
    ParamRegistry reg;
    LiftedTrunk trunk = lift_trunk(tape, enc.img_trunk, "img_trunk", reg);
    return trunk_forward(tape, tape.constant(x_img), trunk, mode).value();
}

// Per-arm features Phi_0, Phi_1 through one shared conditioning layer.
inline std::pair<Mat, Mat> condition_on_treatment(const Mat& features, LinearParams& cond) {
    ad::Tape tape;
    ParamRegistry reg;
    LiftedLinear lin = lift_linear(tape, cond, "cond", reg);
    auto [phi0, phi1] = condition_both_arms(tape, tape.constant(features), lin);
    return {phi0.value(), phi1.value()};
}

// Expert distribution per sample from a feature batch.
inline std::vector<DiagonalGaussian> gaussian_head(const Mat& phi, GaussianHeadParams& head) {
    ad::Tape tape;
    ParamRegistry reg;
    LiftedHead lifted = lift_head(tape, head, "head", reg);
    GaussBatch g = head_forward(tape, tape.constant(phi), lifted);
    std::vector<DiagonalGaussian> out;
    out.reserve(static_cast<std::size_t>(phi.rows()));
    for (Eigen::Index r = 0; r < phi.rows(); ++r)
        out.emplace_back(g.mu.value().row(r).transpose(), g.var.value().row(r).transpose());
    return out;
}

}  // namespace progmod

#include <catch2/catch_amalgamated.hpp>

#include "progmod/encoders.hpp"
#include "progmod/model.hpp"
#include "progmod/rng.hpp"
#include "support/gradcheck.hpp"
#include "support/matrix_compare.hpp"

using namespace progmod;
using ad::Mat;

namespace {

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -2.0, double hi = 2.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

}  // namespace

TEST_CASE("encode_tabular: zero weights and shifts give zero features") {
    EncoderParams enc;
    Rng rng(1);
    init_trunk(enc.tab_trunk, 4, {5, 3}, rng);
    for (auto& blk : enc.tab_trunk.blocks) {
        blk.fc.W.setZero();
        blk.fc.b.setZero();
        blk.bn.beta.setZero();
    }
    Mat x = random_mat(rng, 6, 4);
    Mat f = encode_tabular(x, enc, Mode::eval);
    REQUIRE(f.rows() == 6);
    REQUIRE(f.cols() == 3);
    REQUIRE(f.isZero(0.0));
}

TEST_CASE("encode_tabular: identity-configured single block passes input through") {
    EncoderParams enc;
    Rng rng(2);
    init_trunk(enc.tab_trunk, 3, {3}, rng);
    auto& blk = enc.tab_trunk.blocks[0];
    blk.fc.W = Mat::Identity(3, 3);
    blk.fc.b.setZero();
    blk.bn.gamma.setOnes();
    blk.bn.beta.setZero();
    blk.bn.running_mean.setZero();
    blk.bn.running_var.setOnes();
    Mat x = random_mat(rng, 5, 3, 0.1, 2.0);  // positive, so the rectifier is inert
    Mat f = encode_tabular(x, enc, Mode::eval);
    REQUIRE((f - x).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("encoders: eval mode is pure, train mode updates running stats") {
    EncoderParams enc;
    Rng rng(3);
    init_trunk(enc.img_trunk, 6, {4, 4}, rng);
    Mat x = random_mat(rng, 8, 6);
    Mat f1 = encode_image_features(x, enc, Mode::eval);
    Mat f2 = encode_image_features(x, enc, Mode::eval);
    REQUIRE(testsupport::bit_equal(f1, f2));  // bit-identical

    Mat rm_before = enc.img_trunk.blocks[0].bn.running_mean;
    Mat train_out = encode_image_features(x, enc, Mode::train);
    REQUIRE_FALSE(testsupport::bit_equal(enc.img_trunk.blocks[0].bn.running_mean, rm_before));
}

TEST_CASE("encode in train mode rejects a batch of one") {
    EncoderParams enc;
    Rng rng(4);
    init_trunk(enc.tab_trunk, 3, {3}, rng);
    Mat x = random_mat(rng, 1, 3);
    REQUIRE_THROWS_AS(encode_tabular(x, enc, Mode::train), NumericError);
}

TEST_CASE("condition_on_treatment: layer ignoring t gives identical arms") {
    Rng rng(5);
    LinearParams cond;
    init_linear(cond, 5, 4, rng);  // features of width 4 plus the t coordinate
    cond.W.row(4).setZero();       // zero weight on the treatment coordinate
    Mat features = random_mat(rng, 7, 4);
    auto [phi0, phi1] = condition_on_treatment(features, cond);
    REQUIRE(testsupport::bit_equal(phi0, phi1));
}

TEST_CASE("condition_on_treatment: layer reading only t rectifies 0 and 1") {
    LinearParams cond;
    cond.W = Mat::Zero(4, 3);
    cond.W.row(3).setOnes();  // unit weight on the treatment coordinate
    cond.b = Mat::Zero(1, 3);
    Rng rng(6);
    Mat features = random_mat(rng, 5, 3);
    auto [phi0, phi1] = condition_on_treatment(features, cond);
    REQUIRE(phi0.isZero(0.0));
    REQUIRE((phi1.array() == 1.0).all());
}

TEST_CASE("condition_on_treatment: perturbing the shared layer moves both arms") {
    Rng rng(7);
    LinearParams cond;
    init_linear(cond, 5, 4, rng);
    Mat features = random_mat(rng, 6, 4, 0.5, 2.0);
    auto [phi0_a, phi1_a] = condition_on_treatment(features, cond);
    cond.W(1, 2) += 0.25;
    auto [phi0_b, phi1_b] = condition_on_treatment(features, cond);
    REQUIRE_FALSE(testsupport::bit_equal(phi0_a, phi0_b));
    REQUIRE_FALSE(testsupport::bit_equal(phi1_a, phi1_b));
}

TEST_CASE("gaussian_head: zero parameters give N(0, softplus(0))") {
    GaussianHeadParams head;
    head.mean_head.W = Mat::Zero(4, 2);
    head.mean_head.b = Mat::Zero(1, 2);
    head.var_head.W = Mat::Zero(4, 2);
    head.var_head.b = Mat::Zero(1, 2);
    Rng rng(8);
    Mat phi = random_mat(rng, 3, 4);
    auto gs = gaussian_head(phi, head);
    REQUIRE(gs.size() == 3);
    for (const auto& g : gs) {
        for (int i = 0; i < 2; ++i) {
            REQUIRE(g.mu[i] == 0.0);
            REQUIRE(g.sigma2[i] == Catch::Approx(std::log(2.0)).margin(1e-12));
        }
    }
}

TEST_CASE("gaussian_head: zero weights with a mean bias reproduce the bias") {
    GaussianHeadParams head;
    head.mean_head.W = Mat::Zero(3, 2);
    head.mean_head.b = Mat(1, 2);
    head.mean_head.b << 0.7, -1.2;
    head.var_head.W = Mat::Zero(3, 2);
    head.var_head.b = Mat::Zero(1, 2);
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        auto gs = gaussian_head(random_mat(rng, 2, 3), head);
        for (const auto& g : gs) {
            REQUIRE(g.mu[0] == 0.7);
            REQUIRE(g.mu[1] == -1.2);
        }
    }
}

TEST_CASE("gaussian_head: variance strictly positive over random inputs") {
    Rng rng(10);
    GaussianHeadParams head;
    init_head(head, 5, 3, rng);
    // push the variance head negative to stress the softplus floor
    head.var_head.b.array() -= 3.0;
    Mat phi = random_mat(rng, 10000, 5, -6.0, 6.0);
    auto gs = gaussian_head(phi, head);
    for (const auto& g : gs)
        for (int i = 0; i < 3; ++i) REQUIRE(g.sigma2[i] >= kVarianceHeadFloor);
}

TEST_CASE("trunk gradients match finite differences through all blocks") {
    Rng rng(11);
    TrunkParams trunk;
    init_trunk(trunk, 4, {3, 3}, rng);
    Mat x = random_mat(rng, 5, 4);

    // inputs in visit order: fc.W, fc.b, gamma, beta per block
    std::vector<Mat> inputs;
    visit_trunk(trunk, "t", [&](const std::string&, Mat& m, ParamKind kind) {
        if (kind == ParamKind::trainable) inputs.push_back(m);
    });
    auto build = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
        LiftedTrunk lt;
        std::size_t i = 0;
        for (auto& blk : trunk.blocks) {
            LiftedBlock lb;
            lb.fc = LiftedLinear{v[i], v[i + 1]};
            lb.gamma = v[i + 2];
            lb.beta = v[i + 3];
            lb.state = &blk.bn;
            i += 4;
            lt.blocks.push_back(lb);
        }
        return ad::mean_all(ad::square(trunk_forward(t, t.constant(x), lt, Mode::train)));
    };
    auto bad = gradcheck::check(build, inputs);
    REQUIRE(bad.empty());
}

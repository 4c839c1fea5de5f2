#include <catch2/catch_amalgamated.hpp>

#include "progmod/autodiff.hpp"
#include "progmod/rng.hpp"
#include "support/gradcheck.hpp"

using namespace progmod;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -2.0, double hi = 2.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

void require_clean(const std::vector<gradcheck::Mismatch>& bad) {
    if (!bad.empty()) {
        CAPTURE(bad.front().input, bad.front().row, bad.front().col, bad.front().analytic,
                bad.front().numeric);
    }
    REQUIRE(bad.empty());
}

}  // namespace

TEST_CASE("tape: forward values and simple chain rule") {
    Tape t;
    Mat a(1, 1), b(1, 1);
    a << 3.0;
    b << 4.0;
    Var va = t.leaf(a, true);
    Var vb = t.leaf(b, true);
    Var out = ad::mul(ad::add(va, vb), va);  // (a+b)*a = 21
    REQUIRE(out.value()(0, 0) == 21.0);
    t.backward(out);
    REQUIRE(va.grad()(0, 0) == 10.0);  // 2a + b
    REQUIRE(vb.grad()(0, 0) == 3.0);   // a
}

TEST_CASE("gradcheck: elementwise and broadcast ops") {
    Rng rng(11);
    Mat a = random_mat(rng, 4, 3);
    Mat b = random_mat(rng, 4, 3, 0.3, 2.0);  // positive, safe for div/log
    Mat r = random_mat(rng, 1, 3, 0.5, 1.5);

    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1])));
        },
        {a, b}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) { return ad::mean_all(ad::div(v[0], v[1])); },
        {a, b}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::mul_rowvec(ad::add_rowvec(v[0], v[1]), v[1]));
        },
        {a, r}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::log(ad::add_scalar(ad::square(v[0]), 0.5)));
        },
        {a}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::sqrt(ad::add_scalar(ad::square(v[0]), 0.1)));
        },
        {a}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::reciprocal(ad::add_scalar(ad::square(v[0]), 0.4)));
        },
        {a}));
}

TEST_CASE("gradcheck: activations") {
    Rng rng(12);
    Mat a = random_mat(rng, 5, 4);
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) { return ad::mean_all(ad::sigmoid(v[0])); },
        {a}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) { return ad::mean_all(ad::softplus(v[0])); },
        {a}));
    // relu is kinked at 0; random entries stay away from it
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) { return ad::mean_all(ad::relu(v[0])); },
        {a}));
}

TEST_CASE("gradcheck: matmul, concat, reductions") {
    Rng rng(13);
    Mat a = random_mat(rng, 4, 3);
    Mat w = random_mat(rng, 3, 5);
    Mat b = random_mat(rng, 4, 2);
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::matmul(v[0], v[1]));
        },
        {a, w}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::square(ad::concat_cols(v[0], v[1])));
        },
        {a, b}));
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::square(ad::sum_cols(v[0])));
        },
        {a}));
    Eigen::VectorXd mask(4);
    mask << 1, 0, 1, 0;
    require_clean(gradcheck::check(
        [mask](Tape& t, const std::vector<Var>& v) {
            return ad::mean_all(ad::square(ad::mul_colvec_const(v[0], mask)));
        },
        {a}));
}

TEST_CASE("gradcheck: clamp passes gradient only inside the interval") {
    Mat a(1, 3);
    a << -2.0, 0.2, 2.0;
    Tape t;
    Var v = t.leaf(a, true);
    Var out = ad::mean_all(ad::clamp(v, -1.0, 1.0));
    t.backward(out);
    REQUIRE(v.grad()(0, 0) == 0.0);
    REQUIRE(v.grad()(0, 1) == Catch::Approx(1.0 / 3.0));
    REQUIRE(v.grad()(0, 2) == 0.0);
}

TEST_CASE("gradcheck: batch normalization (train mode)") {
    Rng rng(14);
    Mat x = random_mat(rng, 6, 3);
    Mat gamma = random_mat(rng, 1, 3, 0.5, 1.5);
    Mat beta = random_mat(rng, 1, 3, -0.5, 0.5);
    require_clean(gradcheck::check(
        [](Tape& t, const std::vector<Var>& v) {
            auto bn = ad::batchnorm_train(v[0], v[1], v[2], 1e-8);
            return ad::mean_all(ad::square(bn.y));
        },
        {x, gamma, beta}));
}

TEST_CASE("batchnorm_train: output statistics match scale and shift") {
    Rng rng(15);
    Mat x = random_mat(rng, 4, 5, -3.0, 3.0);
    Mat gamma = random_mat(rng, 1, 5, 0.3, 2.0);
    Mat beta = random_mat(rng, 1, 5, -1.0, 1.0);
    Tape t;
    auto bn = ad::batchnorm_train(t.leaf(x, true), t.leaf(gamma, true), t.leaf(beta, true),
                                  1e-8);
    const Mat& y = bn.y.value();
    for (Eigen::Index j = 0; j < 5; ++j) {
        const double mean = y.col(j).mean();
        const double var = (y.col(j).array() - mean).square().sum() / 4.0;
        REQUIRE(mean == Catch::Approx(beta(0, j)).margin(1e-6));
        REQUIRE(std::sqrt(var) == Catch::Approx(gamma(0, j)).margin(1e-6));
    }
}

TEST_CASE("batchnorm_train: rejects batches smaller than two") {
    Tape t;
    Mat x(1, 3), g(1, 3), b(1, 3);
    x.setZero();
    g.setOnes();
    b.setZero();
    REQUIRE_THROWS_AS(
        ad::batchnorm_train(t.leaf(x, true), t.leaf(g, true), t.leaf(b, true), 1e-8),
        NumericError);
}

TEST_CASE("gradcheck: composed product-of-experts fusion and KL graph") {
    Rng rng(16);
    const Eigen::Index n = 4, d = 3;
    Mat mu1 = random_mat(rng, n, d), mu2 = random_mat(rng, n, d);
    Mat raw1 = random_mat(rng, n, d), raw2 = random_mat(rng, n, d);

    auto build = [](Tape& t, const std::vector<Var>& v) {
        // experts with softplus variances; fuse with a unit prior; take
        // KL against the first expert, all through tape primitives
        Var var1 = ad::clamp_min(ad::softplus(v[2]), 1e-6);
        Var var2 = ad::clamp_min(ad::softplus(v[3]), 1e-6);
        Var prec = ad::add_scalar(ad::add(ad::reciprocal(var1), ad::reciprocal(var2)), 1.0);
        Var fused_var = ad::clamp_min(ad::reciprocal(prec), 1e-12);
        Var weighted =
            ad::add(ad::mul(v[0], ad::reciprocal(var1)), ad::mul(v[1], ad::reciprocal(var2)));
        Var fused_mu = ad::mul(weighted, fused_var);

        Var r = ad::div(fused_var, var1);
        Var m = ad::div(ad::square(ad::sub(fused_mu, v[0])), var1);
        Var kl = ad::mul_scalar(
            ad::sum_cols(ad::sub(ad::add_scalar(ad::add(r, m), -1.0), ad::log(r))), 0.5);
        return ad::mean_all(kl);
    };
    require_clean(gradcheck::check(build, {mu1, mu2, raw1, raw2}));
}

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "progmod/metrics.hpp"
#include "progmod/rng.hpp"
#include "support/oracles.hpp"

using namespace progmod;

namespace {

EvalRecord rec(double y0_hat, double y1_hat, int t, int y) {
    EvalRecord r;
    r.pred = {y0_hat, y1_hat};
    r.t = t;
    r.y = y;
    return r;
}

std::vector<EvalRecord> random_records(Rng& rng, int n, bool with_oracle) {
    std::vector<EvalRecord> rs;
    for (int i = 0; i < n; ++i) {
        EvalRecord r = rec(rng.uniform01(), rng.uniform01(), rng.bernoulli(0.5) ? 1 : 0,
                           rng.bernoulli(0.5) ? 1 : 0);
        // coarse grid makes score ties common, exercising the tie rules
        if (rng.bernoulli(0.3)) {
            r.pred.y0_hat = std::round(r.pred.y0_hat * 4.0) / 4.0;
            r.pred.y1_hat = std::round(r.pred.y1_hat * 4.0) / 4.0;
        }
        if (with_oracle) {
            OracleInfo o;
            o.y0_prob = rng.uniform01();
            o.y1_prob = rng.uniform01();
            o.y0 = rng.bernoulli(o.y0_prob) ? 1 : 0;
            o.y1 = rng.bernoulli(o.y1_prob) ? 1 : 0;
            o.propensity = rng.uniform(0.05, 0.95);
            r.oracle = o;
        }
        rs.push_back(r);
    }
    return rs;
}

oracle::Record to_oracle_record(const EvalRecord& r) {
    oracle::Record o;
    o.y0_hat = r.pred.y0_hat;
    o.y1_hat = r.pred.y1_hat;
    o.t = r.t;
    o.y = r.y;
    if (r.oracle) o.tau_true = r.oracle->y1_prob - r.oracle->y0_prob;
    return o;
}

}  // namespace

TEST_CASE("policy_risk: reference cases") {
    // perfect policy, perfect outcomes
    std::vector<EvalRecord> perfect(5, rec(0.2, 0.9, 1, 1));
    REQUIRE(policy_risk(perfect) == 0.0);

    // everyone recommended surgery and treated, half favorable
    std::vector<EvalRecord> half = {rec(0.1, 0.8, 1, 1), rec(0.1, 0.8, 1, 0),
                                    rec(0.2, 0.9, 1, 1), rec(0.2, 0.9, 1, 0)};
    REQUIRE(policy_risk(half) == 0.5);

    // two cells: (pi=1,t=1,y=1) and (pi=0,t=0,y=0)
    std::vector<EvalRecord> four = {rec(0.1, 0.9, 1, 1), rec(0.1, 0.9, 1, 1),
                                    rec(0.9, 0.2, 0, 0), rec(0.9, 0.2, 0, 0)};
    REQUIRE(policy_risk(four) == 0.5);

    REQUIRE_THROWS_AS(policy_risk(std::vector<EvalRecord>{}), MetricError);
}

TEST_CASE("policy_risk: ties recommend the conservative arm") {
    std::vector<EvalRecord> rs = {rec(0.6, 0.6, 0, 1), rec(0.6, 0.6, 0, 1)};
    // pi = 0 everywhere, E[y|t=0,pi=0] = 1, P(pi=0) = 1
    REQUIRE(policy_risk(rs) == 0.0);
}

TEST_CASE("policy_risk: empty cells contribute zero and set a flag") {
    // pi = 1 for everyone but nobody was factually treated
    std::vector<EvalRecord> rs = {rec(0.1, 0.9, 0, 1), rec(0.1, 0.9, 0, 0)};
    std::vector<std::string> flags;
    REQUIRE(policy_risk(rs, &flags) == 1.0);
    REQUIRE(flags.size() == 1);
    REQUIRE(flags[0].find("pi1_t1") != std::string::npos);
}

TEST_CASE("auc_per_arm: reference cases") {
    std::vector<EvalRecord> ranked = {rec(0.9, 0, 0, 1), rec(0.7, 0, 0, 1),
                                      rec(0.4, 0, 0, 0), rec(0.2, 0, 0, 0)};
    REQUIRE(auc_per_arm(ranked, 0) == 1.0);

    std::vector<EvalRecord> inverted = {rec(0.2, 0, 0, 1), rec(0.4, 0, 0, 1),
                                        rec(0.7, 0, 0, 0), rec(0.9, 0, 0, 0)};
    REQUIRE(auc_per_arm(inverted, 0) == 0.0);

    std::vector<EvalRecord> flat = {rec(0.5, 0, 0, 1), rec(0.5, 0, 0, 1),
                                    rec(0.5, 0, 0, 0), rec(0.5, 0, 0, 0)};
    REQUIRE(auc_per_arm(flat, 0) == 0.5);

    std::vector<EvalRecord> degenerate = {rec(0.5, 0, 0, 1), rec(0.6, 0, 0, 1)};
    REQUIRE_THROWS_AS(auc_per_arm(degenerate, 0), MetricError);
    REQUIRE_THROWS_AS(auc_per_arm(ranked, 1), MetricError);  // arm 1 empty
}

TEST_CASE("acc_per_arm: reference cases") {
    std::vector<EvalRecord> all = {rec(0.9, 0, 0, 1), rec(0.8, 0, 0, 1), rec(0.1, 0, 0, 0)};
    REQUIRE(acc_per_arm(all, 0) == 1.0);
    std::vector<EvalRecord> none = {rec(0.1, 0, 0, 1), rec(0.9, 0, 0, 0)};
    REQUIRE(acc_per_arm(none, 0) == 0.0);
    std::vector<EvalRecord> three_of_four = {rec(0.9, 0, 0, 1), rec(0.8, 0, 0, 1),
                                             rec(0.7, 0, 0, 0), rec(0.1, 0, 0, 0)};
    REQUIRE(acc_per_arm(three_of_four, 0) == 0.75);
    REQUIRE_THROWS_AS(acc_per_arm(all, 1), MetricError);
}

TEST_CASE("pehe: reference cases") {
    Rng rng(61);
    auto rs = random_records(rng, 20, true);
    // predictions equal to the oracle probabilities give zero
    for (auto& r : rs) {
        r.pred.y0_hat = r.oracle->y0_prob;
        r.pred.y1_hat = r.oracle->y1_prob;
    }
    REQUIRE(pehe(rs) == 0.0);
    // constant +0.1 offset on the treated prediction only
    for (auto& r : rs) r.pred.y1_hat = r.oracle->y1_prob + 0.1;
    REQUIRE(pehe(rs) == Catch::Approx(0.1).margin(1e-12));

    auto blind = rs;
    blind[3].oracle.reset();
    REQUIRE_THROWS_AS(pehe(blind), MetricError);
}

TEST_CASE("metrics match brute-force oracles on random record sets") {
    Rng rng(62);
    int auc_checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(49));
        auto rs = random_records(rng, n, true);
        std::vector<oracle::Record> ors;
        for (const auto& r : rs) ors.push_back(to_oracle_record(r));

        REQUIRE(policy_risk(rs) == Catch::Approx(oracle::policy_risk_brute(ors)).margin(1e-12));
        REQUIRE(pehe(rs) == Catch::Approx(oracle::pehe_brute(ors)).margin(1e-12));
        for (int arm = 0; arm < 2; ++arm) {
            bool lib_threw = false, brute_threw = false;
            double lib = 0, brute = 0;
            try {
                lib = auc_per_arm(rs, arm);
            } catch (const MetricError&) {
                lib_threw = true;
            }
            try {
                brute = oracle::auc_brute(ors, arm);
            } catch (const std::invalid_argument&) {
                brute_threw = true;
            }
            REQUIRE(lib_threw == brute_threw);
            if (!lib_threw) {
                REQUIRE(lib == Catch::Approx(brute).margin(1e-12));
                ++auc_checked;
            }
            try {
                lib = acc_per_arm(rs, arm);
                REQUIRE(lib == Catch::Approx(oracle::acc_brute(ors, arm)).margin(1e-12));
            } catch (const MetricError&) {
            }
        }
    }
    REQUIRE(auc_checked > 500);
}

TEST_CASE("metrics are permutation invariant") {
    Rng rng(63);
    auto rs = random_records(rng, 30, true);
    const double r1 = policy_risk(rs), a1 = auc_per_arm(rs, 0), p1 = pehe(rs);
    for (int trial = 0; trial < 10; ++trial) {
        rng.shuffle(rs);
        REQUIRE(policy_risk(rs) == r1);
        REQUIRE(auc_per_arm(rs, 0) == a1);
        REQUIRE(pehe(rs) == p1);
    }
}

TEST_CASE("auc is invariant to strictly monotone transforms of the scores") {
    Rng rng(64);
    for (int trial = 0; trial < 20; ++trial) {
        auto rs = random_records(rng, 40, false);
        double base;
        try {
            base = auc_per_arm(rs, 0);
        } catch (const MetricError&) {
            continue;
        }
        const double a = rng.uniform(0.2, 3.0), b = rng.uniform(-1.0, 1.0);
        auto mapped = rs;
        for (auto& r : mapped) {
            // strictly increasing map: affine then odd-cubic
            auto f = [&](double x) {
                const double u = a * x + b;
                return u * u * u + 0.5 * u;
            };
            r.pred.y0_hat = f(r.pred.y0_hat);
            r.pred.y1_hat = f(r.pred.y1_hat);
        }
        REQUIRE(auc_per_arm(mapped, 0) == Catch::Approx(base).margin(1e-12));
    }
}

TEST_CASE("policy risk depends only on the recommended arm") {
    Rng rng(65);
    for (int trial = 0; trial < 20; ++trial) {
        auto rs = random_records(rng, 40, false);
        const double base = policy_risk(rs);
        auto mapped = rs;
        const double scale = rng.uniform(0.1, 2.0), shift = rng.uniform(-0.5, 0.5);
        for (auto& r : mapped) {
            // preserves sign(y1_hat - y0_hat)
            r.pred.y0_hat = scale * r.pred.y0_hat + shift;
            r.pred.y1_hat = scale * r.pred.y1_hat + shift;
        }
        REQUIRE(policy_risk(mapped) == base);
    }
}

TEST_CASE("compute_report: flags degenerate pieces, serializes exact keys") {
    // only conservative records, all favorable: auc0 undefined, arm 1 empty
    std::vector<EvalRecord> rs = {rec(0.9, 0.1, 0, 1), rec(0.8, 0.2, 0, 1)};
    auto rep = compute_report(rs);
    REQUIRE(rep.n == 2);
    REQUIRE(rep.n_pi0 == 2);
    REQUIRE_FALSE(rep.auc0.has_value());
    REQUIRE_FALSE(rep.auc1.has_value());
    REQUIRE(rep.acc0.has_value());
    REQUIRE_FALSE(rep.acc1.has_value());
    REQUIRE_FALSE(rep.pehe.has_value());
    REQUIRE(std::count_if(rep.flags.begin(), rep.flags.end(), [](const std::string& f) {
                return f.find("undefined") != std::string::npos;
            }) == 3);

    json j = report_to_json(rep);
    for (const char* key : {"r_pol", "auc0", "auc1", "acc0", "acc1", "n", "n_pi0", "n_pi1",
                            "n_t0", "n_t1", "flags"})
        REQUIRE(j.contains(key));
    REQUIRE_FALSE(j.contains("pehe"));  // oracle absent
    REQUIRE(j["auc0"].is_null());

    Rng rng(66);
    auto with_oracle = random_records(rng, 30, true);
    json j2 = report_to_json(compute_report(with_oracle));
    REQUIRE(j2.contains("pehe"));
}

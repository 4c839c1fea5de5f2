#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "progmod/core.hpp"
#include "progmod/model.hpp"

namespace progmod {

struct EvalRecord {
    PotentialOutcomes pred;
    int t = 0;
    int y = 0;
    std::optional<OracleInfo> oracle;
};

struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Recommend surgery only when it strictly improves the predicted outcome;
// ties go to the conservative arm.
inline int policy_of(const EvalRecord& r) { return r.pred.y1_hat > r.pred.y0_hat ? 1 : 0; }

// R_POL = 1 - [ E(y | t=1, pi=1) P(pi=1) + E(y | t=0, pi=0) P(pi=0) ].
// An empty (pi, t) cell contributes zero to its term; `flags` (when given)
// records which cells were empty instead of failing on small cohorts.
inline double policy_risk(std::span<const EvalRecord> records,
                          std::vector<std::string>* flags = nullptr) {
    if (records.empty()) throw MetricError("policy_risk: no records");
    long n_pi1 = 0, n11 = 0, n00 = 0;
    double y11 = 0.0, y00 = 0.0;
    for (const auto& r : records) {
        const int pi = policy_of(r);
        if (pi == 1) ++n_pi1;
        if (pi == 1 && r.t == 1) {
            ++n11;
            y11 += r.y;
        } else if (pi == 0 && r.t == 0) {
            ++n00;
            y00 += r.y;
        }
    }
    const auto n = static_cast<double>(records.size());
    const double p1 = static_cast<double>(n_pi1) / n;
    const double p0 = 1.0 - p1;
    double value = 1.0;
    if (n11 > 0)
        value -= (y11 / static_cast<double>(n11)) * p1;
    else if (flags && n_pi1 > 0)
        flags->push_back("policy_risk_empty_cell_pi1_t1");
    if (n00 > 0)
        value -= (y00 / static_cast<double>(n00)) * p0;
    else if (flags && n_pi1 < static_cast<long>(records.size()))
        flags->push_back("policy_risk_empty_cell_pi0_t0");
    return value;
}

// Mann-Whitney AUC over the factual-arm subset via rank sums; tied scores
// contribute 1/2 per pair.
inline double auc_per_arm(std::span<const EvalRecord> records, int arm) {
    std::vector<std::pair<double, int>> scored;  // (score, label)
    for (const auto& r : records) {
        if (r.t != arm) continue;
        scored.emplace_back(arm == 0 ? r.pred.y0_hat : r.pred.y1_hat, r.y);
    }
    long n_pos = 0, n_neg = 0;
    for (const auto& [score, label] : scored) (label == 1 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0)
        throw MetricError("auc undefined for arm " + std::to_string(arm) +
                          ": factual subset needs both outcome classes (" +
                          std::to_string(n_pos) + " positive, " + std::to_string(n_neg) +
                          " negative)");
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    // midranks over tie groups
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (scored[k].second == 1) rank_sum_pos += midrank;
        i = j;
    }
    const double u = rank_sum_pos - static_cast<double>(n_pos) *
                                        (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Fraction of factual-arm records where thresholding the predicted
// probability at 0.5 recovers the observed outcome.
inline double acc_per_arm(std::span<const EvalRecord> records, int arm) {
    long n = 0, correct = 0;
    for (const auto& r : records) {
        if (r.t != arm) continue;
        ++n;
        const double score = arm == 0 ? r.pred.y0_hat : r.pred.y1_hat;
        if ((score >= 0.5 ? 1 : 0) == r.y) ++correct;
    }
    if (n == 0)
        throw MetricError("accuracy undefined: no records factually in arm " +
                          std::to_string(arm));
    return static_cast<double>(correct) / static_cast<double>(n);
}

// Root-mean-square error between predicted and true effects, on the oracle's
// outcome probabilities. Terms are summed in sorted order so the result is
// exactly invariant to record permutations.
inline double pehe(std::span<const EvalRecord> records) {
    if (records.empty()) throw MetricError("pehe: no records");
    std::vector<double> sq;
    sq.reserve(records.size());
    for (const auto& r : records) {
        if (!r.oracle) throw MetricError("pehe: oracle missing on a record");
        const double tau_hat = r.pred.y1_hat - r.pred.y0_hat;
        const double tau = r.oracle->y1_prob - r.oracle->y0_prob;
        sq.push_back((tau_hat - tau) * (tau_hat - tau));
    }
    std::sort(sq.begin(), sq.end());
    double acc = 0.0;
    for (double v : sq) acc += v;
    return std::sqrt(acc / static_cast<double>(records.size()));
}

struct MetricsReport {
    double r_pol = 0.0;
    std::optional<double> auc0, auc1, acc0, acc1;
    std::optional<double> pehe;
    long n = 0, n_pi0 = 0, n_pi1 = 0, n_t0 = 0, n_t1 = 0;
    std::vector<std::string> flags;
};

// Full report; degenerate per-arm metrics are flagged and left unset rather
// than silently defaulted.
inline MetricsReport compute_report(std::span<const EvalRecord> records) {
    MetricsReport rep;
    rep.n = static_cast<long>(records.size());
    for (const auto& r : records) {
        (policy_of(r) == 1 ? rep.n_pi1 : rep.n_pi0)++;
        (r.t == 1 ? rep.n_t1 : rep.n_t0)++;
    }
    rep.r_pol = policy_risk(records, &rep.flags);
    for (int arm = 0; arm < 2; ++arm) {
        auto& auc = arm == 0 ? rep.auc0 : rep.auc1;
        auto& acc = arm == 0 ? rep.acc0 : rep.acc1;
        try {
            auc = auc_per_arm(records, arm);
        } catch (const MetricError&) {
            rep.flags.push_back("auc" + std::to_string(arm) + "_undefined");
        }
        try {
            acc = acc_per_arm(records, arm);
        } catch (const MetricError&) {
            rep.flags.push_back("acc" + std::to_string(arm) + "_undefined");
        }
    }
    bool all_oracle = !records.empty();
    for (const auto& r : records)
        if (!r.oracle) all_oracle = false;
    if (all_oracle) rep.pehe = pehe(records);
    return rep;
}

// Flat key-value document; pehe appears only when the oracle was present.
inline json report_to_json(const MetricsReport& r) {
    json j;
    j["r_pol"] = r.r_pol;
    j["auc0"] = r.auc0 ? json(*r.auc0) : json(nullptr);
    j["auc1"] = r.auc1 ? json(*r.auc1) : json(nullptr);
    j["acc0"] = r.acc0 ? json(*r.acc0) : json(nullptr);
    j["acc1"] = r.acc1 ? json(*r.acc1) : json(nullptr);
    if (r.pehe) j["pehe"] = *r.pehe;
    j["n"] = r.n;
    j["n_pi0"] = r.n_pi0;
    j["n_pi1"] = r.n_pi1;
    j["n_t0"] = r.n_t0;
    j["n_t1"] = r.n_t1;
    j["flags"] = r.flags;
    return j;
}

}  // namespace progmod

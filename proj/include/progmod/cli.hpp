#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "progmod/manifest.hpp"
#include "progmod/metrics.hpp"
#include "progmod/synthetic.hpp"
#include "progmod/trainer.hpp"

namespace progmod::cli {

namespace fs = std::filesystem;

// Machine-readable artifacts go to files under --out; the console only gets
// short human-readable summaries.

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) {
    return v ? fmt(*v) : "nan";
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir.string());
}

inline std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + p.string());
    return out;
}

inline json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("config file " + path + ": " + e.what());
    }
}

}  // namespace detail

// --- generate -------------------------------------------------------------------

struct GenerateArgs {
    GeneratorSpec spec;
    std::string split_mode = "biased";  // biased | uniform
    std::string out;
};

inline void cmd_generate(const GenerateArgs& args) {
    detail::Timer timer;
    args.spec.validate();
    detail::ensure_dir(args.out);
    const fs::path dir(args.out);

    Cohort cohort = generate_cohort(args.spec);
    SplitResult split;
    if (args.split_mode == "biased")
        split = split_biased(cohort, args.spec.degree, args.spec.seed);
    else if (args.split_mode == "uniform")
        split = split_uniform(cohort, 0.2, args.spec.seed);
    else
        throw DataError("unknown split mode: " + args.split_mode);

    save_cohort(cohort, (dir / "cohort.jsonl").string());
    save_cohort(split.train, (dir / "train.jsonl").string());
    save_cohort(split.test, (dir / "test.jsonl").string());

    RunManifest m;
    m.command = "generate";
    json spec_json;
    to_json(spec_json, args.spec);
    m.config = {{"generator", spec_json}, {"split", args.split_mode}};
    m.seeds = {args.spec.seed};
    for (const char* f : {"cohort.jsonl", "train.jsonl", "test.jsonl"})
        m.outputs.push_back(artifact_ref(dir, dir / f));
    m.wall_clock_s = timer.seconds();
    append_manifest(dir, m);

    std::cout << "generated cohort n=" << cohort.samples.size() << " (train "
              << split.train.samples.size() << ", test " << split.test.samples.size()
              << ") -> " << args.out << "\n";
}

// --- train ----------------------------------------------------------------------

struct TrainArgs {
    std::string cohort_path;
    std::string config_path;  // optional JSON TrainConfig
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs, batch_size, dim;
    std::optional<double> lr, weight_decay, beta, mc_samples;
    std::optional<std::string> fusion;
};

inline TrainConfig resolve_train_config(const TrainArgs& args, const Cohort& cohort) {
    TrainConfig cfg;
    if (!args.config_path.empty()) from_json(detail::load_json_file(args.config_path), cfg);
    if (args.seed) cfg.seed = *args.seed;
    if (args.epochs) cfg.epochs = *args.epochs;
    if (args.batch_size) cfg.batch_size = *args.batch_size;
    if (args.lr) cfg.lr = *args.lr;
    if (args.weight_decay) cfg.weight_decay = *args.weight_decay;
    if (args.beta) cfg.model.beta = *args.beta;
    if (args.dim) cfg.model.d = *args.dim;
    if (args.mc_samples) cfg.model.mc_samples_train = static_cast<int>(*args.mc_samples);
    if (args.fusion) cfg.model.fusion = fusion_from_string(*args.fusion);
    cfg.model.d_tab = cohort.d_tab;
    cfg.model.d_img = cohort.d_img;
    cfg.validate();
    return cfg;
}

inline void write_history_tsv(const fs::path& path, const std::vector<EpochStats>& history) {
    auto out = detail::open_out(path);
    out << "epoch\tloss\tce\tkl\n";
    for (std::size_t e = 0; e < history.size(); ++e)
        out << e << "\t" << detail::fmt(history[e].loss) << "\t" << detail::fmt(history[e].ce)
            << "\t" << detail::fmt(history[e].kl) << "\n";
}

inline void cmd_train(const TrainArgs& args) {
    detail::Timer timer;
    detail::ensure_dir(args.out);
    const fs::path dir(args.out);

    // training must never see oracle columns
    Cohort cohort = load_cohort(args.cohort_path, LoadMode::blind);
    TrainConfig cfg = resolve_train_config(args, cohort);

    Checkpoint ckpt = train(cohort, cfg);
    save_checkpoint(ckpt, (dir / "checkpoint.bin").string());
    write_history_tsv(dir / "history.tsv", ckpt.history);

    RunManifest m;
    m.command = "train";
    json cfg_json;
    to_json(cfg_json, cfg);
    m.config = cfg_json;
    m.seeds = {cfg.seed};
    m.inputs = {args.cohort_path};
    m.outputs.push_back(artifact_ref(dir, dir / "checkpoint.bin"));
    m.outputs.push_back(artifact_ref(dir, dir / "history.tsv"));
    m.wall_clock_s = timer.seconds();
    append_manifest(dir, m);

    std::cout << "trained " << cfg.epochs << " epochs on n=" << cohort.samples.size()
              << "; final loss " << ckpt.history.back().loss << " -> " << args.out << "\n";
}

// --- eval -----------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint_path;
    std::string cohort_path;
    std::string out;
};

inline void write_predictions_tsv(const fs::path& path,
                                  const std::vector<EvalRecord>& records,
                                  const Cohort& cohort) {
    auto out = detail::open_out(path);
    const bool oracle = cohort.has_oracle();
    out << "id\tt\ty\ty0_hat\ty1_hat\tpi";
    if (oracle) out << "\toracle.y0_prob\toracle.y1_prob\toracle.y0\toracle.y1\toracle.propensity";
    out << "\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        out << cohort.samples[i].id << "\t" << r.t << "\t" << r.y << "\t"
            << detail::fmt(r.pred.y0_hat) << "\t" << detail::fmt(r.pred.y1_hat) << "\t"
            << policy_of(r);
        if (oracle) {
            const auto& o = *r.oracle;
            out << "\t" << detail::fmt(o.y0_prob) << "\t" << detail::fmt(o.y1_prob) << "\t"
                << o.y0 << "\t" << o.y1 << "\t" << detail::fmt(o.propensity);
        }
        out << "\n";
    }
}

inline void cmd_eval(const EvalArgs& args) {
    detail::Timer timer;
    detail::ensure_dir(args.out);
    const fs::path dir(args.out);

    Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    Cohort cohort = load_cohort(args.cohort_path);  // oracle allowed: evaluation may use it
    ModelParams params = params_from_checkpoint(ckpt);
    auto records = make_eval_records(params, ckpt.config.model, cohort);
    MetricsReport report = compute_report(records);

    detail::open_out(dir / "metrics.json") << report_to_json(report).dump(2) << "\n";
    write_predictions_tsv(dir / "predictions.tsv", records, cohort);

    RunManifest m;
    m.command = "eval";
    json cfg_json;
    to_json(cfg_json, ckpt.config);
    m.config = {{"checkpoint_config", cfg_json}};
    m.seeds = {ckpt.config.seed};
    m.inputs = {args.checkpoint_path, args.cohort_path};
    m.outputs.push_back(artifact_ref(dir, dir / "metrics.json"));
    m.outputs.push_back(artifact_ref(dir, dir / "predictions.tsv"));
    m.wall_clock_s = timer.seconds();
    append_manifest(dir, m);

    std::cout << "eval n=" << report.n << ": r_pol " << detail::fmt(report.r_pol) << ", auc0 "
              << detail::fmt_opt(report.auc0) << ", auc1 " << detail::fmt_opt(report.auc1);
    if (report.pehe) std::cout << ", pehe " << detail::fmt(*report.pehe);
    std::cout << " -> " << args.out << "\n";
}

// --- sweep tables (shared by ablate and the repro profiles) -----------------------

struct TaggedCell {
    std::string group;  // extra key, e.g. the degree; empty when unused
    SweepCell cell;
};

inline void write_sweep_tsv(const fs::path& path, const std::string& axis,
                            const std::vector<TaggedCell>& cells, const std::string& label) {
    auto out = detail::open_out(path);
    out << "# " << label << "\n";
    out << "group\t" << axis
        << "\tseed\tr_pol\tauc0\tauc1\tacc0\tacc1\tpehe\tkl_final\tloss_final\twall_s\n";
    for (const auto& [group, c] : cells) {
        out << group << "\t" << c.value << "\t" << c.seed << "\t" << detail::fmt(c.report.r_pol)
            << "\t" << detail::fmt_opt(c.report.auc0) << "\t" << detail::fmt_opt(c.report.auc1)
            << "\t" << detail::fmt_opt(c.report.acc0) << "\t" << detail::fmt_opt(c.report.acc1)
            << "\t" << detail::fmt_opt(c.report.pehe) << "\t" << detail::fmt(c.kl_final) << "\t"
            << detail::fmt(c.loss_final) << "\t" << detail::fmt(c.wall_s) << "\n";
    }
}

struct Aggregate {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double sd = std::numeric_limits<double>::quiet_NaN();
    int n = 0;
};

inline Aggregate aggregate(const std::vector<std::optional<double>>& xs) {
    Aggregate a;
    double s = 0;
    for (const auto& x : xs)
        if (x) {
            s += *x;
            ++a.n;
        }
    if (a.n == 0) return a;
    a.mean = s / a.n;
    double ss = 0;
    for (const auto& x : xs)
        if (x) ss += (*x - a.mean) * (*x - a.mean);
    a.sd = a.n > 1 ? std::sqrt(ss / (a.n - 1)) : 0.0;
    return a;
}

// Mean +/- standard deviation over seeds, one row per (group, value),
// mirroring reporting as "average and standard deviation of independent runs".
inline void write_aggregate_tsv(const fs::path& path, const std::string& axis,
                                const std::vector<TaggedCell>& cells,
                                const std::string& label) {
    std::vector<std::pair<std::string, std::string>> keys;  // (group, value) in first-seen order
    for (const auto& [group, c] : cells) {
        std::pair<std::string, std::string> k{group, c.value};
        bool seen = false;
        for (const auto& e : keys) seen = seen || e == k;
        if (!seen) keys.push_back(k);
    }
    auto out = detail::open_out(path);
    out << "# " << label << "\n";
    out << "group\t" << axis << "\tn_runs";
    static const char* metrics[] = {"r_pol", "auc0",     "auc1",      "acc0", "acc1",
                                    "pehe",  "kl_final", "loss_final"};
    for (const char* m : metrics) out << "\t" << m << "_mean\t" << m << "_sd";
    out << "\n";
    for (const auto& [group, value] : keys) {
        std::map<std::string, std::vector<std::optional<double>>> cols;
        int n_runs = 0;
        for (const auto& [g, c] : cells) {
            if (g != group || c.value != value) continue;
            ++n_runs;
            cols["r_pol"].push_back(c.report.r_pol);
            cols["auc0"].push_back(c.report.auc0);
            cols["auc1"].push_back(c.report.auc1);
            cols["acc0"].push_back(c.report.acc0);
            cols["acc1"].push_back(c.report.acc1);
            cols["pehe"].push_back(c.report.pehe);
            cols["kl_final"].push_back(c.kl_final);
            cols["loss_final"].push_back(c.loss_final);
        }
        out << group << "\t" << value << "\t" << n_runs;
        for (const char* m : metrics) {
            Aggregate a = aggregate(cols[m]);
            out << "\t" << (a.n ? detail::fmt(a.mean) : "nan") << "\t"
                << (a.n ? detail::fmt(a.sd) : "nan");
        }
        out << "\n";
    }
}

// --- ablate ------------------------------------------------------------------------

struct AblateArgs {
    std::string axis;                 // dim | beta | fusion
    std::vector<std::string> values;  // axis values
    int seeds = 3;
    int degree = 3;
    GeneratorSpec generator;          // cohort shape for the ablation
    std::string config_path;          // optional TrainConfig JSON
    std::optional<int> epochs;
    std::string out;
};

inline void cmd_ablate(const AblateArgs& args) {
    detail::Timer timer;
    detail::ensure_dir(args.out);
    const fs::path dir(args.out);
    const SweepAxis axis = sweep_axis_from_string(args.axis);
    if (args.values.empty()) throw DataError("ablate: no axis values given");

    GeneratorSpec spec = args.generator;
    spec.degree = args.degree;
    Cohort cohort = generate_cohort(spec);
    SplitResult split = split_biased(cohort, args.degree, spec.seed);

    TrainConfig base;
    if (!args.config_path.empty()) from_json(detail::load_json_file(args.config_path), base);
    if (args.epochs) base.epochs = *args.epochs;
    base.seed = spec.seed;
    base.model.d_tab = cohort.d_tab;
    base.model.d_img = cohort.d_img;
    base.validate();

    auto cells = sweep(split.train, split.test, base, axis, args.values, args.seeds);
    std::vector<TaggedCell> tagged;
    for (const auto& c : cells) tagged.push_back({std::to_string(args.degree), c});

    const std::string label = "ablation over " + args.axis + " at degree " +
                              std::to_string(args.degree) + " (synthetic cohort)";
    write_sweep_tsv(dir / "sweep.tsv", args.axis, tagged, label);
    write_aggregate_tsv(dir / "sweep_agg.tsv", args.axis, tagged, label);

    RunManifest m;
    m.command = "ablate";
    json base_json, spec_json;
    to_json(base_json, base);
    to_json(spec_json, spec);
    m.config = {{"axis", args.axis},   {"values", args.values}, {"seeds", args.seeds},
                {"degree", args.degree}, {"generator", spec_json}, {"train", base_json}};
    for (int s = 0; s < args.seeds; ++s)
        m.seeds.push_back(base.seed + static_cast<std::uint64_t>(s));
    m.outputs.push_back(artifact_ref(dir, dir / "sweep.tsv"));
    m.outputs.push_back(artifact_ref(dir, dir / "sweep_agg.tsv"));
    m.wall_clock_s = timer.seconds();
    append_manifest(dir, m);

    std::cout << "ablate " << args.axis << " over " << args.values.size() << " values x "
              << args.seeds << " seeds -> " << args.out << "\n";
}

}  // namespace progmod::cli

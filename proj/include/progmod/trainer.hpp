#pragma once

#include <chrono>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "progmod/metrics.hpp"
#include "progmod/model.hpp"
#include "progmod/synthetic.hpp"

namespace progmod {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'P', 'M', 'C', 'K'};

struct TrainConfig {
    double lr = 5e-3;
    double weight_decay = 5e-3;  // decoupled from the adaptive update
    int epochs = 1000;
    int batch_size = 128;
    std::uint64_t seed = 1;
    ModelConfig model;

    void validate() const {
        if (lr <= 0) throw DataError("train config: lr must be positive");
        if (weight_decay < 0) throw DataError("train config: weight_decay must be >= 0");
        if (epochs < 1) throw DataError("train config: epochs must be >= 1");
        if (batch_size < 2) throw DataError("train config: batch_size must be >= 2");
        model.validate();
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    json m;
    to_json(m, c.model);
    j = json{{"lr", c.lr},
             {"weight_decay", c.weight_decay},
             {"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"seed", c.seed},
             {"model", m}};
}

inline void from_json(const json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("lr")) j.at("lr").get_to(c.lr);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("model")) from_json(j.at("model"), c.model);
}

struct EpochStats {
    double loss = 0.0, ce = 0.0, kl = 0.0;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    TrainConfig config;
    std::vector<std::pair<std::string, Mat>> arrays;  // names, shapes, row-major values
    std::vector<EpochStats> history;
};

// --- adaptive-moment optimizer with decoupled weight decay -------------------

namespace train_detail {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamState {
    Mat m, v;
};

struct Optimizer {
    std::map<std::string, AdamState> state;
    long step = 0;

    void update(Mat& theta, const Mat& grad, const std::string& name, double lr, double wd) {
        AdamState& s = state[name];
        if (s.m.size() == 0) {
            s.m = Mat::Zero(theta.rows(), theta.cols());
            s.v = Mat::Zero(theta.rows(), theta.cols());
        }
        s.m = kAdamBeta1 * s.m + (1.0 - kAdamBeta1) * grad;
        s.v = (kAdamBeta2 * s.v.array() + (1.0 - kAdamBeta2) * grad.array().square()).matrix();
        const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
        const Mat mhat = s.m / bc1;
        const Mat vhat = s.v / bc2;
        theta -= lr * (mhat.array() / (vhat.array().sqrt() + kAdamEps)).matrix();
        if (wd > 0.0) theta -= lr * wd * theta;
    }
};

// Batches of `batch_size` in shuffled order; a trailing singleton joins the
// previous batch so batch norm always sees at least two samples.
inline std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n; start += batch_size) {
        const int stop = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + stop);
    }
    if (batches.size() >= 2 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

}  // namespace train_detail

// Fixed-epoch seeded training. Deterministic given (cohort, config): shuffles
// are pure functions of (seed, epoch) and noise of (seed, epoch, step).
// Oracle fields are never consulted; only samples enter the batches.
inline Checkpoint train(const Cohort& cohort, const TrainConfig& cfg) {
    cfg.validate();
    if (cohort.samples.size() < 2) throw DataError("train: cohort needs at least 2 samples");
    if (cohort.d_tab != cfg.model.d_tab || cohort.d_img != cfg.model.d_img)
        throw DataError("train: cohort dimensions (" + std::to_string(cohort.d_tab) + ", " +
                        std::to_string(cohort.d_img) + ") do not match model config (" +
                        std::to_string(cfg.model.d_tab) + ", " +
                        std::to_string(cfg.model.d_img) + ")");

    ModelParams params = init_params(cfg.model, cfg.seed);
    train_detail::Optimizer opt;

    std::map<std::string, Mat*> param_index;
    visit_params(params, [&](const std::string& name, Mat& m, ParamKind kind) {
        if (kind == ParamKind::trainable) param_index[name] = &m;
    });

    const int n = static_cast<int>(cohort.samples.size());
    std::vector<EpochStats> history;
    history.reserve(static_cast<std::size_t>(cfg.epochs));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, StreamTag::epoch_shuffle,
                                    static_cast<std::uint64_t>(epoch)));
        auto batches = train_detail::make_batches(n, cfg.batch_size, shuffle_rng);

        EpochStats stats;
        double weight = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            BatchData batch = make_batch(cohort, batches[b]);
            Rng noise_rng(derive_seed(cfg.seed, StreamTag::step_noise,
                                      static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(b)));
            ElboNoise noise = make_elbo_noise(noise_rng, batch.size(), cfg.model);
            ElboResult res;
            try {
                res = elbo_loss(batch, params, cfg.model, noise);
            } catch (const NumericError& e) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(b) + ": " + e.what());
            }
            ++opt.step;
            for (auto& [name, grad] : res.grads) {
                auto it = param_index.find(name);
                if (it == param_index.end()) continue;  // non-trainable leaf
                opt.update(*it->second, grad, name, cfg.lr, cfg.weight_decay);
            }
            const double w = static_cast<double>(batch.size());
            stats.loss += res.loss * w;
            stats.ce += res.ce * w;
            stats.kl += res.kl * w;
            weight += w;
        }
        stats.loss /= weight;
        stats.ce /= weight;
        stats.kl /= weight;
        history.push_back(stats);
    }

    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.history = std::move(history);
    visit_params(params, [&](const std::string& name, Mat& m, ParamKind) {
        ckpt.arrays.emplace_back(name, m);
    });
    return ckpt;
}

// --- checkpoint (de)serialization -------------------------------------------

namespace train_detail {

template <class T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const char* what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError(std::string("checkpoint: truncated while reading ") + what);
    return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_pod<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const char* what) {
    const auto len = read_pod<std::uint64_t>(in, what);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError(std::string("checkpoint: truncated while reading ") + what);
    return s;
}

}  // namespace train_detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, 4);
    train_detail::write_pod(out, ckpt.version);
    json cfg;
    to_json(cfg, ckpt.config);
    train_detail::write_string(out, cfg.dump());

    train_detail::write_pod<std::uint64_t>(out, ckpt.history.size());
    for (const auto& h : ckpt.history) {
        train_detail::write_pod(out, h.loss);
        train_detail::write_pod(out, h.ce);
        train_detail::write_pod(out, h.kl);
    }
    train_detail::write_pod<std::uint64_t>(out, ckpt.arrays.size());
    for (const auto& [name, m] : ckpt.arrays) {
        train_detail::write_string(out, name);
        train_detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        train_detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) train_detail::write_pod(out, m(r, c));
    }
    if (!out) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw DataError("not a checkpoint file: " + path);
    Checkpoint ckpt;
    ckpt.version = train_detail::read_pod<std::uint32_t>(in, "version");
    if (ckpt.version != kCheckpointVersion)
        throw DataError("checkpoint format version " + std::to_string(ckpt.version) +
                        " not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    from_json(json::parse(train_detail::read_string(in, "config")), ckpt.config);
    const auto n_hist = train_detail::read_pod<std::uint64_t>(in, "history size");
    for (std::uint64_t i = 0; i < n_hist; ++i) {
        EpochStats h;
        h.loss = train_detail::read_pod<double>(in, "history");
        h.ce = train_detail::read_pod<double>(in, "history");
        h.kl = train_detail::read_pod<double>(in, "history");
        ckpt.history.push_back(h);
    }
    const auto n_arrays = train_detail::read_pod<std::uint64_t>(in, "array count");
    for (std::uint64_t i = 0; i < n_arrays; ++i) {
        std::string name = train_detail::read_string(in, "array name");
        const auto rows = train_detail::read_pod<std::uint64_t>(in, "rows");
        const auto cols = train_detail::read_pod<std::uint64_t>(in, "cols");
        Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                m(r, c) = train_detail::read_pod<double>(in, "array data");
        ckpt.arrays.emplace_back(std::move(name), std::move(m));
    }
    return ckpt;
}

// Rebuilds model parameters from checkpoint arrays; every stored array must
// match a parameter name and shape, and every parameter must be covered.
inline ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
    ModelParams params = init_params(ckpt.config.model, ckpt.config.seed);
    std::map<std::string, Mat*> index;
    visit_params(params, [&](const std::string& name, Mat& m, ParamKind) {
        index[name] = &m;
    });
    std::size_t covered = 0;
    for (const auto& [name, m] : ckpt.arrays) {
        auto it = index.find(name);
        if (it == index.end())
            throw DataError("checkpoint array '" + name + "' does not match any parameter");
        if (it->second->rows() != m.rows() || it->second->cols() != m.cols())
            throw DataError("checkpoint array '" + name + "' has shape " +
                            std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                            " but the model expects " + std::to_string(it->second->rows()) +
                            "x" + std::to_string(it->second->cols()));
        *it->second = m;
        ++covered;
    }
    if (covered != index.size())
        throw DataError("checkpoint covers " + std::to_string(covered) + " of " +
                        std::to_string(index.size()) + " parameters");
    return params;
}

// --- evaluation glue ----------------------------------------------------------

inline std::vector<EvalRecord> make_eval_records(ModelParams& params, const ModelConfig& cfg,
                                                 const Cohort& cohort) {
    if (cohort.d_tab != cfg.d_tab || cohort.d_img != cfg.d_img)
        throw DataError("evaluate: cohort dimensions (" + std::to_string(cohort.d_tab) +
                        ", " + std::to_string(cohort.d_img) +
                        ") do not match checkpoint dimensions (" + std::to_string(cfg.d_tab) +
                        ", " + std::to_string(cfg.d_img) + ")");
    BatchData all = make_batch(cohort);
    auto preds = predict_batch(params, cfg, all.x_tab, all.x_img);
    std::vector<EvalRecord> records;
    records.reserve(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        EvalRecord r;
        r.pred = preds[i];
        r.t = cohort.samples[i].t;
        r.y = cohort.samples[i].y;
        if (cohort.has_oracle()) r.oracle = cohort.oracle[i];
        records.push_back(r);
    }
    return records;
}

// --- ablation sweeps -----------------------------------------------------------

enum class SweepAxis { dim, beta, fusion };

inline SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "dim") return SweepAxis::dim;
    if (s == "beta") return SweepAxis::beta;
    if (s == "fusion") return SweepAxis::fusion;
    throw DataError("unknown sweep axis: " + s + " (expected dim, beta or fusion)");
}

inline std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::dim: return "dim";
        case SweepAxis::beta: return "beta";
        case SweepAxis::fusion: return "fusion";
    }
    return "?";
}

struct SweepCell {
    std::string value;
    std::uint64_t seed = 0;
    MetricsReport report;
    double kl_final = 0.0;    // mean KL term over the final 10 epochs
    double loss_final = 0.0;
    double wall_s = 0.0;
};

inline TrainConfig apply_axis_value(const TrainConfig& base, SweepAxis axis,
                                    const std::string& value) {
    TrainConfig cfg = base;
    try {
        switch (axis) {
            case SweepAxis::dim: cfg.model.d = std::stoi(value); break;
            case SweepAxis::beta: cfg.model.beta = std::stod(value); break;
            case SweepAxis::fusion: cfg.model.fusion = fusion_from_string(value); break;
        }
    } catch (const std::invalid_argument&) {
        throw DataError("bad value '" + value + "' for sweep axis " + to_string(axis));
    }
    return cfg;
}

inline double mean_final_kl(const std::vector<EpochStats>& history, int window = 10) {
    const auto n = static_cast<int>(history.size());
    const int take = std::min(window, n);
    double acc = 0.0;
    for (int i = n - take; i < n; ++i) acc += history[static_cast<std::size_t>(i)].kl;
    return acc / take;
}

// Trains one model per (value, seed) on the train cohort (oracle stripped)
// and evaluates on the held-out cohort. Seeds are base.seed, base.seed+1, ...
inline std::vector<SweepCell> sweep(const Cohort& train_cohort, const Cohort& test_cohort,
                                    const TrainConfig& base, SweepAxis axis,
                                    const std::vector<std::string>& values, int n_seeds) {
    if (values.empty()) throw DataError("sweep: no axis values given");
    if (n_seeds < 1) throw DataError("sweep: need at least one seed");
    Cohort blind = train_cohort;
    blind.oracle.clear();

    std::vector<SweepCell> cells;
    for (const auto& value : values) {
        for (int s = 0; s < n_seeds; ++s) {
            TrainConfig cfg = apply_axis_value(base, axis, value);
            cfg.seed = base.seed + static_cast<std::uint64_t>(s);
            const auto t0 = std::chrono::steady_clock::now();
            Checkpoint ckpt = train(blind, cfg);
            const auto t1 = std::chrono::steady_clock::now();
            ModelParams params = params_from_checkpoint(ckpt);
            auto records = make_eval_records(params, cfg.model, test_cohort);

            SweepCell cell;
            cell.value = value;
            cell.seed = cfg.seed;
            cell.report = compute_report(records);
            cell.kl_final = mean_final_kl(ckpt.history);
            cell.loss_final = ckpt.history.back().loss;
            cell.wall_s = std::chrono::duration<double>(t1 - t0).count();
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

}  // namespace progmod

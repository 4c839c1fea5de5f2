#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "progmod/cli.hpp"

namespace progmod {

// Named experiment recipes tying cohort generation, training and
// evaluation into one reproducible bundle. Recipes are JSON files in the
// repository's profiles/ directory; every seed is pinned there. Outputs are
// synthetic analogs of the corresponding exhibits, never reproductions of
// clinical results.
struct ReproProfile {
    std::string name;
    std::string kind;  // "single" | "degree_sweep" | "axis_sweep"
    std::string axis = "fusion";
    std::vector<std::string> values{"poe"};
    std::vector<int> degrees{3};
    int seeds = 3;
    GeneratorSpec generator;
    TrainConfig train;
};

inline void from_json(const json& j, ReproProfile& p) {
    p = ReproProfile{};
    p.name = j.at("name").get<std::string>();
    p.kind = j.at("kind").get<std::string>();
    if (j.contains("axis")) j.at("axis").get_to(p.axis);
    if (j.contains("values")) j.at("values").get_to(p.values);
    if (j.contains("degrees")) j.at("degrees").get_to(p.degrees);
    if (j.contains("seeds")) j.at("seeds").get_to(p.seeds);
    if (j.contains("generator")) from_json(j.at("generator"), p.generator);
    if (j.contains("train")) from_json(j.at("train"), p.train);
    if (p.kind != "single" && p.kind != "degree_sweep" && p.kind != "axis_sweep")
        throw DataError("profile " + p.name + ": unknown kind '" + p.kind + "'");
    if (p.seeds < 1) throw DataError("profile " + p.name + ": seeds must be >= 1");
    if (p.degrees.empty()) throw DataError("profile " + p.name + ": no degrees listed");
}

inline ReproProfile load_profile(const std::string& profiles_dir, const std::string& name) {
    const std::filesystem::path path =
        std::filesystem::path(profiles_dir) / (name + ".json");
    if (!std::filesystem::exists(path))
        throw DataError("no such profile recipe: " + path.string());
    ReproProfile p;
    from_json(cli::detail::load_json_file(path.string()), p);
    return p;
}

// Executes a recipe end to end: one cohort per degree, one training run per
// (degree, value, seed), and a bundle of labeled tables plus a manifest.
inline void run_profile(const ReproProfile& profile, const std::string& out_dir) {
    cli::detail::Timer timer;
    const std::filesystem::path dir = std::filesystem::path(out_dir) / profile.name;
    cli::detail::ensure_dir(dir);

    const std::string label = profile.name + " (synthetic analog)";
    const SweepAxis axis = sweep_axis_from_string(profile.axis);

    std::vector<cli::TaggedCell> cells;
    for (int degree : profile.degrees) {
        GeneratorSpec spec = profile.generator;
        spec.degree = degree;
        Cohort cohort = generate_cohort(spec);
        SplitResult split = split_biased(cohort, degree, spec.seed);

        TrainConfig base = profile.train;
        base.model.d_tab = cohort.d_tab;
        base.model.d_img = cohort.d_img;
        base.validate();

        auto degree_cells =
            sweep(split.train, split.test, base, axis, profile.values, profile.seeds);
        for (const auto& c : degree_cells)
            cells.push_back({"degree" + std::to_string(degree), c});
    }

    cli::write_sweep_tsv(dir / "runs.tsv", profile.axis, cells, label);
    cli::write_aggregate_tsv(dir / "summary.tsv", profile.axis, cells, label);

    RunManifest m;
    m.command = "profile";
    json gen_json, train_json;
    to_json(gen_json, profile.generator);
    to_json(train_json, profile.train);
    m.config = {{"name", profile.name},     {"kind", profile.kind},
                {"axis", profile.axis},     {"values", profile.values},
                {"degrees", profile.degrees}, {"seeds", profile.seeds},
                {"generator", gen_json},    {"train", train_json}};
    for (int s = 0; s < profile.seeds; ++s)
        m.seeds.push_back(profile.train.seed + static_cast<std::uint64_t>(s));
    m.outputs.push_back(artifact_ref(dir, dir / "runs.tsv"));
    m.outputs.push_back(artifact_ref(dir, dir / "summary.tsv"));
    m.wall_clock_s = timer.seconds();
    append_manifest(dir, m);

    std::cout << "profile " << profile.name << ": " << cells.size() << " runs -> "
              << dir.string() << "\n";
}

inline void run_profile(const std::string& profiles_dir, const std::string& name,
                        const std::string& out_dir) {
    run_profile(load_profile(profiles_dir, name), out_dir);
}

}  // namespace progmod

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "progmod/core.hpp"
#include "progmod/sha256.hpp"

namespace progmod {

struct ArtifactRef {
    std::string path;  // relative to the run directory
    std::string sha256;
    std::uint64_t bytes = 0;
};

// One manifest record per command invocation, appended to manifest.jsonl in
// the run directory. Every emitted artifact is listed with its checksum, and
// the fully resolved configuration makes the run reproducible from the
// manifest alone.
struct RunManifest {
    std::string command;
    json config;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> inputs;
    std::vector<ArtifactRef> outputs;
    double wall_clock_s = 0.0;
};

inline ArtifactRef artifact_ref(const std::filesystem::path& run_dir,
                                const std::filesystem::path& file) {
    ArtifactRef ref;
    ref.path = std::filesystem::relative(file, run_dir).string();
    ref.sha256 = sha256_file(file.string());
    ref.bytes = static_cast<std::uint64_t>(std::filesystem::file_size(file));
    return ref;
}

inline void append_manifest(const std::filesystem::path& run_dir, const RunManifest& m) {
    json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["seeds"] = m.seeds;
    j["inputs"] = m.inputs;
    json outs = json::array();
    for (const auto& o : m.outputs)
        outs.push_back({{"path", o.path}, {"sha256", o.sha256}, {"bytes", o.bytes}});
    j["outputs"] = outs;
    j["wall_clock_s"] = m.wall_clock_s;
    std::ofstream out(run_dir / "manifest.jsonl", std::ios::app | std::ios::binary);
    if (!out) throw DataError("cannot append manifest in " + run_dir.string());
    out << j.dump() << "\n";
}

}  // namespace progmod

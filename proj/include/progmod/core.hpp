#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace progmod {

using json = nlohmann::json;

inline constexpr int kCohortSchemaVersion = 1;

// Malformed inputs, file-format and shape problems (CLI exit code 2).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numeric breakdowns: divergence, non-finite losses (CLI exit code 3).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Ground truth recorded by the synthetic generator. Never consumed by
// training; only evaluation may look at it.
struct OracleInfo {
    double y0_prob = 0.0;
    double y1_prob = 0.0;
    int y0 = 0;
    int y1 = 0;
    double propensity = 0.5;

    bool operator==(const OracleInfo&) const = default;
};

struct Sample {
    std::string id;
    std::vector<double> x_tab;
    std::vector<double> x_img;
    int t = 0;  // 0 = conservative, 1 = surgery
    int y = 0;  // 1 = favorable

    bool operator==(const Sample&) const = default;
};

struct Cohort {
    int schema_version = kCohortSchemaVersion;
    int d_tab = 17;
    int d_img = 64;
    std::vector<Sample> samples;
    std::vector<OracleInfo> oracle;  // empty, or one entry per sample
    json generator;                  // provenance, carried through save/load

    bool has_oracle() const { return !oracle.empty(); }
    std::size_t size() const { return samples.size(); }

    bool operator==(const Cohort& o) const {
        return schema_version == o.schema_version && d_tab == o.d_tab &&
               d_img == o.d_img && samples == o.samples && oracle == o.oracle;
    }
};

struct Violation {
    std::string sample_id;  // empty for cohort-level violations
    std::string field;
    std::string message;
};

using ValidationReport = std::vector<Violation>;

namespace detail {

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace detail

// Reports every invariant violation; never throws.
inline ValidationReport validate_cohort(const Cohort& c) {
    ValidationReport report;
    auto add = [&](const std::string& id, const std::string& field, std::string msg) {
        report.push_back({id, field, std::move(msg)});
    };

    if (c.samples.empty())
        add("", "samples", "cohort has no samples (must have >= 1)");
    if (c.has_oracle() && c.oracle.size() != c.samples.size())
        add("", "oracle",
            "oracle list length " + std::to_string(c.oracle.size()) +
                " does not match sample count " + std::to_string(c.samples.size()));

    std::set<std::string> seen_ids;
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        const Sample& s = c.samples[i];
        if (!seen_ids.insert(s.id).second)
            add(s.id, "id", "duplicate sample id");
        if (s.t != 0 && s.t != 1)
            add(s.id, "t", "treatment must be 0 or 1, got " + std::to_string(s.t));
        if (s.y != 0 && s.y != 1)
            add(s.id, "y", "outcome must be 0 or 1, got " + std::to_string(s.y));
        if (static_cast<int>(s.x_tab.size()) != c.d_tab)
            add(s.id, "x_tab",
                "length " + std::to_string(s.x_tab.size()) + " != d_tab " +
                    std::to_string(c.d_tab));
        if (static_cast<int>(s.x_img.size()) != c.d_img)
            add(s.id, "x_img",
                "length " + std::to_string(s.x_img.size()) + " != d_img " +
                    std::to_string(c.d_img));
        if (!detail::all_finite(s.x_tab)) add(s.id, "x_tab", "non-finite entry");
        if (!detail::all_finite(s.x_img)) add(s.id, "x_img", "non-finite entry");

        if (c.has_oracle() && i < c.oracle.size()) {
            const OracleInfo& o = c.oracle[i];
            if (!(o.y0_prob >= 0.0 && o.y0_prob <= 1.0))
                add(s.id, "oracle.y0_prob", "outside [0,1]");
            if (!(o.y1_prob >= 0.0 && o.y1_prob <= 1.0))
                add(s.id, "oracle.y1_prob", "outside [0,1]");
            if (o.y0 != 0 && o.y0 != 1) add(s.id, "oracle.y0", "must be 0 or 1");
            if (o.y1 != 0 && o.y1 != 1) add(s.id, "oracle.y1", "must be 0 or 1");
            if (!(o.propensity > 0.0 && o.propensity < 1.0))
                add(s.id, "oracle.propensity", "outside (0,1)");
            if ((s.t == 0 ? o.y0 : o.y1) != s.y)
                add(s.id, "y", "factual outcome disagrees with oracle potential outcome");
        }
    }
    return report;
}

enum class LoadMode { full, blind };  // blind strips oracle fields on load

namespace detail {

inline json sample_to_json(const Sample& s, const OracleInfo* oracle) {
    json j;
    j["id"] = s.id;
    j["x_tab"] = s.x_tab;
    j["x_img"] = s.x_img;
    j["t"] = s.t;
    j["y"] = s.y;
    if (oracle) {
        j["oracle"] = {{"y0_prob", oracle->y0_prob}, {"y1_prob", oracle->y1_prob},
                       {"y0", oracle->y0},           {"y1", oracle->y1},
                       {"propensity", oracle->propensity}};
    }
    return j;
}

inline const json& require_field(const json& j, const char* key, int line) {
    auto it = j.find(key);
    if (it == j.end())
        throw DataError("line " + std::to_string(line) + ": missing field '" + key + "'");
    return *it;
}

}  // namespace detail

// One JSON record per line; the first line is a header carrying
// schema_version and the cohort dimensions.
inline void save_cohort(const Cohort& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    json header = {{"schema_version", c.schema_version},
                   {"d_tab", c.d_tab},
                   {"d_img", c.d_img},
                   {"n", c.samples.size()}};
    if (!c.generator.is_null()) header["generator"] = c.generator;
    out << header.dump() << "\n";
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        const OracleInfo* o = (c.has_oracle() && i < c.oracle.size()) ? &c.oracle[i] : nullptr;
        out << detail::sample_to_json(c.samples[i], o).dump() << "\n";
    }
    if (!out) throw DataError("write failed: " + path);
}

inline Cohort load_cohort(const std::string& path, LoadMode mode = LoadMode::full) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open cohort file: " + path);

    std::string line;
    int line_no = 0;
    auto next_line = [&]() -> bool {
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty()) return true;
        }
        return false;
    };

    if (!next_line()) throw DataError("empty cohort file (cohorts must have >= 1 sample): " + path);

    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw DataError("line 1: malformed header: " + std::string(e.what()));
    }
    Cohort c;
    c.schema_version = detail::require_field(header, "schema_version", 1).get<int>();
    if (c.schema_version != kCohortSchemaVersion)
        throw DataError("cohort schema_version " + std::to_string(c.schema_version) +
                        " not supported (expected " + std::to_string(kCohortSchemaVersion) + ")");
    c.d_tab = detail::require_field(header, "d_tab", 1).get<int>();
    c.d_img = detail::require_field(header, "d_img", 1).get<int>();
    if (header.contains("generator")) c.generator = header["generator"];

    bool any_oracle = false;
    while (next_line()) {
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("line " + std::to_string(line_no) + ": malformed record: " +
                            std::string(e.what()));
        }
        Sample s;
        try {
            s.id = detail::require_field(j, "id", line_no).get<std::string>();
            s.x_tab = detail::require_field(j, "x_tab", line_no).get<std::vector<double>>();
            s.x_img = detail::require_field(j, "x_img", line_no).get<std::vector<double>>();
            s.t = detail::require_field(j, "t", line_no).get<int>();
            s.y = detail::require_field(j, "y", line_no).get<int>();
        } catch (const json::exception& e) {
            throw DataError("line " + std::to_string(line_no) + ": bad field type: " +
                            std::string(e.what()));
        }
        if (mode == LoadMode::full && j.contains("oracle")) {
            const json& jo = j["oracle"];
            OracleInfo o;
            try {
                o.y0_prob = detail::require_field(jo, "y0_prob", line_no).get<double>();
                o.y1_prob = detail::require_field(jo, "y1_prob", line_no).get<double>();
                o.y0 = detail::require_field(jo, "y0", line_no).get<int>();
                o.y1 = detail::require_field(jo, "y1", line_no).get<int>();
                o.propensity = detail::require_field(jo, "propensity", line_no).get<double>();
            } catch (const json::exception& e) {
                throw DataError("line " + std::to_string(line_no) + ": bad oracle field: " +
                                std::string(e.what()));
            }
            if (c.oracle.size() != c.samples.size())
                throw DataError("line " + std::to_string(line_no) +
                                ": oracle present on some records but not others");
            c.oracle.push_back(o);
            any_oracle = true;
        } else if (any_oracle && mode == LoadMode::full) {
            throw DataError("line " + std::to_string(line_no) +
                            ": oracle present on some records but not others");
        }
        c.samples.push_back(std::move(s));
    }
    if (c.samples.empty())
        throw DataError("cohort file has a header but no samples: " + path);
    return c;
}

}  // namespace progmod

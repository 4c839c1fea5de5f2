#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "progmod/core.hpp"
#include "progmod/rng.hpp"
#include "progmod/sha256.hpp"

using namespace progmod;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("progmod_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Cohort small_cohort(int n, bool with_oracle, int d_tab = 3, int d_img = 4) {
    Cohort c;
    c.d_tab = d_tab;
    c.d_img = d_img;
    Rng rng(17);
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.id = "s" + std::to_string(i);
        for (int j = 0; j < d_tab; ++j) s.x_tab.push_back(rng.uniform(-2, 2));
        for (int j = 0; j < d_img; ++j) s.x_img.push_back(rng.uniform(-2, 2));
        s.t = rng.bernoulli(0.4) ? 1 : 0;
        OracleInfo o;
        o.y0_prob = rng.uniform01();
        o.y1_prob = rng.uniform01();
        o.y0 = rng.bernoulli(o.y0_prob) ? 1 : 0;
        o.y1 = rng.bernoulli(o.y1_prob) ? 1 : 0;
        o.propensity = rng.uniform(0.05, 0.95);
        s.y = s.t == 0 ? o.y0 : o.y1;
        c.samples.push_back(std::move(s));
        if (with_oracle) c.oracle.push_back(o);
    }
    return c;
}

}  // namespace

TEST_CASE("validate_cohort: well-formed cohort yields an empty report") {
    auto c = small_cohort(3, true);
    REQUIRE(validate_cohort(c).empty());
    // purity: same input, same report
    auto r1 = validate_cohort(c);
    auto r2 = validate_cohort(c);
    REQUIRE(r1.size() == r2.size());
}

TEST_CASE("validate_cohort: t out of range names the sample and field") {
    auto c = small_cohort(3, false);
    c.samples[1].t = 2;
    auto report = validate_cohort(c);
    REQUIRE(report.size() == 1);
    REQUIRE(report[0].sample_id == "s1");
    REQUIRE(report[0].field == "t");
}

TEST_CASE("validate_cohort: short oracle list is a cohort-level violation") {
    auto c = small_cohort(3, true);
    c.oracle.pop_back();
    auto report = validate_cohort(c);
    REQUIRE(report.size() == 1);
    REQUIRE(report[0].sample_id.empty());
    REQUIRE(report[0].field == "oracle");
}

TEST_CASE("validate_cohort: catches non-finite covariates, bad y, duplicate ids") {
    auto c = small_cohort(4, false);
    c.samples[0].x_tab[1] = std::nan("");
    c.samples[2].y = 7;
    c.samples[3].id = c.samples[1].id;
    auto report = validate_cohort(c);
    REQUIRE(report.size() == 3);
}

TEST_CASE("validate_cohort: factual outcome must agree with oracle") {
    auto c = small_cohort(2, true);
    c.samples[0].y = 1 - c.samples[0].y;
    auto report = validate_cohort(c);
    REQUIRE(report.size() == 1);
    REQUIRE(report[0].field == "y");
}

TEST_CASE("save/load round-trips a ten-sample cohort exactly") {
    TempDir dir;
    auto c = small_cohort(10, true);
    save_cohort(c, dir.file("cohort.jsonl"));
    auto loaded = load_cohort(dir.file("cohort.jsonl"));
    REQUIRE(loaded == c);
}

TEST_CASE("save/load round-trip is the identity on random cohorts") {
    TempDir dir;
    Rng rng(23);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(12));
        auto c = small_cohort(n, rng.bernoulli(0.5), 2 + (int)rng.below(5),
                              2 + (int)rng.below(7));
        // sprinkle awkward values
        if (!c.samples.empty()) {
            c.samples[0].x_tab[0] = 1.0 / 3.0;
            c.samples[0].x_img[0] = -0.0;
        }
        const auto path = dir.file("c" + std::to_string(trial) + ".jsonl");
        save_cohort(c, path);
        REQUIRE(load_cohort(path) == c);
    }
}

TEST_CASE("load_cohort: blind mode strips oracle fields") {
    TempDir dir;
    auto c = small_cohort(5, true);
    save_cohort(c, dir.file("c.jsonl"));
    auto blind = load_cohort(dir.file("c.jsonl"), LoadMode::blind);
    REQUIRE_FALSE(blind.has_oracle());
    REQUIRE(blind.samples == c.samples);
}

TEST_CASE("load_cohort: missing field errors cite the line") {
    TempDir dir;
    auto c = small_cohort(4, false);
    save_cohort(c, dir.file("c.jsonl"));
    // drop the y field on the record at line 4 (header + 3 samples)
    std::ifstream in(dir.file("c.jsonl"));
    std::string line, all;
    int ln = 0;
    while (std::getline(in, line)) {
        ++ln;
        if (ln == 4) {
            auto j = json::parse(line);
            j.erase("y");
            line = j.dump();
        }
        all += line + "\n";
    }
    std::ofstream(dir.file("bad.jsonl")) << all;
    try {
        load_cohort(dir.file("bad.jsonl"));
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("line 4") != std::string::npos);
        REQUIRE(std::string(e.what()).find("'y'") != std::string::npos);
    }
}

TEST_CASE("load_cohort: empty file is an error") {
    TempDir dir;
    std::ofstream(dir.file("empty.jsonl")).close();
    REQUIRE_THROWS_AS(load_cohort(dir.file("empty.jsonl")), DataError);
}

TEST_CASE("load_cohort: header-only file is an error") {
    TempDir dir;
    std::ofstream(dir.file("h.jsonl"))
        << R"({"schema_version":1,"d_tab":3,"d_img":4,"n":0})" << "\n";
    REQUIRE_THROWS_AS(load_cohort(dir.file("h.jsonl")), DataError);
}

TEST_CASE("sha256 matches the published test vectors") {
    REQUIRE(sha256_hex("") ==
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    REQUIRE(sha256_hex("abc") ==
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    REQUIRE(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // exercise the multi-block path
    REQUIRE(sha256_hex(std::string(1000000, 'a')) ==
            "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0");
}

TEST_CASE("load_cohort: schema version mismatch is an explicit error") {
    TempDir dir;
    std::ofstream(dir.file("v.jsonl"))
        << R"({"schema_version":99,"d_tab":3,"d_img":4,"n":1})" << "\n"
        << R"({"id":"a","x_tab":[0,0,0],"x_img":[0,0,0,0],"t":0,"y":1})" << "\n";
    try {
        load_cohort(dir.file("v.jsonl"));
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("schema_version") != std::string::npos);
    }
}

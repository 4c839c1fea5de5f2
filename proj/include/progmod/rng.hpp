#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace progmod {

// Seed derivation and sampling are hand-rolled so that streams are
// bit-reproducible across platforms and standard-library versions.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Stream tags keep independent consumers of one master seed decorrelated.
enum class StreamTag : std::uint64_t {
    generator_global = 1,
    generator_sample = 2,
    param_init = 3,
    epoch_shuffle = 4,
    step_noise = 5,
    split = 6,
};

inline std::uint64_t derive_seed(std::uint64_t seed, StreamTag tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t s = seed;
    (void)splitmix64(s);
    s ^= static_cast<std::uint64_t>(tag) * 0xd1b54a32d192ed03ull;
    (void)splitmix64(s);
    s ^= a * 0x8cb92ba72f3d8dd7ull;
    (void)splitmix64(s);
    s ^= b * 0xaef17502108ef2d9ull;
    return splitmix64(s);
}

// xoshiro256++ with Box-Muller normals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1) with 53 random bits
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform01();  // (0, 1]
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // [0, n); multiply-high bounding (bias negligible for n << 2^64)
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace progmod

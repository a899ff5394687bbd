#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace bladapt {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// All stochastic behaviour flows through Rng. A single master seed plus a
// stream name yields an independent deterministic substream, so runs are
// reproducible regardless of module evaluation order. Uniform and normal
// sampling are implemented directly on the raw mt19937_64 output because
// <random> distributions are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : base_(seed), engine_(seed) {}

    Rng(std::uint64_t master_seed, std::string_view stream)
        : Rng(mix64(master_seed ^ fnv1a64(stream))) {}

    Rng substream(std::string_view name) const {
        return Rng(mix64(base_ ^ fnv1a64(name)));
    }

    std::uint64_t next_u64() { return engine_(); }

    // 53-bit uniform in [0,1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached partner.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n); rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

private:
    std::uint64_t base_ = 0;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace bladapt

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "xmap/errors.hpp"

namespace xmap::rng {

// Deterministic across platforms: mt19937_64 itself is fully specified by
// the standard; only the std::*_distribution adaptors are not, so all
// value transforms below are hand-rolled.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t state = a ^ 0x2545f4914f6cdd1dULL;
    std::uint64_t m = splitmix64(state);
    state = m ^ b;
    return splitmix64(state);
}

// Derive the seed of a named substream from a master seed. Every source of
// randomness in the project (init, shuffle, noise, dropout, sampling) pulls
// from its own derived stream so that runs replay exactly.
inline std::uint64_t derive(std::uint64_t master, std::string_view stream) {
    return mix(master, fnv1a(stream));
}

inline std::uint64_t derive(std::uint64_t master, std::string_view stream, std::uint64_t index) {
    return mix(mix(master, fnv1a(stream)), index);
}

class Stream {
public:
    explicit Stream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; the spare value is cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] keeps the log finite
        double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
        double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // uniform integer in [lo, hi], inclusive; masked rejection sampling
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw ContractError("uniform_int: empty range");
        std::uint64_t range = static_cast<std::uint64_t>(hi - lo);
        if (range == UINT64_MAX) return static_cast<std::int64_t>(engine_());
        ++range;
        // smallest all-ones mask covering range-1
        std::uint64_t mask = range - 1;
        mask |= mask >> 1;
        mask |= mask >> 2;
        mask |= mask >> 4;
        mask |= mask >> 8;
        mask |= mask >> 16;
        mask |= mask >> 32;
        std::uint64_t v;
        do {
            v = engine_() & mask;
        } while (v >= range);
        return lo + static_cast<std::int64_t>(v);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace xmap::rng

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace lalign {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. All randomness in the project flows through this class so
// runs are reproducible from explicit seeds. Gaussian and uniform doubles are
// generated from raw mt19937_64 output instead of std::*_distribution, whose
// algorithms are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        // modulo of a fresh 64-bit draw; bias is ~n/2^64, irrelevant here
        return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller with a cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent deterministic substream, e.g. one per prompt.
    Rng fork(uint64_t stream) const {
        return Rng(splitmix64(base_seed_mix() ^ splitmix64(stream + 0x51ed2700)));
    }

private:
    uint64_t base_seed_mix() const {
        // mt19937_64 state is not cheaply hashable; fork from a copy's next draw
        std::mt19937_64 copy = gen_;
        return copy();
    }

    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lalign

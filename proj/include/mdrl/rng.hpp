#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace mdrl {

// Self-contained xoshiro256** generator with hand-rolled distributions.
// std::*_distribution is implementation-defined, which would break the
// byte-identical reproducibility contract, so none of it is used here.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        // splitmix64 expansion of the seed into the full state
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            s = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi] inclusive, rejection-sampled.
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw std::invalid_argument("rng: empty integer range");
        const uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return lo + static_cast<int>(r % span);
    }

    // Box-Muller without the cached spare, so every draw costs the same
    // number of next_u64 calls regardless of history.
    double normal(double mu = 0.0, double sigma = 1.0) {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(6.283185307179586 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream. Used to give every (step, group, member)
    // its own generator so evaluation order never changes the draws.
    Rng derive(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
        uint64_t h = state_[0];
        for (uint64_t v : {a + 0x9e3779b97f4a7c15ull, b + 0x7f4a7c15ull, c + 0x2545f4914f6cdd1dull}) {
            h ^= v;
            h *= 0x100000001b3ull;
            h ^= h >> 29;
        }
        return Rng(h);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

} // namespace mdrl

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace ctrl {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Deterministic xoshiro256++ stream. Every stochastic component of the
/// engine owns one of these so that runs are reproducible bit-for-bit
/// regardless of platform or standard-library version.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Unbiased integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling over the largest multiple of n
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; the parent state is not advanced.
    Rng fork(std::uint64_t tag) const {
        std::uint64_t sm = s_[0] ^ rotl(s_[1], 13) ^ rotl(s_[2], 29) ^ s_[3];
        sm ^= 0x9E3779B97F4A7C15ULL * (tag + 1);
        Rng child;
        for (auto& s : child.s_) s = splitmix64(sm);
        child.has_spare_ = false;
        return child;
    }

    /// Uniform T-subset of {0,...,n-1} (Floyd's algorithm), returned sorted.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t t) {
        std::vector<std::size_t> out;
        out.reserve(t);
        for (std::size_t j = n - t; j < n; ++j) {
            const std::size_t pick = static_cast<std::size_t>(below(j + 1));
            if (std::find(out.begin(), out.end(), pick) != out.end()) {
                out.push_back(j);
            } else {
                out.push_back(pick);
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4] = {1, 2, 3, 4};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ctrl

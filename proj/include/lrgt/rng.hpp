#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "lrgt/errors.hpp"

namespace lrgt {

// Deterministic random source. mt19937_64 is fully specified by the C++
// standard; the distribution transforms below are hand-rolled because the
// <random> distributions are implementation-defined and would break
// reproducibility across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // Independent stream derived from (seed, stream ids). Used so that e.g.
    // per-epoch batch order does not depend on how much randomness earlier
    // epochs consumed.
    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
        std::uint64_t h = mix(seed ^ 0x9e3779b97f4a7c15ULL);
        for (std::uint64_t s : stream) h = mix(h ^ mix(s + 0xbf58476d1ce4e5b9ULL));
        return Rng(h);
    }

    std::uint64_t next_u64() { return eng_(); }

    // Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t uniform_below(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::uniform_below: n must be positive");
        const std::uint64_t limit = ~0ULL - (~0ULL % n);
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller (polar form avoided to keep draw count fixed).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Normal(0, std) resampled until |z| <= clip standard deviations.
    double trunc_normal(double stddev, double clip = 2.0) {
        double z = normal();
        while (std::fabs(z) > clip) z = normal();
        return z * stddev;
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lrgt

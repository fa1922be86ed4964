#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string_view>
#include <vector>

#include "kctag/errors.hpp"

namespace kctag {

// 64-bit FNV-1a. Used to derive seeds from identifiers and text.
inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// SplitMix64 finalizer; combines seeds into well-mixed sub-stream seeds.
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull + b;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Seeded random source. mt19937_64 output is standardized, and every draw
// below is built from raw 64-bit words, so sequences are identical across
// platforms and standard-library implementations (the std::*_distribution
// classes are not, which is why they are not used here).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ContractViolation("Rng::below: n must be positive");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller. Stateless across calls (no cached
    // second value) so the draw count per call is fixed.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Serialization for resumable training checkpoints.
    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void restore_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw FormatError("Rng: malformed engine state");
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace kctag

#pragma once

#include <cstdint>
#include <cmath>

namespace sipe {

/// SplitMix64 (Steele, Lea & Flood 2014). The whole generator is the three
/// lines in next(); uniform() takes the top 53 bits. Results are identical
/// on every platform, which is what dataset generation and parameter
/// initialisation rely on.
class SplitMix64 {
   public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) { return next() % n; }

    static std::uint64_t mix(std::uint64_t x) { return SplitMix64(x).next(); }

   private:
    std::uint64_t state_;
};

}  // namespace sipe

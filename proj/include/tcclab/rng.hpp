#pragma once

#include <cmath>
#include <cstdint>

namespace tcclab {

// Deterministic 64-bit generator (splitmix64). The recurrence is fixed so that
// identical seeds give identical streams on every platform:
//
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   output = z ^ (z >> 31)
//
// Normal draws use Box-Muller on top of this stream and consume exactly two
// 64-bit draws per value, so draw counts (and therefore replays) stay exact.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53 usable bits
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // standard normal; u1 is shifted into (0, 1] so the log never sees zero
    double next_normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace tcclab

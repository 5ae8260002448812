#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <vector>

namespace mflow {

// Counter-free splitmix64 generator.  Chosen over std::mt19937 because the
// output sequence is pinned by these constants alone, so checkpoints, logs
// and samples are reproducible across standard libraries and platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // One standard normal per call via Box-Muller; consumes exactly two
    // u64 draws.  The sine branch is discarded to keep the stream layout
    // trivial to document.
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        // u1 == 0 would hit log(0); nudge to the smallest representable draw.
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    // Derives an independent child stream without advancing this one.
    // Distinct tags give distinct streams for the same parent state.
    Rng split(std::uint64_t tag) const {
        Rng child(state_ ^ mix(tag + 0x9E3779B97F4A7C15ull));
        return child;
    }

    std::uint64_t state() const { return state_; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

// In-place Fisher-Yates shuffle driven by the portable generator.  The
// modulo bias is below 2^-50 for any realistic n and keeps the draw count
// at exactly n-1 u64s.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace mflow

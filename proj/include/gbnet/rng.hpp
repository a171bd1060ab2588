#pragma once

#include <cmath>
#include <cstdint>

namespace gbnet {

// PCG32: seed-reproducible and splittable via independent streams, so dataset
// items and per-epoch draws can be derived from (seed, index) without any
// dependence on generation order.
class Pcg32 {
public:
    Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}

    Pcg32(std::uint64_t seed, std::uint64_t stream = 1) { reseed(seed, stream); }

    void reseed(std::uint64_t seed, std::uint64_t stream = 1) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    std::uint64_t next_u64() {
        return (static_cast<std::uint64_t>(next_u32()) << 32) | next_u32();
    }

    // [0, 1)
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::uint32_t bounded(std::uint32_t n) {
        std::uint32_t threshold = (-n) % n;
        for (;;) {
            std::uint32_t r = next_u32();
            if (r >= threshold) return r % n;
        }
    }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 1e-12);
        u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(6.283185307179586 * u2);
        has_spare_ = true;
        return mag * std::cos(6.283185307179586 * u2);
    }

    // Derive an independent child stream; used for per-item determinism.
    Pcg32 split(std::uint64_t index) const {
        return Pcg32(mix64(state_ ^ mix64(index)), mix64(inc_ + index));
    }

    std::uint64_t state() const { return state_; }
    std::uint64_t inc() const { return inc_; }
    void restore(std::uint64_t state, std::uint64_t inc) {
        state_ = state;
        inc_ = inc;
        has_spare_ = false;
    }

    static std::uint64_t mix64(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 1;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stream ids keep the per-purpose generators of one run disjoint.
namespace rng_stream {
inline constexpr std::uint64_t kInit = 11;
inline constexpr std::uint64_t kData = 23;
inline constexpr std::uint64_t kTrain = 37;
inline constexpr std::uint64_t kDropout = 53;
}  // namespace rng_stream

template <typename Iter>
void shuffle_indices(Iter first, Iter last, Pcg32& rng) {
    auto n = static_cast<std::uint32_t>(last - first);
    for (std::uint32_t i = n; i > 1; --i) {
        std::uint32_t j = rng.bounded(i);
        std::swap(first[i - 1], first[j]);
    }
}

}  // namespace gbnet

#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace ghnq {

// Seeded random source. Distributions are computed from raw engine output
// here rather than through <random> distributions so sequences do not depend
// on the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Inclusive bounds; unbiased by rejection.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::span<T> items)
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// splitmix64 finalizer; used to derive child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

} // namespace ghnq

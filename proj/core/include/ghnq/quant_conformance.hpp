#pragma once

#include "ghnq/quantsim.hpp"

#include <cstdint>
#include <string>
#include <vector>

// Randomized conformance suite for the quantization primitives. The grid
// oracle here searches all 2^bits levels directly and does not go through
// quantize(); it is what `ghnq quant-check` runs.
namespace ghnq {

struct ConformanceCheck {
    std::string name;
    std::size_t cases = 0;
    std::size_t failures = 0;
    std::string first_failure;

    bool passed() const noexcept { return failures == 0 && cases > 0; }
};

struct ConformanceReport {
    std::vector<ConformanceCheck> checks;

    bool passed() const noexcept;
    std::string to_text() const;
};

// Nearest grid level scale*(q - zero_point) over q in [0, 2^bits - 1]; exact
// ties go to the level further from zero.
std::vector<double> nearest_grid_oracle(std::span<const double> x, const QuantParams& qp);

ConformanceReport run_quant_conformance(std::size_t tensors_per_bitwidth, std::uint64_t seed);

} // namespace ghnq

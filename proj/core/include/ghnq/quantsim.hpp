#pragma once

#include "ghnq/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Tensorwise asymmetric uniform quantization.
//
// A tensor is calibrated from its own min/max on every call. The range is
// nudged so that real zero is representable, then
//
//     scale      = (max - min) / (2^bits - 1)
//     zero_point = clamp(round(-min / scale), 0, 2^bits - 1)
//     q          = clamp(round(x / scale) + zero_point, 0, 2^bits - 1)
//     x_hat      = scale * (q - zero_point)
//
// with round-half-away-from-zero throughout. Constant tensors are degenerate
// and pass through unchanged.
namespace ghnq {

enum class QuantMode { None, SimQuant, NoiseQuant };
enum class Granularity { PerTensor };

std::string to_string(QuantMode mode);
QuantMode parse_quant_mode(std::string_view text);

struct QuantScheme {
    int weight_bits = 8;
    int act_bits = 8;
    QuantMode mode = QuantMode::None;
    Granularity granularity = Granularity::PerTensor;

    void validate() const;
    // "W4A8"; mode is not part of the name.
    std::string name() const;
    // "W4/A8", as printed in reports.
    std::string label() const;
    static QuantScheme parse(std::string_view name, QuantMode mode);

    bool operator==(const QuantScheme&) const = default;
};

bool is_supported_bits(int bits) noexcept;

struct Range {
    double min = 0.0;
    double max = 0.0;
    bool degenerate = false;
};

// Widens [min, max] to contain zero. min == max marks the range degenerate.
Range nudge_range(double min, double max);

struct QuantParams {
    double scale = 0.0;
    std::int64_t zero_point = 0;
    int bits = 8;
    // Set for degenerate ranges: quantization is the identity.
    bool passthrough = false;
    // Multiplier used by quantize. Calibrated params store (2^bits-1)/(max-min)
    // directly so exact half-step ties in the range resolve as in exact
    // arithmetic; scale itself is rounded up to a 44-bit mantissa so that
    // scale * k is exact for every code k and re-quantizing a quantized
    // tensor reproduces it bit for bit.
    double inv_scale = 0.0;

    std::int64_t max_code() const noexcept { return (std::int64_t{1} << bits) - 1; }

    static QuantParams from_scale(double scale, std::int64_t zero_point, int bits);
};

// Expects a nudged range (min <= 0 <= max).
QuantParams compute_qparams(const Range& range, int bits);
QuantParams compute_qparams(double min, double max, int bits);
// min/max of x, nudged, then compute_qparams.
QuantParams calibrate(std::span<const double> x, int bits);

std::vector<std::int64_t> quantize(std::span<const double> x, const QuantParams& qp);
std::vector<double> dequantize(std::span<const std::int64_t> q, const QuantParams& qp);

struct FakeQuantResult {
    std::vector<double> values;
    // Straight-through gradient mask: 1 where the pre-clamp code is inside
    // [0, 2^bits - 1], 0 where it saturated.
    std::vector<std::uint8_t> mask;
    QuantParams params;
};

FakeQuantResult fake_quant_ste(std::span<const double> x, int bits);
FakeQuantResult fake_quant_ste(std::span<const double> x, const QuantParams& qp);
std::vector<double> fake_quant(std::span<const double> x, int bits);

struct NoiseQuantResult {
    std::vector<double> values;
    double step = 0.0;
};

// x + U(-step/2, step/2) per element, step taken from the same calibration
// as fake_quant. Degenerate tensors are returned unchanged.
NoiseQuantResult noise_quant_detail(std::span<const double> x, int bits, Rng& rng);
std::vector<double> noise_quant(std::span<const double> x, int bits, Rng& rng);

} // namespace ghnq

#include "ghnq/quantsim.hpp"

#include "ghnq/error.hpp"

#include <algorithm>
#include <cmath>

namespace ghnq {

std::string to_string(QuantMode mode)
{
    switch (mode) {
    case QuantMode::None:
        return "none";
    case QuantMode::SimQuant:
        return "simquant";
    case QuantMode::NoiseQuant:
        return "noisequant";
    }
    return "none";
}

QuantMode parse_quant_mode(std::string_view text)
{
    if (text == "none")
        return QuantMode::None;
    if (text == "simquant")
        return QuantMode::SimQuant;
    if (text == "noisequant")
        return QuantMode::NoiseQuant;
    throw UsageError("unknown quantization mode '" + std::string(text) + "' (expected none|simquant|noisequant)");
}

bool is_supported_bits(int bits) noexcept
{
    return bits == 2 || bits == 4 || bits == 8;
}

void QuantScheme::validate() const
{
    if (!is_supported_bits(weight_bits) || !is_supported_bits(act_bits))
        throw ConfigError("bitwidths must be 2, 4 or 8 (got " + name() + ")");
}

std::string QuantScheme::name() const
{
    return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits);
}

std::string QuantScheme::label() const
{
    return "W" + std::to_string(weight_bits) + "/A" + std::to_string(act_bits);
}

QuantScheme QuantScheme::parse(std::string_view name, QuantMode mode)
{
    // W<digits>A<digits>, optionally with a slash: W4A8 or W4/A8.
    std::string s(name);
    s.erase(std::remove(s.begin(), s.end(), '/'), s.end());
    const auto a = s.find('A');
    if (s.size() < 4 || s[0] != 'W' || a == std::string::npos || a < 2 || a + 1 >= s.size())
        throw UsageError("malformed scheme '" + std::string(name) + "' (expected e.g. W4A8)");
    QuantScheme scheme;
    try {
        std::size_t used = 0;
        scheme.weight_bits = std::stoi(s.substr(1, a - 1), &used);
        if (used != a - 1)
            throw std::invalid_argument("w");
        scheme.act_bits = std::stoi(s.substr(a + 1), &used);
        if (used != s.size() - a - 1)
            throw std::invalid_argument("a");
    } catch (const std::logic_error&) {
        throw UsageError("malformed scheme '" + std::string(name) + "' (expected e.g. W4A8)");
    }
    scheme.mode = mode;
    if (!is_supported_bits(scheme.weight_bits) || !is_supported_bits(scheme.act_bits))
        throw UsageError("unsupported scheme '" + std::string(name) + "' (bitwidths must be 2, 4 or 8)");
    return scheme;
}

Range nudge_range(double min, double max)
{
    if (!std::isfinite(min) || !std::isfinite(max))
        throw Error("nudge_range: non-finite bound");
    if (min > max)
        throw Error("nudge_range: min > max");
    if (min == max)
        return {min, max, true};
    return {std::min(min, 0.0), std::max(max, 0.0), false};
}

namespace {

void check_bits(int bits)
{
    if (!is_supported_bits(bits))
        throw ConfigError("unsupported bitwidth " + std::to_string(bits));
}

// Smallest value >= s whose mantissa fits in 44 bits.
double snap_scale(double s)
{
    int exp = 0;
    const double m = std::frexp(s, &exp);
    return std::ldexp(std::ceil(std::ldexp(m, 44)), exp - 44);
}

} // namespace

QuantParams QuantParams::from_scale(double scale, std::int64_t zero_point, int bits)
{
    check_bits(bits);
    if (!(scale > 0.0) || !std::isfinite(scale))
        throw Error("quant params: scale must be positive and finite");
    QuantParams qp;
    qp.scale = scale;
    qp.inv_scale = 1.0 / scale;
    qp.zero_point = zero_point;
    qp.bits = bits;
    if (zero_point < 0 || zero_point > qp.max_code())
        throw Error("quant params: zero_point out of range");
    return qp;
}

QuantParams compute_qparams(const Range& range, int bits)
{
    check_bits(bits);
    QuantParams qp;
    qp.bits = bits;
    if (range.degenerate || range.min == range.max) {
        qp.passthrough = true;
        return qp;
    }
    if (!(range.min <= 0.0 && range.max >= 0.0))
        throw Error("compute_qparams: range must be nudged to contain zero");
    const auto levels = static_cast<double>(qp.max_code());
    const double width = range.max - range.min;
    qp.inv_scale = levels / width;
    qp.scale = snap_scale(width / levels);
    const double zp = std::round(-range.min * qp.inv_scale);
    qp.zero_point = std::clamp(static_cast<std::int64_t>(zp), std::int64_t{0}, qp.max_code());
    return qp;
}

QuantParams compute_qparams(double min, double max, int bits)
{
    return compute_qparams(Range{min, max, min == max}, bits);
}

QuantParams calibrate(std::span<const double> x, int bits)
{
    check_bits(bits);
    if (x.empty()) {
        QuantParams qp;
        qp.bits = bits;
        qp.passthrough = true;
        return qp;
    }
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    return compute_qparams(nudge_range(*lo, *hi), bits);
}

std::vector<std::int64_t> quantize(std::span<const double> x, const QuantParams& qp)
{
    if (qp.passthrough)
        throw Error("quantize: degenerate params have no integer grid");
    std::vector<std::int64_t> q(x.size());
    const std::int64_t top = qp.max_code();
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]))
            throw Error("quantize: non-finite element at index " + std::to_string(i));
        const auto code = static_cast<std::int64_t>(std::round(x[i] * qp.inv_scale)) + qp.zero_point;
        q[i] = std::clamp(code, std::int64_t{0}, top);
    }
    return q;
}

std::vector<double> dequantize(std::span<const std::int64_t> q, const QuantParams& qp)
{
    if (qp.passthrough)
        throw Error("dequantize: degenerate params have no integer grid");
    std::vector<double> x(q.size());
    const std::int64_t top = qp.max_code();
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < 0 || q[i] > top)
            throw Error("dequantize: code " + std::to_string(q[i]) + " out of range at index " + std::to_string(i));
        x[i] = qp.scale * static_cast<double>(q[i] - qp.zero_point);
    }
    return x;
}

FakeQuantResult fake_quant_ste(std::span<const double> x, const QuantParams& qp)
{
    FakeQuantResult out;
    out.params = qp;
    out.values.resize(x.size());
    out.mask.assign(x.size(), 1);
    if (qp.passthrough) {
        std::copy(x.begin(), x.end(), out.values.begin());
        return out;
    }
    const std::int64_t top = qp.max_code();
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]))
            throw Error("fake_quant: non-finite element at index " + std::to_string(i));
        const auto code = static_cast<std::int64_t>(std::round(x[i] * qp.inv_scale)) + qp.zero_point;
        const auto clamped = std::clamp(code, std::int64_t{0}, top);
        out.mask[i] = code == clamped ? 1 : 0;
        out.values[i] = qp.scale * static_cast<double>(clamped - qp.zero_point);
    }
    return out;
}

FakeQuantResult fake_quant_ste(std::span<const double> x, int bits)
{
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isfinite(x[i]))
            throw Error("fake_quant: non-finite element at index " + std::to_string(i));
    return fake_quant_ste(x, calibrate(x, bits));
}

std::vector<double> fake_quant(std::span<const double> x, int bits)
{
    return fake_quant_ste(x, bits).values;
}

NoiseQuantResult noise_quant_detail(std::span<const double> x, int bits, Rng& rng)
{
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isfinite(x[i]))
            throw Error("noise_quant: non-finite element at index " + std::to_string(i));
    NoiseQuantResult out;
    out.values.assign(x.begin(), x.end());
    const QuantParams qp = calibrate(x, bits);
    if (qp.passthrough)
        return out;
    out.step = qp.scale;
    for (double& v : out.values)
        v += (rng.uniform() - 0.5) * out.step;
    return out;
}

std::vector<double> noise_quant(std::span<const double> x, int bits, Rng& rng)
{
    return noise_quant_detail(x, bits, rng).values;
}

} // namespace ghnq

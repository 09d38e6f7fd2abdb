#include "ghnq/tensor.hpp"

#include "ghnq/error.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace ghnq {

std::int64_t numel(const Shape& shape)
{
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0)
            throw Error("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values))
{
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
        throw Error("tensor data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
}

namespace {

constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv_u64(std::uint64_t h, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= kFnvPrime;
    }
    return h;
}

} // namespace

std::uint64_t checksum(std::span<const double> values, std::uint64_t seed)
{
    std::uint64_t h = seed;
    for (double v : values)
        h = fnv_u64(h, std::bit_cast<std::uint64_t>(v));
    return h;
}

std::uint64_t checksum(const Tensor& t, std::uint64_t seed)
{
    std::uint64_t h = fnv_u64(seed, t.shape.size());
    for (auto d : t.shape)
        h = fnv_u64(h, static_cast<std::uint64_t>(d));
    return checksum(t.values(), h);
}

std::uint64_t checksum_bytes(std::string_view bytes, std::uint64_t seed)
{
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

bool all_finite(std::span<const double> values) noexcept
{
    for (double v : values)
        if (!std::isfinite(v))
            return false;
    return true;
}

} // namespace ghnq

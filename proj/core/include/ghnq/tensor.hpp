#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ghnq {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles. Shape and data always agree in size.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    std::size_t size() const noexcept { return data.size(); }
    bool empty() const noexcept { return data.empty(); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const noexcept { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    std::span<double> values() noexcept { return data; }
    std::span<const double> values() const noexcept { return data; }

    bool operator==(const Tensor&) const = default;
};

// FNV-1a over the little-endian bytes of each value.
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 14695981039346656037ull);
// Includes the shape in the hash.
std::uint64_t checksum(const Tensor& t, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t checksum_bytes(std::string_view bytes, std::uint64_t seed = 14695981039346656037ull);
std::string hex64(std::uint64_t v);

bool all_finite(std::span<const double> values) noexcept;

} // namespace ghnq

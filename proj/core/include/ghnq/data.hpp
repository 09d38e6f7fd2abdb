#pragma once

#include "ghnq/rng.hpp"
#include "ghnq/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Image datasets: CIFAR-10 binary batches and a synthetic stand-in. Pixels
// are kept as bytes and standardized per channel when a batch is built.
namespace ghnq {

struct ImageSet {
    std::array<int, 3> chw{3, 32, 32};
    // N * C * H * W bytes, channel-planar per image.
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_bytes() const noexcept { return static_cast<std::size_t>(chw[0]) * chw[1] * chw[2]; }
};

struct ImageDataset {
    std::string source; // "cifar10:<dir>" or "synth"
    int num_classes = 10;
    ImageSet train;
    ImageSet test;
    // Per-channel statistics of train pixels scaled to [0, 1].
    std::vector<double> mean;
    std::vector<double> stddev;

    void compute_standardization();
    // Images [start, start + count) of `set` as (count, C, H, W), standardized.
    Tensor batch(const ImageSet& set, std::size_t start, std::size_t count) const;
    std::vector<int> labels(const ImageSet& set, std::size_t start, std::size_t count) const;
};

// Full batches of `batch_size` in `set` (a trailing partial batch is dropped).
std::size_t full_batches(const ImageSet& set, std::size_t batch_size);

// One CIFAR-10 binary batch file: 3073-byte records (label, 1024 R, 1024 G,
// 1024 B). Errors name the byte offset.
ImageSet parse_cifar_batch(std::string_view bytes);
std::string serialize_cifar_batch(const ImageSet& set);

// data_batch_1..5.bin and test_batch.bin from `dir`.
ImageDataset load_cifar10(const std::string& dir);

struct SynthConfig {
    int num_classes = 4;
    int train_size = 2048;
    int test_size = 512;
    std::array<int, 3> chw{3, 32, 32};
    // Pixel noise standard deviation on the [0, 1] scale; larger is harder.
    double noise = 0.15;
    // Spread of the class colour prototypes; smaller is harder.
    double color_separation = 0.25;
    // Peak of the class-positioned Gaussian blob.
    double blob_amplitude = 0.35;
    std::uint64_t seed = 0;

    void validate() const;
};

SynthConfig parse_synth_config(std::string_view json_text);
std::string synth_config_to_json(const SynthConfig& cfg);

// Class-conditional images: a per-class colour plus a Gaussian blob at a
// per-class position, with pixel noise. Deterministic in cfg.seed.
ImageDataset synth_dataset(const SynthConfig& cfg);

std::uint64_t checksum(const ImageDataset& d);

} // namespace ghnq

#include "ghnq/data.hpp"

#include "ghnq/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ghnq {

using nlohmann::json;

void ImageDataset::compute_standardization()
{
    const auto c = static_cast<std::size_t>(train.chw[0]);
    const std::size_t plane = static_cast<std::size_t>(train.chw[1]) * static_cast<std::size_t>(train.chw[2]);
    mean.assign(c, 0.0);
    stddev.assign(c, 1.0);
    if (train.size() == 0)
        return;
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (std::size_t n = 0; n < train.size(); ++n)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::uint8_t* p = &train.pixels[(n * c + ch) * plane];
            for (std::size_t i = 0; i < plane; ++i) {
                const double v = p[i] / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    const double count = static_cast<double>(train.size() * plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
        mean[ch] = sum[ch] / count;
        const double var = std::max(0.0, sq[ch] / count - mean[ch] * mean[ch]);
        stddev[ch] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
}

Tensor ImageDataset::batch(const ImageSet& set, std::size_t start, std::size_t count) const
{
    if (start + count > set.size())
        throw Error("image batch [" + std::to_string(start) + ", " + std::to_string(start + count) + ") exceeds " +
                    std::to_string(set.size()) + " images");
    const auto c = static_cast<std::size_t>(set.chw[0]);
    if (mean.size() != c || stddev.size() != c)
        throw Error("dataset standardization constants are missing");
    const std::size_t plane = static_cast<std::size_t>(set.chw[1]) * static_cast<std::size_t>(set.chw[2]);
    Tensor out({static_cast<std::int64_t>(count), set.chw[0], set.chw[1], set.chw[2]});
    for (std::size_t n = 0; n < count; ++n)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::uint8_t* p = &set.pixels[((start + n) * c + ch) * plane];
            double* q = &out.data[(n * c + ch) * plane];
            for (std::size_t i = 0; i < plane; ++i)
                q[i] = (p[i] / 255.0 - mean[ch]) / stddev[ch];
        }
    return out;
}

std::vector<int> ImageDataset::labels(const ImageSet& set, std::size_t start, std::size_t count) const
{
    if (start + count > set.size())
        throw Error("label range exceeds dataset");
    return {set.labels.begin() + static_cast<std::ptrdiff_t>(start),
            set.labels.begin() + static_cast<std::ptrdiff_t>(start + count)};
}

std::size_t full_batches(const ImageSet& set, std::size_t batch_size)
{
    return batch_size == 0 ? 0 : set.size() / batch_size;
}

// ---------------------------------------------------------------------------
// CIFAR-10

namespace {

constexpr std::size_t kCifarImage = 3 * 32 * 32;
constexpr std::size_t kCifarRecord = 1 + kCifarImage;

std::string read_file(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw Error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void append(ImageSet& dst, const ImageSet& src)
{
    dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
    dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

} // namespace

ImageSet parse_cifar_batch(std::string_view bytes)
{
    if (bytes.size() % kCifarRecord != 0)
        throw FormatError("CIFAR batch size " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(kCifarRecord) + " (trailing record starts at byte offset " +
                          std::to_string(bytes.size() / kCifarRecord * kCifarRecord) + ")");
    ImageSet set;
    set.chw = {3, 32, 32};
    const std::size_t n = bytes.size() / kCifarRecord;
    set.labels.reserve(n);
    set.pixels.reserve(n * kCifarImage);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t off = r * kCifarRecord;
        const auto label = static_cast<unsigned char>(bytes[off]);
        if (label > 9)
            throw FormatError("CIFAR record " + std::to_string(r) + " at byte offset " + std::to_string(off) +
                              " has label " + std::to_string(label));
        set.labels.push_back(label);
        for (std::size_t i = 0; i < kCifarImage; ++i)
            set.pixels.push_back(static_cast<std::uint8_t>(bytes[off + 1 + i]));
    }
    return set;
}

std::string serialize_cifar_batch(const ImageSet& set)
{
    if (set.chw != std::array<int, 3>{3, 32, 32})
        throw Error("CIFAR records are 3x32x32");
    std::string out;
    out.reserve(set.size() * kCifarRecord);
    for (std::size_t r = 0; r < set.size(); ++r) {
        if (set.labels[r] < 0 || set.labels[r] > 9)
            throw Error("CIFAR label out of range");
        out.push_back(static_cast<char>(set.labels[r]));
        out.append(reinterpret_cast<const char*>(&set.pixels[r * kCifarImage]), kCifarImage);
    }
    return out;
}

ImageDataset load_cifar10(const std::string& dir)
{
    ImageDataset d;
    d.source = "cifar10:" + dir;
    d.num_classes = 10;
    const auto load = [&](const std::string& name, ImageSet& dst) {
        const std::string path = (std::filesystem::path(dir) / name).string();
        try {
            append(dst, parse_cifar_batch(read_file(path)));
        } catch (const FormatError& e) {
            throw FormatError(path + ": " + e.what());
        }
    };
    for (int i = 1; i <= 5; ++i)
        load("data_batch_" + std::to_string(i) + ".bin", d.train);
    load("test_batch.bin", d.test);
    d.compute_standardization();
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic

void SynthConfig::validate() const
{
    if (num_classes < 2)
        throw ConfigError("synth: num_classes must be at least 2");
    if (train_size < 0 || test_size < 0)
        throw ConfigError("synth: sizes must be non-negative");
    if (chw[0] <= 0 || chw[1] <= 0 || chw[2] <= 0)
        throw ConfigError("synth: chw must be positive");
    if (noise < 0 || color_separation < 0 || blob_amplitude < 0)
        throw ConfigError("synth: noise, color_separation and blob_amplitude must be non-negative");
}

SynthConfig parse_synth_config(std::string_view json_text)
{
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    if (!j.is_object())
        throw ConfigError("synth config must be a JSON object");
    SynthConfig cfg;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "num_classes")
                cfg.num_classes = value.get<int>();
            else if (key == "train_size")
                cfg.train_size = value.get<int>();
            else if (key == "test_size")
                cfg.test_size = value.get<int>();
            else if (key == "chw")
                cfg.chw = value.get<std::array<int, 3>>();
            else if (key == "noise")
                cfg.noise = value.get<double>();
            else if (key == "color_separation")
                cfg.color_separation = value.get<double>();
            else if (key == "blob_amplitude")
                cfg.blob_amplitude = value.get<double>();
            else if (key == "seed")
                cfg.seed = value.get<std::uint64_t>();
            else
                throw ConfigError("synth config: unknown key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("synth config: bad value for '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

std::string synth_config_to_json(const SynthConfig& cfg)
{
    return json{{"num_classes", cfg.num_classes}, {"train_size", cfg.train_size}, {"test_size", cfg.test_size},
                {"chw", cfg.chw}, {"noise", cfg.noise}, {"color_separation", cfg.color_separation},
                {"blob_amplitude", cfg.blob_amplitude}, {"seed", cfg.seed}}
        .dump();
}

ImageDataset synth_dataset(const SynthConfig& cfg)
{
    cfg.validate();
    const auto K = static_cast<std::size_t>(cfg.num_classes);
    const auto C = static_cast<std::size_t>(cfg.chw[0]);
    const auto H = static_cast<std::size_t>(cfg.chw[1]);
    const auto W = static_cast<std::size_t>(cfg.chw[2]);

    Rng proto(mix_seed(cfg.seed, 0x5eed));
    std::vector<double> color(K * C), sign(K * C);
    std::vector<double> cy(K), cx(K);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < C; ++c) {
            color[k * C + c] = 0.5 + cfg.color_separation * proto.uniform(-1.0, 1.0);
            sign[k * C + c] = proto.bernoulli(0.5) ? 1.0 : -1.0;
        }
        cy[k] = proto.uniform(0.25, 0.75) * static_cast<double>(H);
        cx[k] = proto.uniform(0.25, 0.75) * static_cast<double>(W);
    }
    const double sigma = std::max(1.0, static_cast<double>(std::min(H, W)) / 6.0);

    const auto render = [&](ImageSet& set, int count, std::uint64_t stream) {
        set.chw = cfg.chw;
        set.labels.resize(static_cast<std::size_t>(count));
        set.pixels.resize(static_cast<std::size_t>(count) * C * H * W);
        Rng rng(mix_seed(cfg.seed, stream));
        for (std::size_t n = 0; n < static_cast<std::size_t>(count); ++n) {
            const std::size_t k = n % K;
            set.labels[n] = static_cast<int>(k);
            const double jy = rng.normal(), jx = rng.normal();
            const double brightness = 0.05 * rng.normal();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) {
                        const double dy = static_cast<double>(y) - cy[k] - jy;
                        const double dx = static_cast<double>(x) - cx[k] - jx;
                        const double blob = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
                        double v = color[k * C + c] + brightness + cfg.blob_amplitude * sign[k * C + c] * blob +
                                   cfg.noise * rng.normal();
                        v = std::clamp(v, 0.0, 1.0);
                        set.pixels[((n * C + c) * H + y) * W + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
                    }
        }
    };

    ImageDataset d;
    d.source = "synth";
    d.num_classes = cfg.num_classes;
    render(d.train, cfg.train_size, 1);
    render(d.test, cfg.test_size, 2);
    d.compute_standardization();
    return d;
}

std::uint64_t checksum(const ImageDataset& d)
{
    std::uint64_t h = checksum_bytes(d.source);
    for (const ImageSet* s : {&d.train, &d.test}) {
        h = checksum_bytes(std::string_view(reinterpret_cast<const char*>(s->pixels.data()), s->pixels.size()), h);
        for (int l : s->labels)
            h = mix_seed(h, static_cast<std::uint64_t>(l));
    }
    return h;
}

} // namespace ghnq

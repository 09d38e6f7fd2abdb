#pragma once

#include "ghnq/archspace.hpp"
#include "ghnq/autograd.hpp"
#include "ghnq/qcnn.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

// Graph hypernetwork: gated message passing over an ArchGraph followed by
// per-role decoder heads that emit every parameter tensor of the CNN.
namespace ghnq {

struct GhnConfig {
    int hidden_dim = 32;
    // Rounds of (forward traversal, backward traversal).
    int passes = 1;
    // Conv base (C_out, C_in, k, k); depthwise is (C_out, 1, k, k), linear
    // (C_out, C_in), BatchNorm (C_out).
    std::array<int, 4> base{64, 64, 3, 3};

    void validate() const;
    bool operator==(const GhnConfig&) const = default;
};

std::string ghn_config_to_json(const GhnConfig& cfg);
GhnConfig parse_ghn_config(std::string_view json_text);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

class GhnModel {
public:
    GhnModel() = default;
    explicit GhnModel(GhnConfig cfg);

    const GhnConfig& config() const noexcept { return cfg_; }

    // Stable order; names look like "fw.gru.w_ih" or "dec.conv.w".
    NamedTensors& tensors() noexcept { return tensors_; }
    const NamedTensors& tensors() const noexcept { return tensors_; }
    Tensor& tensor(const std::string& name);
    const Tensor& tensor(const std::string& name) const;

    std::size_t parameter_count() const;
    std::uint64_t checksum() const;

private:
    GhnConfig cfg_;
    NamedTensors tensors_;
};

// Fan-in uniform init (embedding table unit normal), deterministic in rng.
GhnModel init_ghn(const GhnConfig& cfg, Rng& rng);

// Tape handles for every GHN tensor, in tensors() order.
using GhnVars = std::map<std::string, ag::Var>;
GhnVars bind_ghn(ag::Tape& tape, const GhnModel& ghn);

// Node states (hidden_dim) in g.nodes order.
std::vector<ag::Var> encode(ag::Tape& tape, const GhnModel& ghn, const GhnVars& vars, const ArchGraph& g);
// Parameter tensors for every parameterised node, shaped as in `shapes`.
ParamVars decode_params(ag::Tape& tape, const GhnModel& ghn, const GhnVars& vars, const std::vector<ag::Var>& states,
                        const ArchGraph& g, const ShapeMap& shapes);

// Value-only conveniences.
std::vector<Tensor> encode(const GhnModel& ghn, const ArchGraph& g);
ParamSet predict_parameters(const GhnModel& ghn, const ArchGraph& g, std::array<int, 3> input_chw = {3, 32, 32});

// Flat source index into the base tensor for every element of `target`:
// leading indices when smaller, cyclic repetition when larger. Throws
// ConfigError when the target kernel exceeds the base kernel.
std::vector<std::size_t> tile_indices(const Shape& target, const Shape& base);

// Checkpoint file: magic, version, JSON header, tensor manifest, f64
// payloads and a payload checksum. See docs/formats.md.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string header_json = "{}";
    NamedTensors tensors;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

// The header stores {"ghn": <config>, ...extra}; `extra_header` must be a
// JSON object whose keys are merged in. Tensors named "opt.*" are carried
// but ignored by load_ghn.
void save_ghn(const GhnModel& ghn, const std::string& path, const std::string& extra_header = "{}",
              const NamedTensors& extra_tensors = {});
GhnModel load_ghn(const std::string& path);
GhnModel ghn_from_checkpoint(const Checkpoint& ckpt);

} // namespace ghnq

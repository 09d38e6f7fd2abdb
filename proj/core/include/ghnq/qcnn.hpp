#pragma once

#include "ghnq/archspace.hpp"
#include "ghnq/autograd.hpp"
#include "ghnq/quantsim.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

// Executes an ArchGraph as a CNN with weight and activation quantization.
namespace ghnq {

enum class ParamSource { Predicted, Random };

// Per parameterised node, tensors in infer_shapes order: Conv/DWConv/Linear
// one weight, BatchNorm gain then bias.
struct ParamSet {
    ParamSource source = ParamSource::Random;
    std::map<int, std::vector<Tensor>> tensors;
};

// Throws ShapeError for missing, orphan or mis-shaped entries.
void validate_params(const ArchGraph& g, const ShapeMap& shapes, const ParamSet& p);

// He-normal weights, unit BN gain, zero BN bias.
ParamSet random_params(const ArchGraph& g, const ShapeMap& shapes, Rng& rng);

std::uint64_t checksum(const ParamSet& p);

using ParamVars = std::map<int, std::vector<ag::Var>>;

struct ForwardOptions {
    // Seeds NoiseQuant; each quantization point derives its own stream.
    std::uint64_t noise_seed = 0;
    // Called with every node's output (after quantization) in execution order.
    std::function<void(int node_id, const Tensor& value)> trace;
};

// True when node `id` quantizes its output. Skipped: Input, Output, Linear
// (logits), and nodes whose consumers are all BatchNorm/ReLU/ReLU6, so a
// conv-BN-ReLU chain is quantized once, after the activation.
bool quantizes_output(const ArchGraph& g, int id);

// Records the network on `tape`. `input` is an (N, C, H, W) batch; returns
// logits (N, classes).
ag::Var build_cnn(ag::Tape& tape, const ArchGraph& g, const ParamVars& params, ag::Var input,
                  const QuantScheme& scheme, const ForwardOptions& opts = {});

Tensor forward_cnn(const ArchGraph& g, const ParamSet& p, const Tensor& batch, const QuantScheme& scheme,
                   const ForwardOptions& opts = {});

struct LossGrad {
    double loss = 0.0;
    std::map<int, std::vector<Tensor>> grad;
};

LossGrad loss_and_grad(const ArchGraph& g, const ParamSet& p, const Tensor& batch, std::span<const int> labels,
                       const QuantScheme& scheme, const ForwardOptions& opts = {});

} // namespace ghnq

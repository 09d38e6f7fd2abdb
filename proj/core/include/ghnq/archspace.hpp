#pragma once

#include "ghnq/rng.hpp"
#include "ghnq/tensor.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

// CNN architecture space: graph types, the random sampler, virtual edges,
// shape inference and the line-oriented dataset format.
namespace ghnq {

enum class OpType {
    Input,
    Conv,
    DWConv,
    BatchNorm,
    ReLU,
    ReLU6,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Add,
    Concat,
    Linear,
    Output,
};
inline constexpr std::size_t kOpCount = 13;

std::string_view to_string(OpType op);
OpType parse_op(std::string_view name);
bool has_params(OpType op) noexcept;

enum class Split { Train, IDTest, OODDeep, OODWide, OODBNFree };
inline constexpr std::array kAllSplits{Split::Train, Split::IDTest, Split::OODDeep, Split::OODWide, Split::OODBNFree};

// "train", "id", "deep", "wide", "bnfree"
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct OpNode {
    int id = 0;
    OpType op = OpType::Input;
    // Conv/DWConv/MaxPool/AvgPool: kernel in {1,3,5}, stride in {1,2}.
    int kernel = 0;
    int stride = 1;
    // Conv: output channels; Linear: number of classes.
    int out_channels = 0;
    // DWConv: equals its channel count once shapes are inferred; 0 means "all".
    int groups = 1;

    bool operator==(const OpNode&) const = default;
};

struct Edge {
    int src = 0;
    int dst = 0;
    bool operator==(const Edge&) const = default;
};

struct VirtualEdge {
    int src = 0;
    int dst = 0;
    int distance = 0;
    bool operator==(const VirtualEdge&) const = default;
};

struct ArchGraph {
    std::int64_t graph_id = 0;
    std::uint64_t seed = 0;
    Split split = Split::Train;
    // Listed in a topological order.
    std::vector<OpNode> nodes;
    std::vector<Edge> edges;
    std::vector<VirtualEdge> virtual_edges;

    const OpNode& node(int id) const;
    std::size_t index_of(int id) const;
    // Sources of edges into `id`, in edge-list order.
    std::vector<int> inputs(int id) const;
    std::vector<int> outputs(int id) const;
    std::size_t count(OpType op) const;
    int input_id() const;
    int output_id() const;

    bool operator==(const ArchGraph&) const = default;
};

// Throws GraphError naming the offending node.
void validate(const ArchGraph& g);

// Node ids in a topological order derived from the edges (Kahn's algorithm,
// ties broken by list position).
std::vector<int> topological_order(const ArchGraph& g);

struct DepthWidth {
    int min_nodes = 6;
    int max_nodes = 14;
    int min_width = 8;
    int max_width = 64;
};

// Sampler configuration. IDTest and OODBNFree share the train bands; OODDeep
// replaces the node-count band and OODWide the channel-width band.
struct GenConfig {
    int train_min_nodes = 6;
    int train_max_nodes = 14;
    int train_min_width = 8;
    int train_max_width = 64;
    int deep_min_nodes = 18;
    int deep_max_nodes = 30;
    int wide_min_width = 96;
    int wide_max_width = 256;

    // Relative weights of the body blocks keyed by their characteristic op:
    // Conv (conv block), DWConv (separable block), Add (residual block),
    // Concat (two-branch block), MaxPool / AvgPool (pooling). Must sum to 1.
    std::map<OpType, double> op_weights{
        {OpType::Conv, 0.3}, {OpType::DWConv, 0.25}, {OpType::Add, 0.2},
        {OpType::Concat, 0.1}, {OpType::MaxPool, 0.075}, {OpType::AvgPool, 0.075},
    };
    double batchnorm_prob = 0.8; // per conv, outside the BN-free split
    double relu6_prob = 0.3;     // activation choice
    double stride2_prob = 0.3;   // per downsampling-capable op
    std::vector<int> kernel_sizes{1, 3};
    int stem_stride = 1;
    int max_downsamples = 3;
    int num_classes = 10;
    std::array<int, 3> input_chw{3, 32, 32};
    int s_max = 10;

    std::map<Split, int> counts{
        {Split::Train, 1000}, {Split::IDTest, 100}, {Split::OODDeep, 100},
        {Split::OODWide, 100}, {Split::OODBNFree, 100},
    };
    std::uint64_t seed = 0;

    DepthWidth band(Split split) const;
    void validate() const;
};

// JSON config files; unknown keys are rejected, missing keys keep defaults.
GenConfig parse_gen_config(std::string_view json_text);
std::string gen_config_to_json(const GenConfig& cfg);

ArchGraph sample_graph(const GenConfig& cfg, Split split, Rng& rng);

// Adds (u, v, d) for every ordered pair at directed shortest-path distance
// 2 <= d <= s_max; replaces any existing virtual edges.
ArchGraph add_virtual_edges(ArchGraph g, int s_max);

// Samples counts[split] graphs per split (with virtual edges), in split order.
// Each graph derives its own seed from cfg.seed; seeds are unique.
std::vector<ArchGraph> generate_dataset(const GenConfig& cfg);

struct NodeShape {
    // (C, H, W) for feature maps; (N_out) for Linear.
    Shape out;
    // Conv (out, in, k, k); DWConv (c, 1, k, k); Linear (classes, features);
    // BatchNorm (c) gain and (c) bias. Empty for parameterless ops.
    std::vector<Shape> params;
};

using ShapeMap = std::map<int, NodeShape>;

ShapeMap infer_shapes(const ArchGraph& g, std::array<int, 3> input_chw = {3, 32, 32});

// Dataset file: one JSON object per line. The first line is a header
// {"format":"ghnq-graphs","version":1,"count":N}; each further line holds
// one graph. See docs/formats.md.
inline constexpr int kGraphFormatVersion = 1;

std::string serialize_dataset(const std::vector<ArchGraph>& graphs);
std::vector<ArchGraph> deserialize_dataset(std::string_view text);
void write_dataset(const std::string& path, const std::vector<ArchGraph>& graphs);
std::vector<ArchGraph> read_dataset(const std::string& path);

std::string serialize_graph(const ArchGraph& g);
std::uint64_t graph_checksum(const ArchGraph& g);

std::vector<ArchGraph> select_split(const std::vector<ArchGraph>& graphs, Split split);

} // namespace ghnq

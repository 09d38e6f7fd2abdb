#include "ghnq/archspace.hpp"

#include "ghnq/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace ghnq {

namespace {

constexpr std::array<std::string_view, kOpCount> kOpNames{
    "Input", "Conv", "DWConv", "BatchNorm", "ReLU", "ReLU6", "MaxPool",
    "AvgPool", "GlobalAvgPool", "Add", "Concat", "Linear", "Output",
};

constexpr std::array<std::string_view, 5> kSplitNames{"train", "id", "deep", "wide", "bnfree"};

bool valid_kernel(int k) { return k == 1 || k == 3 || k == 5; }
bool valid_stride(int s) { return s == 1 || s == 2; }

} // namespace

std::string_view to_string(OpType op)
{
    return kOpNames[static_cast<std::size_t>(op)];
}

OpType parse_op(std::string_view name)
{
    for (std::size_t i = 0; i < kOpNames.size(); ++i)
        if (kOpNames[i] == name)
            return static_cast<OpType>(i);
    throw FormatError("unknown op '" + std::string(name) + "'");
}

bool has_params(OpType op) noexcept
{
    return op == OpType::Conv || op == OpType::DWConv || op == OpType::Linear || op == OpType::BatchNorm;
}

std::string_view to_string(Split split)
{
    return kSplitNames[static_cast<std::size_t>(split)];
}

Split parse_split(std::string_view name)
{
    for (std::size_t i = 0; i < kSplitNames.size(); ++i)
        if (kSplitNames[i] == name)
            return static_cast<Split>(i);
    throw UsageError("unknown split '" + std::string(name) + "' (expected train|id|deep|wide|bnfree)");
}

// ---------------------------------------------------------------------------
// ArchGraph

std::size_t ArchGraph::index_of(int id) const
{
    for (std::size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].id == id)
            return i;
    throw GraphError(id, "no such node");
}

const OpNode& ArchGraph::node(int id) const
{
    return nodes[index_of(id)];
}

std::vector<int> ArchGraph::inputs(int id) const
{
    std::vector<int> out;
    for (const auto& e : edges)
        if (e.dst == id)
            out.push_back(e.src);
    return out;
}

std::vector<int> ArchGraph::outputs(int id) const
{
    std::vector<int> out;
    for (const auto& e : edges)
        if (e.src == id)
            out.push_back(e.dst);
    return out;
}

std::size_t ArchGraph::count(OpType op) const
{
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [op](const OpNode& n) { return n.op == op; }));
}

int ArchGraph::input_id() const
{
    for (const auto& n : nodes)
        if (n.op == OpType::Input)
            return n.id;
    throw Error("graph has no Input node");
}

int ArchGraph::output_id() const
{
    for (const auto& n : nodes)
        if (n.op == OpType::Output)
            return n.id;
    throw Error("graph has no Output node");
}

std::vector<int> topological_order(const ArchGraph& g)
{
    std::map<int, std::size_t> pos;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        pos[g.nodes[i].id] = i;
    std::vector<int> indegree(g.nodes.size(), 0);
    std::vector<std::vector<std::size_t>> succ(g.nodes.size());
    for (const auto& e : g.edges) {
        const auto s = pos.at(e.src);
        const auto d = pos.at(e.dst);
        succ[s].push_back(d);
        ++indegree[d];
    }
    std::set<std::size_t> ready;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (indegree[i] == 0)
            ready.insert(i);
    std::vector<int> order;
    while (!ready.empty()) {
        const auto i = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(g.nodes[i].id);
        for (auto d : succ[i])
            if (--indegree[d] == 0)
                ready.insert(d);
    }
    if (order.size() != g.nodes.size())
        throw GraphError(g.nodes.empty() ? -1 : g.nodes.front().id, "graph contains a cycle");
    return order;
}

void validate(const ArchGraph& g)
{
    if (g.nodes.empty())
        throw GraphError(-1, "graph has no nodes");
    std::map<int, std::size_t> pos;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (!pos.emplace(g.nodes[i].id, i).second)
            throw GraphError(g.nodes[i].id, "duplicate node id");
    if (g.count(OpType::Input) != 1)
        throw GraphError(g.nodes.front().id, "graph must have exactly one Input node");
    if (g.count(OpType::Output) != 1)
        throw GraphError(g.nodes.back().id, "graph must have exactly one Output node");

    std::set<std::pair<int, int>> seen;
    for (const auto& e : g.edges) {
        if (!pos.contains(e.src) || !pos.contains(e.dst))
            throw GraphError(pos.contains(e.src) ? e.dst : e.src, "edge references unknown node");
        if (pos[e.src] >= pos[e.dst])
            throw GraphError(e.dst, "edge from node " + std::to_string(e.src) + " violates topological node order");
        if (!seen.emplace(e.src, e.dst).second)
            throw GraphError(e.dst, "duplicate edge from node " + std::to_string(e.src));
    }

    for (const auto& n : g.nodes) {
        const auto in = g.inputs(n.id).size();
        const auto out = g.outputs(n.id).size();
        switch (n.op) {
        case OpType::Input:
            if (in != 0)
                throw GraphError(n.id, "Input node has incoming edges");
            break;
        case OpType::Add:
        case OpType::Concat:
            if (in < 2)
                throw GraphError(n.id, std::string(to_string(n.op)) + " needs at least two inputs");
            break;
        default:
            if (in != 1)
                throw GraphError(n.id, std::string(to_string(n.op)) + " needs exactly one input");
        }
        if (n.op == OpType::Output) {
            if (out != 0)
                throw GraphError(n.id, "Output node has outgoing edges");
        } else if (out == 0) {
            throw GraphError(n.id, "node has no consumers (graph must have a single sink)");
        }
        switch (n.op) {
        case OpType::Conv:
            if (n.out_channels <= 0)
                throw GraphError(n.id, "Conv needs positive out_channels");
            [[fallthrough]];
        case OpType::DWConv:
        case OpType::MaxPool:
        case OpType::AvgPool:
            if (!valid_kernel(n.kernel) || !valid_stride(n.stride))
                throw GraphError(n.id, "kernel must be 1, 3 or 5 and stride 1 or 2");
            break;
        case OpType::Linear:
            if (n.out_channels <= 0)
                throw GraphError(n.id, "Linear needs a positive class count");
            break;
        case OpType::BatchNorm:
            if (g.split == Split::OODBNFree)
                throw GraphError(n.id, "BatchNorm in a BN-free graph");
            break;
        default:
            break;
        }
    }

    // Everything reachable from Input; since every non-Output node has a
    // consumer and the graph is acyclic, Output is reachable from every node.
    std::set<int> reached{g.input_id()};
    for (const auto& n : g.nodes)
        if (reached.contains(n.id))
            for (int d : g.outputs(n.id))
                reached.insert(d);
    for (const auto& n : g.nodes)
        if (!reached.contains(n.id))
            throw GraphError(n.id, "node not reachable from Input");

    for (const auto& v : g.virtual_edges) {
        if (!pos.contains(v.src) || !pos.contains(v.dst))
            throw GraphError(v.src, "virtual edge references unknown node");
        if (v.distance < 2)
            throw GraphError(v.dst, "virtual edge distance below 2");
        if (seen.contains({v.src, v.dst}))
            throw GraphError(v.dst, "virtual edge duplicates a real edge");
    }
}

// ---------------------------------------------------------------------------
// GenConfig

DepthWidth GenConfig::band(Split split) const
{
    DepthWidth b{train_min_nodes, train_max_nodes, train_min_width, train_max_width};
    if (split == Split::OODDeep) {
        b.min_nodes = deep_min_nodes;
        b.max_nodes = deep_max_nodes;
    } else if (split == Split::OODWide) {
        b.min_width = wide_min_width;
        b.max_width = wide_max_width;
    }
    return b;
}

void GenConfig::validate() const
{
    if (train_min_nodes < 6 || train_min_nodes > train_max_nodes)
        throw ConfigError("train node range must satisfy 6 <= min <= max");
    if (deep_min_nodes > deep_max_nodes || deep_min_nodes <= train_max_nodes)
        throw ConfigError("deep node range must be non-empty and start above the train maximum");
    if (train_min_width < 1 || train_min_width > train_max_width)
        throw ConfigError("train width range must satisfy 1 <= min <= max");
    if (wide_min_width > wide_max_width || wide_min_width <= train_max_width)
        throw ConfigError("wide width range must be non-empty and start above the train maximum");
    double total = 0.0;
    for (const auto& [op, w] : op_weights) {
        if (op != OpType::Conv && op != OpType::DWConv && op != OpType::Add && op != OpType::Concat &&
            op != OpType::MaxPool && op != OpType::AvgPool)
            throw ConfigError("op weight given for non-block op " + std::string(to_string(op)));
        if (w < 0.0)
            throw ConfigError("negative op weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("op weights must sum to 1");
    for (double p : {batchnorm_prob, relu6_prob, stride2_prob})
        if (p < 0.0 || p > 1.0)
            throw ConfigError("probabilities must lie in [0, 1]");
    if (kernel_sizes.empty())
        throw ConfigError("kernel_sizes must not be empty");
    for (int k : kernel_sizes)
        if (!valid_kernel(k))
            throw ConfigError("kernel sizes must be 1, 3 or 5");
    if (!valid_stride(stem_stride))
        throw ConfigError("stem_stride must be 1 or 2");
    if (max_downsamples < 0)
        throw ConfigError("max_downsamples must be non-negative");
    if (num_classes < 2)
        throw ConfigError("num_classes must be at least 2");
    if (input_chw[0] < 1 || input_chw[1] < 1 || input_chw[2] < 1)
        throw ConfigError("input shape must be positive");
    if (s_max < 2)
        throw ConfigError("s_max must be at least 2");
    for (const auto& [split, n] : counts)
        if (n < 0)
            throw ConfigError("negative graph count for split " + std::string(to_string(split)));
}

GenConfig parse_gen_config(std::string_view json_text)
{
    using nlohmann::json;
    GenConfig cfg;
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("graph config: ") + e.what());
    }
    if (j.contains("graphs"))
        j = j.at("graphs");
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "train_nodes") {
                cfg.train_min_nodes = v.at(0);
                cfg.train_max_nodes = v.at(1);
            } else if (key == "train_width") {
                cfg.train_min_width = v.at(0);
                cfg.train_max_width = v.at(1);
            } else if (key == "deep_nodes") {
                cfg.deep_min_nodes = v.at(0);
                cfg.deep_max_nodes = v.at(1);
            } else if (key == "wide_width") {
                cfg.wide_min_width = v.at(0);
                cfg.wide_max_width = v.at(1);
            } else if (key == "op_weights") {
                cfg.op_weights.clear();
                for (const auto& [op, w] : v.items())
                    cfg.op_weights[parse_op(op)] = w.get<double>();
            } else if (key == "batchnorm_prob") {
                cfg.batchnorm_prob = v;
            } else if (key == "relu6_prob") {
                cfg.relu6_prob = v;
            } else if (key == "stride2_prob") {
                cfg.stride2_prob = v;
            } else if (key == "kernel_sizes") {
                cfg.kernel_sizes = v.get<std::vector<int>>();
            } else if (key == "stem_stride") {
                cfg.stem_stride = v;
            } else if (key == "max_downsamples") {
                cfg.max_downsamples = v;
            } else if (key == "num_classes") {
                cfg.num_classes = v;
            } else if (key == "input_chw") {
                cfg.input_chw = {v.at(0), v.at(1), v.at(2)};
            } else if (key == "s_max") {
                cfg.s_max = v;
            } else if (key == "counts") {
                for (const auto& [split, n] : v.items())
                    cfg.counts[parse_split(split)] = n.get<int>();
            } else if (key == "seed") {
                cfg.seed = v.get<std::uint64_t>();
            } else {
                throw ConfigError("graph config: unknown key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("graph config: ") + e.what());
    } catch (const UsageError& e) {
        throw ConfigError(std::string("graph config: ") + e.what());
    } catch (const FormatError& e) {
        throw ConfigError(std::string("graph config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string gen_config_to_json(const GenConfig& cfg)
{
    using nlohmann::json;
    json weights = json::object();
    for (const auto& [op, w] : cfg.op_weights)
        weights[std::string(to_string(op))] = w;
    json counts = json::object();
    for (const auto& [split, n] : cfg.counts)
        counts[std::string(to_string(split))] = n;
    json j = {
        {"train_nodes", {cfg.train_min_nodes, cfg.train_max_nodes}},
        {"train_width", {cfg.train_min_width, cfg.train_max_width}},
        {"deep_nodes", {cfg.deep_min_nodes, cfg.deep_max_nodes}},
        {"wide_width", {cfg.wide_min_width, cfg.wide_max_width}},
        {"op_weights", weights},
        {"batchnorm_prob", cfg.batchnorm_prob},
        {"relu6_prob", cfg.relu6_prob},
        {"stride2_prob", cfg.stride2_prob},
        {"kernel_sizes", cfg.kernel_sizes},
        {"stem_stride", cfg.stem_stride},
        {"max_downsamples", cfg.max_downsamples},
        {"num_classes", cfg.num_classes},
        {"input_chw", cfg.input_chw},
        {"s_max", cfg.s_max},
        {"counts", counts},
        {"seed", cfg.seed},
    };
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Sampler

namespace {

class GraphBuilder {
public:
    GraphBuilder(const GenConfig& cfg, Split split, Rng& rng)
        : cfg_(cfg), band_(cfg.band(split)), bn_allowed_(split != Split::OODBNFree), rng_(rng),
          spatial_(std::min(cfg.input_chw[1], cfg.input_chw[2])), downsamples_left_(cfg.max_downsamples)
    {
    }

    ArchGraph build(Split split)
    {
        const int target = static_cast<int>(rng_.uniform_int(band_.min_nodes, band_.max_nodes));
        current_ = add({.op = OpType::Input}, {});
        channels_ = cfg_.input_chw[0];

        const bool stem_down = cfg_.stem_stride == 2 && take_downsample_forced();
        current_ = conv(pick_kernel(), stem_down ? 2 : 1, width(), current_);

        int budget = target - 5;
        while (budget > 0)
            budget -= add_block(budget);

        current_ = add({.op = OpType::GlobalAvgPool}, {current_});
        current_ = add({.op = OpType::Linear, .out_channels = cfg_.num_classes}, {current_});
        add({.op = OpType::Output}, {current_});

        ArchGraph g;
        g.split = split;
        g.nodes = std::move(nodes_);
        g.edges = std::move(edges_);
        return g;
    }

private:
    int add(OpNode n, const std::vector<int>& inputs)
    {
        n.id = static_cast<int>(nodes_.size());
        nodes_.push_back(n);
        for (int src : inputs)
            edges_.push_back({src, n.id});
        return n.id;
    }

    int width() { return static_cast<int>(rng_.uniform_int(band_.min_width, band_.max_width)); }

    int pick_kernel()
    {
        return cfg_.kernel_sizes[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(cfg_.kernel_sizes.size()) - 1))];
    }

    // Depthwise convs skip k=1 whenever a larger kernel is configured.
    int pick_spatial_kernel()
    {
        std::vector<int> spatial;
        for (int k : cfg_.kernel_sizes)
            if (k > 1)
                spatial.push_back(k);
        if (spatial.empty())
            return 1;
        return spatial[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(spatial.size()) - 1))];
    }

    bool take_downsample_forced()
    {
        if (downsamples_left_ == 0 || spatial_ < 2)
            return false;
        --downsamples_left_;
        spatial_ = (spatial_ + 1) / 2;
        return true;
    }

    int maybe_stride()
    {
        if (downsamples_left_ > 0 && spatial_ >= 2 && rng_.bernoulli(cfg_.stride2_prob))
            return take_downsample_forced() ? 2 : 1;
        return 1;
    }

    int conv(int kernel, int stride, int out, int input)
    {
        channels_ = out;
        return add({.op = OpType::Conv, .kernel = kernel, .stride = stride, .out_channels = out}, {input});
    }

    int activation(int input)
    {
        return add({.op = rng_.bernoulli(cfg_.relu6_prob) ? OpType::ReLU6 : OpType::ReLU}, {input});
    }

    int norm_act(int input, bool bn)
    {
        if (bn)
            input = add({.op = OpType::BatchNorm}, {input});
        return activation(input);
    }

    bool width_in_band() const { return channels_ >= band_.min_width && channels_ <= band_.max_width; }

    // Returns the number of nodes added.
    int add_block(int budget)
    {
        const bool bn = bn_allowed_ && rng_.bernoulli(cfg_.batchnorm_prob);
        const int b = bn ? 1 : 0;
        struct Candidate {
            OpType key;
            int size;
            double weight;
        };
        std::vector<Candidate> feasible;
        for (const auto& [op, w] : cfg_.op_weights) {
            int size = 0;
            switch (op) {
            case OpType::Conv: size = 2 + b; break;
            case OpType::DWConv: size = 4 + 2 * b; break;
            case OpType::Add: size = width_in_band() ? 3 + b : 0; break;
            case OpType::Concat: size = 3; break;
            case OpType::MaxPool:
            case OpType::AvgPool: size = 1; break;
            default: break;
            }
            if (size > 0 && size <= budget && w > 0.0)
                feasible.push_back({op, size, w});
        }
        if (feasible.empty()) {
            current_ = conv(pick_kernel(), 1, width(), current_);
            return 1;
        }
        double total = 0.0;
        for (const auto& c : feasible)
            total += c.weight;
        double r = rng_.uniform() * total;
        const Candidate* chosen = &feasible.back();
        for (const auto& c : feasible) {
            if (r < c.weight) {
                chosen = &c;
                break;
            }
            r -= c.weight;
        }

        const int start = static_cast<int>(nodes_.size());
        switch (chosen->key) {
        case OpType::Conv:
            current_ = conv(pick_kernel(), maybe_stride(), width(), current_);
            current_ = norm_act(current_, bn);
            break;
        case OpType::DWConv: {
            current_ = add({.op = OpType::DWConv, .kernel = pick_spatial_kernel(), .stride = maybe_stride(), .groups = 0}, {current_});
            current_ = norm_act(current_, bn);
            current_ = conv(1, 1, width(), current_);
            current_ = norm_act(current_, bn);
            break;
        }
        case OpType::Add: {
            const int skip = current_;
            int x = conv(pick_kernel(), 1, channels_, current_);
            x = norm_act(x, bn);
            current_ = add({.op = OpType::Add}, {skip, x});
            break;
        }
        case OpType::Concat: {
            const int stride = maybe_stride();
            const int c1 = width();
            const int c2 = width();
            const int a = add({.op = OpType::Conv, .kernel = 1, .stride = stride, .out_channels = c1}, {current_});
            const int bnode = add({.op = OpType::Conv, .kernel = pick_kernel(), .stride = stride, .out_channels = c2}, {current_});
            current_ = add({.op = OpType::Concat}, {a, bnode});
            channels_ = c1 + c2;
            break;
        }
        default: {
            current_ = add({.op = chosen->key, .kernel = 3, .stride = maybe_stride()}, {current_});
            break;
        }
        }
        return static_cast<int>(nodes_.size()) - start;
    }

    const GenConfig& cfg_;
    DepthWidth band_;
    bool bn_allowed_;
    Rng& rng_;
    int spatial_;
    int downsamples_left_;
    int current_ = 0;
    int channels_ = 0;
    std::vector<OpNode> nodes_;
    std::vector<Edge> edges_;
};

} // namespace

ArchGraph sample_graph(const GenConfig& cfg, Split split, Rng& rng)
{
    cfg.validate();
    GraphBuilder builder(cfg, split, rng);
    ArchGraph g = builder.build(split);
    validate(g);
    return g;
}

ArchGraph add_virtual_edges(ArchGraph g, int s_max)
{
    g.virtual_edges.clear();
    std::map<int, std::size_t> pos;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        pos[g.nodes[i].id] = i;
    std::vector<std::vector<std::size_t>> succ(g.nodes.size());
    for (const auto& e : g.edges)
        succ[pos.at(e.src)].push_back(pos.at(e.dst));

    for (std::size_t u = 0; u < g.nodes.size(); ++u) {
        std::vector<int> dist(g.nodes.size(), -1);
        std::deque<std::size_t> queue{u};
        dist[u] = 0;
        while (!queue.empty()) {
            const auto x = queue.front();
            queue.pop_front();
            if (dist[x] >= s_max)
                continue;
            for (auto y : succ[x])
                if (dist[y] < 0) {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
        }
        for (std::size_t v = 0; v < g.nodes.size(); ++v)
            if (dist[v] >= 2 && dist[v] <= s_max)
                g.virtual_edges.push_back({g.nodes[u].id, g.nodes[v].id, dist[v]});
    }
    return g;
}

std::vector<ArchGraph> generate_dataset(const GenConfig& cfg)
{
    cfg.validate();
    std::vector<ArchGraph> graphs;
    std::set<std::uint64_t> used;
    std::int64_t next_id = 0;
    for (Split split : kAllSplits) {
        const auto it = cfg.counts.find(split);
        const int n = it == cfg.counts.end() ? 0 : it->second;
        for (int i = 0; i < n; ++i) {
            std::uint64_t seed = mix_seed(cfg.seed, (static_cast<std::uint64_t>(split) << 32) | static_cast<std::uint64_t>(i));
            while (!used.insert(seed).second)
                seed = mix_seed(seed, 1);
            Rng rng(seed);
            ArchGraph g = add_virtual_edges(sample_graph(cfg, split, rng), cfg.s_max);
            g.graph_id = next_id++;
            g.seed = seed;
            graphs.push_back(std::move(g));
        }
    }
    return graphs;
}

std::vector<ArchGraph> select_split(const std::vector<ArchGraph>& graphs, Split split)
{
    std::vector<ArchGraph> out;
    for (const auto& g : graphs)
        if (g.split == split)
            out.push_back(g);
    return out;
}

// ---------------------------------------------------------------------------
// Shapes

ShapeMap infer_shapes(const ArchGraph& g, std::array<int, 3> input_chw)
{
    ShapeMap shapes;
    const auto spatial_out = [](const OpNode& n, std::int64_t size) {
        const std::int64_t pad = n.kernel / 2;
        const std::int64_t out = (size + 2 * pad - n.kernel) / n.stride + 1;
        if (out < 1)
            throw ShapeError(n.id, "spatial size collapses below 1");
        return out;
    };

    for (int id : topological_order(g)) {
        const OpNode& n = g.node(id);
        const auto ins = g.inputs(id);
        NodeShape s;
        const auto in_shape = [&](std::size_t i) -> const Shape& {
            if (i >= ins.size())
                throw ShapeError(id, "missing input");
            return shapes.at(ins[i]).out;
        };
        const auto feature_map = [&](std::size_t i) -> const Shape& {
            const Shape& x = in_shape(i);
            if (x.size() != 3)
                throw ShapeError(id, std::string(to_string(n.op)) + " expects a (C,H,W) input, got " + shape_str(x));
            return x;
        };

        switch (n.op) {
        case OpType::Input:
            s.out = {input_chw[0], input_chw[1], input_chw[2]};
            break;
        case OpType::Conv: {
            const auto& x = feature_map(0);
            s.out = {n.out_channels, spatial_out(n, x[1]), spatial_out(n, x[2])};
            s.params = {{n.out_channels, x[0], n.kernel, n.kernel}};
            break;
        }
        case OpType::DWConv: {
            const auto& x = feature_map(0);
            s.out = {x[0], spatial_out(n, x[1]), spatial_out(n, x[2])};
            s.params = {{x[0], 1, n.kernel, n.kernel}};
            break;
        }
        case OpType::BatchNorm: {
            const auto& x = feature_map(0);
            s.out = x;
            s.params = {{x[0]}, {x[0]}};
            break;
        }
        case OpType::ReLU:
        case OpType::ReLU6:
        case OpType::Output:
            s.out = in_shape(0);
            break;
        case OpType::MaxPool:
        case OpType::AvgPool: {
            const auto& x = feature_map(0);
            s.out = {x[0], spatial_out(n, x[1]), spatial_out(n, x[2])};
            break;
        }
        case OpType::GlobalAvgPool:
            s.out = {feature_map(0)[0], 1, 1};
            break;
        case OpType::Add: {
            s.out = in_shape(0);
            for (std::size_t i = 1; i < ins.size(); ++i)
                if (in_shape(i) != s.out)
                    throw ShapeError(id, "Add inputs disagree: " + shape_str(s.out) + " vs " + shape_str(in_shape(i)));
            break;
        }
        case OpType::Concat: {
            s.out = feature_map(0);
            for (std::size_t i = 1; i < ins.size(); ++i) {
                const auto& x = feature_map(i);
                if (x[1] != s.out[1] || x[2] != s.out[2])
                    throw ShapeError(id, "Concat inputs disagree spatially: " + shape_str(s.out) + " vs " + shape_str(x));
                s.out[0] += x[0];
            }
            break;
        }
        case OpType::Linear: {
            const auto features = numel(in_shape(0));
            s.out = {n.out_channels};
            s.params = {{n.out_channels, features}};
            break;
        }
        }
        shapes.emplace(id, std::move(s));
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using nlohmann::json;

json graph_to_json(const ArchGraph& g)
{
    json nodes = json::array();
    for (const auto& n : g.nodes)
        nodes.push_back({{"id", n.id}, {"op", to_string(n.op)}, {"k", n.kernel}, {"s", n.stride}, {"c", n.out_channels}, {"g", n.groups}});
    json edges = json::array();
    for (const auto& e : g.edges)
        edges.push_back({e.src, e.dst});
    json vedges = json::array();
    for (const auto& v : g.virtual_edges)
        vedges.push_back({v.src, v.dst, v.distance});
    return {{"graph_id", g.graph_id}, {"seed", g.seed}, {"split", to_string(g.split)},
            {"nodes", std::move(nodes)}, {"edges", std::move(edges)}, {"virtual_edges", std::move(vedges)}};
}

ArchGraph graph_from_json(const json& j)
{
    ArchGraph g;
    g.graph_id = j.at("graph_id").get<std::int64_t>();
    g.seed = j.at("seed").get<std::uint64_t>();
    g.split = parse_split(j.at("split").get<std::string>());
    for (const auto& n : j.at("nodes")) {
        OpNode node;
        node.id = n.at("id").get<int>();
        node.op = parse_op(n.at("op").get<std::string>());
        node.kernel = n.at("k").get<int>();
        node.stride = n.at("s").get<int>();
        node.out_channels = n.at("c").get<int>();
        node.groups = n.at("g").get<int>();
        g.nodes.push_back(node);
    }
    for (const auto& e : j.at("edges"))
        g.edges.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
    for (const auto& v : j.at("virtual_edges"))
        g.virtual_edges.push_back({v.at(0).get<int>(), v.at(1).get<int>(), v.at(2).get<int>()});
    return g;
}

} // namespace

std::string serialize_graph(const ArchGraph& g)
{
    return graph_to_json(g).dump();
}

std::uint64_t graph_checksum(const ArchGraph& g)
{
    return checksum_bytes(serialize_graph(g));
}

std::string serialize_dataset(const std::vector<ArchGraph>& graphs)
{
    std::string out = json{{"format", "ghnq-graphs"}, {"version", kGraphFormatVersion}, {"count", graphs.size()}}.dump();
    out += "\n";
    for (const auto& g : graphs) {
        out += serialize_graph(g);
        out += "\n";
    }
    return out;
}

std::vector<ArchGraph> deserialize_dataset(std::string_view text)
{
    std::vector<ArchGraph> graphs;
    if (text.empty())
        return graphs;

    std::size_t line_no = 0;
    std::size_t expected = 0;
    bool have_header = false;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos)
            end = text.size();
        const std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.empty())
            continue;
        const std::string where = "line " + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(where + (have_header ? " (graph record " + std::to_string(graphs.size()) + ")" : "") + ": malformed record: " + e.what());
        }
        if (!have_header) {
            if (!j.is_object() || j.value("format", "") != "ghnq-graphs")
                throw FormatError(where + ": missing ghnq-graphs header");
            if (j.value("version", -1) != kGraphFormatVersion)
                throw FormatError(where + ": unsupported graph format version " + j.value("version", json(-1)).dump());
            expected = j.at("count").get<std::size_t>();
            have_header = true;
            continue;
        }
        try {
            graphs.push_back(graph_from_json(j));
            validate(graphs.back());
        } catch (const json::exception& e) {
            throw FormatError(where + " (graph record " + std::to_string(graphs.size()) + "): " + e.what());
        } catch (const Error& e) {
            throw FormatError(where + " (graph record " + std::to_string(graphs.size()) + "): " + e.what());
        }
    }
    if (!have_header)
        return graphs;
    if (graphs.size() != expected)
        throw FormatError("truncated dataset: header declares " + std::to_string(expected) + " graphs but found " +
                          std::to_string(graphs.size()) + " (record " + std::to_string(graphs.size()) + " missing)");
    return graphs;
}

void write_dataset(const std::string& path, const std::vector<ArchGraph>& graphs)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot open " + path + " for writing");
    out << serialize_dataset(graphs);
    if (!out)
        throw Error("failed writing " + path);
}

std::vector<ArchGraph> read_dataset(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open graph dataset " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return deserialize_dataset(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

} // namespace ghnq

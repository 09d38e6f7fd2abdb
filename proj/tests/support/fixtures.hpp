#pragma once

#include "ghnq/archspace.hpp"

#include <initializer_list>
#include <utility>

namespace ghnq::testing {

// Builds a graph from (op node, input ids) pairs; ids are list positions.
class GraphSketch {
public:
    int add(OpNode n, std::initializer_list<int> inputs = {})
    {
        n.id = static_cast<int>(g_.nodes.size());
        g_.nodes.push_back(n);
        for (int src : inputs)
            g_.edges.push_back({src, n.id});
        return n.id;
    }

    ArchGraph done(Split split = Split::Train) &&
    {
        g_.split = split;
        return std::move(g_);
    }

private:
    ArchGraph g_;
};

inline OpNode conv(int out, int k = 3, int s = 1) { return {.op = OpType::Conv, .kernel = k, .stride = s, .out_channels = out}; }
inline OpNode dwconv(int k = 3, int s = 1) { return {.op = OpType::DWConv, .kernel = k, .stride = s, .groups = 0}; }
inline OpNode linear(int classes) { return {.op = OpType::Linear, .out_channels = classes}; }
inline OpNode op(OpType t) { return {.op = t}; }
inline OpNode pool(OpType t, int k = 3, int s = 2) { return {.op = t, .kernel = k, .stride = s}; }

// Input -> ReLU x (n - 2) -> Output; only used for graph-structure tests.
inline ArchGraph relu_chain(int n)
{
    GraphSketch s;
    int cur = s.add(op(OpType::Input));
    for (int i = 0; i < n - 2; ++i)
        cur = s.add(op(OpType::ReLU), {cur});
    s.add(op(OpType::Output), {cur});
    return std::move(s).done();
}

// A small network touching every op type.
inline ArchGraph kitchen_sink(int classes = 4, bool with_bn = true)
{
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    int x = s.add(conv(6, 3, 2), {in});
    if (with_bn)
        x = s.add(op(OpType::BatchNorm), {x});
    x = s.add(op(OpType::ReLU), {x});
    const int a = s.add(conv(4, 1), {x});
    const int b = s.add(dwconv(3), {x});
    const int b2 = s.add(conv(4, 1), {b});
    const int sum = s.add(op(OpType::Add), {a, b2});
    const int r6 = s.add(op(OpType::ReLU6), {sum});
    const int mp = s.add(pool(OpType::MaxPool, 3, 2), {r6});
    const int ap = s.add(pool(OpType::AvgPool, 3, 2), {r6});
    const int cat = s.add(op(OpType::Concat), {mp, ap});
    const int gap = s.add(op(OpType::GlobalAvgPool), {cat});
    const int fc = s.add(linear(classes), {gap});
    s.add(op(OpType::Output), {fc});
    return std::move(s).done(with_bn ? Split::Train : Split::OODBNFree);
}

inline GenConfig small_gen_config(std::uint64_t seed = 1)
{
    GenConfig cfg;
    cfg.train_min_nodes = 6;
    cfg.train_max_nodes = 10;
    cfg.train_min_width = 2;
    cfg.train_max_width = 6;
    cfg.deep_min_nodes = 12;
    cfg.deep_max_nodes = 16;
    cfg.wide_min_width = 8;
    cfg.wide_max_width = 10;
    cfg.stem_stride = 2;
    cfg.max_downsamples = 3;
    cfg.num_classes = 4;
    cfg.input_chw = {3, 16, 16};
    cfg.counts = {{Split::Train, 20}, {Split::IDTest, 5}, {Split::OODDeep, 5}, {Split::OODWide, 5}, {Split::OODBNFree, 5}};
    cfg.seed = seed;
    return cfg;
}

} // namespace ghnq::testing

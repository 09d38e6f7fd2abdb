#include "ghnq/archspace.hpp"
#include "ghnq/error.hpp"

#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <set>
#include <tuple>

using namespace ghnq;
using namespace ghnq::testing;

namespace {

// All-pairs shortest paths by Floyd-Warshall over the real edges.
std::set<std::tuple<int, int, int>> virtual_edge_oracle(const ArchGraph& g, int s_max)
{
    const std::size_t n = g.nodes.size();
    constexpr int inf = std::numeric_limits<int>::max() / 4;
    std::vector<std::vector<int>> d(n, std::vector<int>(n, inf));
    for (std::size_t i = 0; i < n; ++i)
        d[i][i] = 0;
    for (const auto& e : g.edges)
        d[g.index_of(e.src)][g.index_of(e.dst)] = 1;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
    std::set<std::tuple<int, int, int>> out;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (d[i][j] >= 2 && d[i][j] <= s_max)
                out.emplace(g.nodes[i].id, g.nodes[j].id, d[i][j]);
    return out;
}

std::set<std::tuple<int, int, int>> as_set(const ArchGraph& g)
{
    std::set<std::tuple<int, int, int>> out;
    for (const auto& v : g.virtual_edges)
        out.emplace(v.src, v.dst, v.distance);
    return out;
}

int max_conv_width(const ArchGraph& g)
{
    int w = 0;
    for (const auto& n : g.nodes)
        if (n.op == OpType::Conv)
            w = std::max(w, n.out_channels);
    return w;
}

int min_conv_width(const ArchGraph& g)
{
    int w = std::numeric_limits<int>::max();
    for (const auto& n : g.nodes)
        if (n.op == OpType::Conv)
            w = std::min(w, n.out_channels);
    return w;
}

} // namespace

TEST(SampleGraph, DeterministicForSeed)
{
    const GenConfig cfg;
    for (Split split : kAllSplits) {
        Rng a(42), b(42);
        EXPECT_EQ(serialize_graph(sample_graph(cfg, split, a)), serialize_graph(sample_graph(cfg, split, b)));
    }
}

TEST(SampleGraph, BnFreeHasNoBatchNorm)
{
    const GenConfig cfg;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        EXPECT_EQ(sample_graph(cfg, Split::OODBNFree, rng).count(OpType::BatchNorm), 0u);
    }
}

TEST(SampleGraph, RespectsDepthAndWidthBands)
{
    const GenConfig cfg;
    std::size_t min_deep = std::numeric_limits<std::size_t>::max();
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        min_deep = std::min(min_deep, sample_graph(cfg, Split::OODDeep, rng).nodes.size());
    }
    EXPECT_GT(min_deep, static_cast<std::size_t>(cfg.train_max_nodes));

    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        Rng r1(seed), r2(seed);
        const auto train = sample_graph(cfg, Split::Train, r1);
        EXPECT_GE(train.nodes.size(), static_cast<std::size_t>(cfg.train_min_nodes));
        EXPECT_LE(train.nodes.size(), static_cast<std::size_t>(cfg.train_max_nodes));
        EXPECT_LE(max_conv_width(train), cfg.train_max_width);
        const auto wide = sample_graph(cfg, Split::OODWide, r2);
        EXPECT_GE(min_conv_width(wide), cfg.wide_min_width);
        EXPECT_GT(min_conv_width(wide), cfg.train_max_width);
    }
}

TEST(SampleGraph, EverySampleHasValidShapes)
{
    const GenConfig cfg;
    for (Split split : kAllSplits)
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            Rng rng(seed);
            const auto g = sample_graph(cfg, split, rng);
            ASSERT_NO_THROW(validate(g));
            const auto shapes = infer_shapes(g, {3, 32, 32});
            EXPECT_EQ(shapes.at(g.output_id()).out, (Shape{cfg.num_classes}));
        }
}

TEST(SampleGraph, UnsatisfiableConfigIsRejected)
{
    GenConfig cfg;
    cfg.train_min_nodes = 12;
    cfg.train_max_nodes = 8;
    Rng rng(0);
    EXPECT_THROW(sample_graph(cfg, Split::Train, rng), ConfigError);

    GenConfig overlap;
    overlap.deep_min_nodes = overlap.train_max_nodes;
    EXPECT_THROW(overlap.validate(), ConfigError);

    GenConfig weights;
    weights.op_weights[OpType::Conv] = 0.9;
    EXPECT_THROW(weights.validate(), ConfigError);
}

TEST(VirtualEdges, ChainOfThree)
{
    const auto g = add_virtual_edges(relu_chain(3), 10);
    ASSERT_EQ(g.virtual_edges.size(), 1u);
    EXPECT_EQ(g.virtual_edges[0], (VirtualEdge{0, 2, 2}));
}

TEST(VirtualEdges, ChainOfTwelveStopsAtSMax)
{
    const auto g = add_virtual_edges(relu_chain(12), 10);
    for (const auto& v : g.virtual_edges) {
        EXPECT_FALSE(v.src == 0 && v.dst == 11);
        EXPECT_LE(v.distance, 10);
    }
    EXPECT_EQ(as_set(g), virtual_edge_oracle(g, 10));
}

TEST(VirtualEdges, SingleEdgeHasNone)
{
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    s.add(op(OpType::Output), {in});
    EXPECT_TRUE(add_virtual_edges(std::move(s).done(), 10).virtual_edges.empty());
}

TEST(VirtualEdges, MatchFloydWarshallOnRandomGraphs)
{
    const GenConfig cfg;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const Split split = kAllSplits[seed % kAllSplits.size()];
        const auto g = add_virtual_edges(sample_graph(cfg, split, rng), cfg.s_max);
        EXPECT_EQ(as_set(g), virtual_edge_oracle(g, cfg.s_max)) << seed;
        ASSERT_NO_THROW(validate(g));
    }
}

TEST(InferShapes, ConvArithmetic)
{
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    const int c = s.add(conv(16, 3, 1), {in});
    const int gap = s.add(op(OpType::GlobalAvgPool), {c});
    const int fc = s.add(linear(10), {gap});
    s.add(op(OpType::Output), {fc});
    const auto g = std::move(s).done();
    const auto shapes = infer_shapes(g, {3, 32, 32});
    EXPECT_EQ(shapes.at(c).out, (Shape{16, 32, 32}));
    EXPECT_EQ(shapes.at(c).params.at(0), (Shape{16, 3, 3, 3}));
    EXPECT_EQ(shapes.at(gap).out, (Shape{16, 1, 1}));
    EXPECT_EQ(shapes.at(fc).params.at(0), (Shape{10, 16}));
}

TEST(InferShapes, KitchenSink)
{
    const auto g = kitchen_sink(4);
    const auto shapes = infer_shapes(g, {3, 16, 16});
    EXPECT_EQ(shapes.at(1).out, (Shape{6, 8, 8}));      // strided conv
    EXPECT_EQ(shapes.at(5).params.at(0), (Shape{6, 1, 3, 3})); // depthwise
    EXPECT_EQ(shapes.at(2).params.size(), 2u);           // BN gain + bias
    EXPECT_EQ(shapes.at(11).out, (Shape{8, 4, 4}));       // concat of two pools
}

TEST(InferShapes, AddMismatchNamesNode)
{
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    const int a = s.add(conv(16), {in});
    const int b = s.add(conv(8), {in});
    const int add = s.add(op(OpType::Add), {a, b});
    const int gap = s.add(op(OpType::GlobalAvgPool), {add});
    const int fc = s.add(linear(10), {gap});
    s.add(op(OpType::Output), {fc});
    const auto g = std::move(s).done();
    try {
        infer_shapes(g, {3, 32, 32});
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.node_id(), add);
    }
}

TEST(Validate, RejectsBrokenGraphs)
{
    auto g = relu_chain(4);
    g.edges.push_back({3, 1});
    EXPECT_THROW(validate(g), GraphError);

    auto two_inputs = relu_chain(4);
    two_inputs.nodes[1].op = OpType::Input;
    EXPECT_THROW(validate(two_inputs), GraphError);

    auto bn = kitchen_sink(4, true);
    bn.split = Split::OODBNFree;
    EXPECT_THROW(validate(bn), GraphError);

    auto dangling = relu_chain(4);
    dangling.nodes.insert(dangling.nodes.end() - 1, OpNode{.id = 99, .op = OpType::ReLU});
    dangling.edges.push_back({0, 99});
    EXPECT_THROW(validate(dangling), GraphError);
}

TEST(TopologicalOrder, IndependentOfListPositions)
{
    const auto g = kitchen_sink();
    const auto order = topological_order(g);
    std::map<int, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i)
        pos[order[i]] = i;
    for (const auto& e : g.edges)
        EXPECT_LT(pos[e.src], pos[e.dst]);
}

TEST(Dataset, GenerationIsDeterministicWithUniqueSeeds)
{
    const auto cfg = small_gen_config(9);
    const auto a = generate_dataset(cfg);
    const auto b = generate_dataset(cfg);
    EXPECT_EQ(serialize_dataset(a), serialize_dataset(b));
    std::set<std::uint64_t> seeds;
    for (const auto& g : a) {
        EXPECT_TRUE(seeds.insert(g.seed).second);
        for (const auto& v : g.virtual_edges) {
            EXPECT_GE(v.distance, 2);
            EXPECT_LE(v.distance, cfg.s_max);
        }
    }
    EXPECT_EQ(a.size(), 40u);
    EXPECT_EQ(select_split(a, Split::OODWide).size(), 5u);
}

TEST(Dataset, RoundTrip)
{
    const auto graphs = generate_dataset(small_gen_config(3));
    const auto text = serialize_dataset(graphs);
    EXPECT_EQ(deserialize_dataset(text), graphs);
    EXPECT_TRUE(deserialize_dataset(serialize_dataset({})).empty());
    EXPECT_TRUE(deserialize_dataset("").empty());
}

TEST(Dataset, TruncatedStreamNamesRecord)
{
    const auto graphs = generate_dataset(small_gen_config(3));
    const auto text = serialize_dataset(graphs);
    // Drop the last record entirely.
    const auto cut = text.rfind('\n', text.size() - 2);
    try {
        deserialize_dataset(text.substr(0, cut + 1));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("record 39"), std::string::npos) << e.what();
    }
    // Cut mid-record.
    try {
        deserialize_dataset(text.substr(0, text.size() - 20));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("line 41"), std::string::npos) << e.what();
    }
}

TEST(Dataset, RejectsVersionMismatchAndBadRecords)
{
    EXPECT_THROW(deserialize_dataset("{\"format\":\"ghnq-graphs\",\"version\":7,\"count\":0}\n"), FormatError);
    EXPECT_THROW(deserialize_dataset("{\"format\":\"other\"}\n"), FormatError);
    auto g = relu_chain(3);
    auto text = serialize_dataset({g});
    const auto pos = text.find("ReLU");
    text.replace(pos, 4, "Relu");
    try {
        deserialize_dataset(text);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(GenConfigJson, RoundTripAndUnknownKey)
{
    const auto cfg = small_gen_config(5);
    const auto back = parse_gen_config(gen_config_to_json(cfg));
    EXPECT_EQ(gen_config_to_json(back), gen_config_to_json(cfg));
    EXPECT_THROW(parse_gen_config("{\"depth\": 3}"), ConfigError);
}

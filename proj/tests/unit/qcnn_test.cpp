#include "ghnq/error.hpp"
#include "ghnq/qcnn.hpp"
#include "support/fixtures.hpp"
#include "support/fd_scenarios.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace ghnq;
using namespace ghnq::testing;

namespace {

const QuantScheme kFloat{8, 8, QuantMode::None};

} // namespace

TEST(Qcnn, IdentityNetworkGivesChannelMeans)
{
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    const int c = s.add(conv(3, 1), {in});
    const int gap = s.add(op(OpType::GlobalAvgPool), {c});
    const int fc = s.add(linear(3), {gap});
    s.add(op(OpType::Output), {fc});
    const ArchGraph g = std::move(s).done();

    ParamSet p;
    Tensor eye4({3, 3, 1, 1}, 0.0), eye2({3, 3}, 0.0);
    for (int i = 0; i < 3; ++i)
        eye4[i * 3 + i] = eye2[i * 3 + i] = 1.0;
    p.tensors[c] = {eye4};
    p.tensors[fc] = {eye2};

    Rng rng(3);
    const Tensor x = random_batch(2, {3, 4, 4}, rng);
    const Tensor logits = forward_cnn(g, p, x, kFloat);
    ASSERT_EQ(logits.shape, (Shape{2, 3}));
    for (int n = 0; n < 2; ++n)
        for (int ch = 0; ch < 3; ++ch) {
            double m = 0;
            for (int i = 0; i < 16; ++i)
                m += x.data[(n * 3 + ch) * 16 + i];
            EXPECT_NEAR(logits[n * 3 + ch], m / 16, 1e-12);
        }
}

TEST(Qcnn, QuantizationPointPlacement)
{
    const ArchGraph g = kitchen_sink();
    // in0 conv1 bn2 relu3 a4 dw5 b2_6 add7 relu6_8 mp9 ap10 concat11 gap12 fc13 out14
    std::vector<int> quantized;
    for (const auto& n : g.nodes)
        if (quantizes_output(g, n.id))
            quantized.push_back(n.id);
    EXPECT_EQ(quantized, (std::vector<int>{3, 4, 5, 6, 8, 9, 10, 11, 12}));
}

TEST(Qcnn, EightBitTracksFloat)
{
    // Measured over these 20 graphs: max |logit diff| 0.055 with unit
    // normal inputs and He-normal weights; 0.1 leaves headroom.
    double worst = 0.0;
    Rng rng(11);
    for (const auto& g : small_graphs(20, 10, 5)) {
        const ShapeMap shapes = infer_shapes(g, {3, 16, 16});
        const ParamSet p = random_params(g, shapes, rng);
        const Tensor x = random_batch(8, {3, 16, 16}, rng);
        const Tensor a = forward_cnn(g, p, x, kFloat);
        const Tensor b = forward_cnn(g, p, x, QuantScheme{8, 8, QuantMode::SimQuant});
        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    RecordProperty("max_w8a8_divergence", std::to_string(worst));
    EXPECT_LT(worst, 0.1);
    EXPECT_GT(worst, 0.0);
}

TEST(Qcnn, TwoBitActivationsHaveAtMostFourValues)
{
    Rng rng(12);
    const ArchGraph g = kitchen_sink();
    const ShapeMap shapes = infer_shapes(g, {3, 16, 16});
    const ParamSet p = random_params(g, shapes, rng);
    ForwardOptions opts;
    int checked = 0;
    opts.trace = [&](int id, const Tensor& v) {
        if (!quantizes_output(g, id))
            return;
        std::set<double> distinct(v.data.begin(), v.data.end());
        EXPECT_LE(distinct.size(), 4u) << "node " << id;
        ++checked;
    };
    forward_cnn(g, p, random_batch(4, {3, 16, 16}, rng), QuantScheme{2, 2, QuantMode::SimQuant}, opts);
    EXPECT_EQ(checked, 9);
}

TEST(Qcnn, UniformLogitsGiveLogTenLoss)
{
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    const int gap = s.add(op(OpType::GlobalAvgPool), {in});
    const int fc = s.add(linear(10), {gap});
    s.add(op(OpType::Output), {fc});
    const ArchGraph g = std::move(s).done();
    ParamSet p;
    p.tensors[fc] = {Tensor({10, 3}, 0.0)};
    Rng rng(1);
    const std::vector<int> labels{0, 3, 9, 5};
    const LossGrad lg = loss_and_grad(g, p, random_batch(4, {3, 8, 8}, rng), labels, kFloat);
    EXPECT_NEAR(lg.loss, 2.302585, 1e-6);
}

TEST(Qcnn, FloatGradientsMatchFiniteDifferences)
{
    const FdSummary r = cnn_fd_check(20, 8, 21, 5);
    EXPECT_LE(r.max_nodes, 8u);
    EXPECT_EQ(r.checked, 100);
    for (const auto& f : r.failures)
        ADD_FAILURE() << f;
    EXPECT_LT(r.max_rel_error, 1e-3);
    RecordProperty("max_rel_error", std::to_string(r.max_rel_error));
    RecordProperty("redrawn", r.redrawn);
}

TEST(Qcnn, SaturatedWeightGetsNoGradient)
{
    // Under per-tensor calibration only the range endpoints can saturate: at
    // 2 bits the weights {-0.2, ..., 1.0} give zero point 1 and 1.0 rounds
    // half-away to code 4, which is clamped to 3.
    GraphSketch s;
    const int in = s.add(op(OpType::Input));
    const int c = s.add(conv(2, 1), {in});
    const int gap = s.add(op(OpType::GlobalAvgPool), {c});
    const int fc = s.add(linear(2), {gap});
    s.add(op(OpType::Output), {fc});
    const ArchGraph g = std::move(s).done();
    ParamSet p;
    p.tensors[c] = {Tensor({2, 3, 1, 1}, std::vector<double>{-0.2, 0.3, 1.0, 0.1, 0.5, -0.1})};
    p.tensors[fc] = {Tensor({2, 2}, std::vector<double>{1.0, -0.5, 0.25, 0.75})};
    Rng rng(4);
    const std::vector<int> labels{0, 1};
    const LossGrad lg = loss_and_grad(g, p, random_batch(2, {3, 4, 4}, rng), labels, QuantScheme{2, 8, QuantMode::SimQuant});
    const Tensor& gw = lg.grad.at(c)[0];
    EXPECT_EQ(gw[2], 0.0);
    for (std::size_t i : {0u, 1u, 3u, 4u, 5u})
        EXPECT_NE(gw[i], 0.0) << i;
}

TEST(Qcnn, ActBitsIrrelevantInFloatMode)
{
    Rng rng(5);
    const ArchGraph g = kitchen_sink();
    const ParamSet p = random_params(g, infer_shapes(g, {3, 16, 16}), rng);
    const Tensor x = random_batch(4, {3, 16, 16}, rng);
    const std::vector<int> labels{0, 1, 2, 3};
    const LossGrad a = loss_and_grad(g, p, x, labels, QuantScheme{4, 2, QuantMode::None});
    const LossGrad b = loss_and_grad(g, p, x, labels, QuantScheme{4, 8, QuantMode::None});
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grad, b.grad);
}

TEST(Qcnn, DeterministicGivenSeeds)
{
    const ArchGraph g = kitchen_sink();
    const ShapeMap shapes = infer_shapes(g, {3, 16, 16});
    Rng r1(9), r2(9);
    const ParamSet a = random_params(g, shapes, r1);
    const ParamSet b = random_params(g, shapes, r2);
    EXPECT_EQ(checksum(a), checksum(b));
    Rng rx(2);
    const Tensor x = random_batch(4, {3, 16, 16}, rx);
    ForwardOptions o;
    o.noise_seed = 77;
    const QuantScheme noisy{4, 4, QuantMode::NoiseQuant};
    EXPECT_EQ(forward_cnn(g, a, x, noisy, o), forward_cnn(g, b, x, noisy, o));
    o.noise_seed = 78;
    EXPECT_NE(forward_cnn(g, a, x, noisy, ForwardOptions{.noise_seed = 77}), forward_cnn(g, a, x, noisy, o));
}

TEST(Qcnn, NonFiniteValuesNameTheNode)
{
    const ArchGraph g = kitchen_sink();
    const ShapeMap shapes = infer_shapes(g, {3, 16, 16});
    Rng rng(6);
    ParamSet p = random_params(g, shapes, rng);
    const Tensor x = random_batch(2, {3, 16, 16}, rng);
    p.tensors[2][0][1] = std::nan("");
    try {
        forward_cnn(g, p, x, kFloat);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_EQ(e.node_id(), 2);
    }
    p = random_params(g, shapes, rng);
    p.tensors[1][0][0] = 1e308;
    p.tensors[1][0][1] = 1e308;
    try {
        forward_cnn(g, p, x, kFloat);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_EQ(e.node_id(), 1);
    }
}

TEST(Qcnn, ParamSetValidation)
{
    const ArchGraph g = kitchen_sink();
    const ShapeMap shapes = infer_shapes(g, {3, 16, 16});
    Rng rng(7);
    const ParamSet good = random_params(g, shapes, rng);
    EXPECT_NO_THROW(validate_params(g, shapes, good));

    ParamSet missing = good;
    missing.tensors.erase(5);
    ParamSet orphan = good;
    orphan.tensors[3] = {Tensor({1}, 0.0)};
    ParamSet misshapen = good;
    misshapen.tensors[1][0] = Tensor({6, 3, 1, 1}, 0.0);
    for (const ParamSet* bad : {&missing, &orphan, &misshapen}) {
        EXPECT_THROW(validate_params(g, shapes, *bad), ShapeError);
        Rng rx(1);
        EXPECT_THROW(forward_cnn(g, *bad, random_batch(1, {3, 16, 16}, rx), kFloat), ShapeError);
    }
}

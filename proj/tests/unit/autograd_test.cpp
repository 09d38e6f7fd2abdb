#include "ghnq/autograd.hpp"
#include "ghnq/error.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ghnq;
using ghnq::testing::check_gradients;

namespace {

Tensor randn(Shape s, Rng& rng, double sd = 1.0)
{
    Tensor t(std::move(s));
    for (auto& v : t.data)
        v = sd * rng.normal();
    return t;
}

// Scalar probe <y, r> for a fixed random r, so every output coordinate matters.
ag::Var probe(ag::Tape& t, ag::Var y, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor r = randn(t.value(y).shape, rng);
    return ag::sum(t, ag::mul(t, y, t.constant(std::move(r))));
}

// Direct definition: y[n,o,i,j] = sum over the group's channels and the
// kernel window of w * x, zero outside the image.
Tensor conv_reference(const Tensor& x, const Tensor& w, int s, int p, int groups)
{
    const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto O = w.dim(0), Cg = w.dim(1), K = w.dim(2);
    const auto Ho = (H + 2 * p - K) / s + 1, Wo = (W + 2 * p - K) / s + 1;
    const auto Og = O / groups;
    Tensor y({N, O, Ho, Wo}, 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t i = 0; i < Ho; ++i)
                for (std::int64_t j = 0; j < Wo; ++j) {
                    double acc = 0;
                    for (std::int64_t c = 0; c < Cg; ++c)
                        for (std::int64_t a = 0; a < K; ++a)
                            for (std::int64_t b = 0; b < K; ++b) {
                                const auto h = i * s - p + a, ww = j * s - p + b;
                                if (h < 0 || h >= H || ww < 0 || ww >= W)
                                    continue;
                                const auto ic = (o / Og) * Cg + c;
                                acc += w.data[((o * Cg + c) * K + a) * K + b] * x.data[((n * C + ic) * H + h) * W + ww];
                            }
                    y.data[((n * O + o) * Ho + i) * Wo + j] = acc;
                }
    return y;
}

} // namespace

TEST(Autograd, ElementwiseGradients)
{
    Rng rng(1);
    auto r = check_gradients({randn({7}, rng), randn({7}, rng)}, [](ag::Tape& t, const std::vector<ag::Var>& v) {
        auto a = ag::sigmoid(t, ag::mul(t, v[0], v[1]));
        auto b = ag::tanh(t, ag::sub(t, v[0], ag::scale(t, v[1], 0.5)));
        std::vector<ag::Var> terms{a, b, ag::add(t, a, b)};
        std::vector<double> w{0.3, -1.2, 0.7};
        return probe(t, ag::weighted_sum(t, terms, w), 5);
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
    EXPECT_EQ(r.checked, 14u);
}

TEST(Autograd, DenseGradients)
{
    Rng rng(2);
    auto r = check_gradients({randn({5, 4}, rng), randn({4}, rng), randn({5}, rng)}, [](ag::Tape& t, const std::vector<ag::Var>& v) {
        auto h = ag::affine(t, v[0], v[1], v[2]);
        auto s = ag::slice(t, h, 1, 3);
        return probe(t, ag::rms_normalize(t, ag::mean_shift(t, s, 0.25), 1.7), 9);
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, GatherAndRowAccumulate)
{
    Rng rng(3);
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0});
    auto r = check_gradients({randn({2, 3}, rng)}, [idx](ag::Tape& t, const std::vector<ag::Var>& v) {
        auto g = ag::gather(t, ag::row(t, v[0], 1), idx, Shape{7});
        return probe(t, g, 4);
    });
    EXPECT_LT(r.max_rel_error, 1e-6);

    ag::Tape t;
    Tensor x({3}, std::vector<double>{1, 2, 3});
    auto p = t.parameter(x);
    auto s = ag::sum(t, ag::gather(t, p, idx, Shape{7}));
    t.backward(s);
    EXPECT_EQ(t.grad(p).data, (std::vector<double>{3, 2, 2}));
}

TEST(Autograd, AffineRowsMatchesAffineThenGather)
{
    Rng rng(10);
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{4, 0, 4, 2, 1, 1});
    const std::vector<Tensor> leaves{randn({5, 3}, rng), randn({3}, rng), randn({5}, rng)};
    ag::Tape t;
    auto w = t.parameter(leaves[0]), x = t.parameter(leaves[1]), b = t.parameter(leaves[2]);
    const Tensor fused = t.value(ag::affine_rows(t, w, x, b, idx, Shape{2, 3}));
    const Tensor ref = t.value(ag::gather(t, ag::affine(t, w, x, b), idx, Shape{2, 3}));
    ASSERT_EQ(fused.shape, ref.shape);
    for (std::size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(fused[i], ref[i], 1e-14);

    auto r = check_gradients(leaves, [idx](ag::Tape& t, const std::vector<ag::Var>& v) {
        return probe(t, ag::affine_rows(t, v[0], v[1], v[2], idx, Shape{6}), 6);
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, Conv2dMatchesReference)
{
    Rng rng(4);
    struct Case { int c, o, k, s, groups, hw; };
    for (Case cs : {Case{3, 5, 3, 1, 1, 6}, Case{3, 4, 3, 2, 1, 7}, Case{4, 4, 3, 2, 4, 5}, Case{2, 6, 1, 1, 2, 4}, Case{3, 2, 5, 2, 1, 3}}) {
        const Tensor x = randn({2, cs.c, cs.hw, cs.hw}, rng);
        const Tensor w = randn({cs.o, cs.c / cs.groups, cs.k, cs.k}, rng);
        ag::Tape t;
        auto y = ag::conv2d(t, t.parameter(x), t.parameter(w), cs.s, cs.k / 2, cs.groups);
        const Tensor ref = conv_reference(x, w, cs.s, cs.k / 2, cs.groups);
        ASSERT_EQ(t.value(y).shape, ref.shape);
        for (std::size_t i = 0; i < ref.size(); ++i)
            EXPECT_NEAR(t.value(y)[i], ref[i], 1e-12);
    }
}

TEST(Autograd, Conv2dGradients)
{
    Rng rng(5);
    for (int groups : {1, 3}) {
        for (int stride : {1, 2}) {
            auto r = check_gradients({randn({2, 3, 5, 5}, rng), randn({3, 3 / groups, 3, 3}, rng)},
                                     [=](ag::Tape& t, const std::vector<ag::Var>& v) {
                                         return probe(t, ag::conv2d(t, v[0], v[1], stride, 1, groups), 11);
                                     });
            EXPECT_LT(r.max_rel_error, 1e-6) << groups << " " << stride;
        }
    }
}

TEST(Autograd, BatchNormGradients)
{
    Rng rng(6);
    auto r = check_gradients({randn({3, 2, 3, 3}, rng), randn({2}, rng), randn({2}, rng)}, [](ag::Tape& t, const std::vector<ag::Var>& v) {
        return probe(t, ag::batch_norm(t, v[0], v[1], v[2]), 13);
    });
    EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Autograd, BatchNormNormalises)
{
    Rng rng(7);
    Tensor x = randn({4, 2, 3, 3}, rng, 3.0);
    Tensor g({2}, 1.0), b({2}, 0.0);
    ag::Tape t;
    const Tensor& y = t.value(ag::batch_norm(t, t.parameter(x), t.parameter(g), t.parameter(b)));
    for (int c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 9; ++i)
                m += y.data[(n * 2 + c) * 9 + i];
        m /= 36;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 9; ++i)
                v += std::pow(y.data[(n * 2 + c) * 9 + i] - m, 2);
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v / 36, 1.0, 1e-3);
    }
}

TEST(Autograd, PoolingGradients)
{
    Rng rng(8);
    auto r = check_gradients({randn({2, 2, 5, 5}, rng)}, [](ag::Tape& t, const std::vector<ag::Var>& v) {
        auto a = ag::max_pool2d(t, v[0], 3, 2, 1);
        auto b = ag::avg_pool2d(t, v[0], 3, 2, 1);
        auto c = ag::global_avg_pool(t, v[0]);
        return ag::add(t, ag::add(t, probe(t, a, 1), probe(t, b, 2)), probe(t, c, 3));
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, AvgPoolExcludesPadding)
{
    Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    ag::Tape t;
    const Tensor& y = t.value(ag::avg_pool2d(t, t.parameter(x), 3, 1, 1));
    EXPECT_EQ(y.data, (std::vector<double>{2.5, 2.5, 2.5, 2.5}));
}

TEST(Autograd, ConcatLinearCrossEntropyGradients)
{
    Rng rng(9);
    auto r = check_gradients({randn({2, 2, 3, 3}, rng), randn({2, 1, 3, 3}, rng), randn({4, 27}, rng, 0.3)},
                             [](ag::Tape& t, const std::vector<ag::Var>& v) {
                                 std::vector<ag::Var> xs{v[0], v[1]};
                                 auto logits = ag::linear(t, ag::relu6(t, ag::concat_channels(t, xs)), v[2]);
                                 std::vector<int> labels{3, 1};
                                 return ag::cross_entropy(t, logits, labels);
                             });
    EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Autograd, CrossEntropyOfUniformLogits)
{
    ag::Tape t;
    Tensor z({3, 10}, 0.0);
    std::vector<int> labels{0, 4, 9};
    EXPECT_NEAR(t.value(ag::cross_entropy(t, t.constant(z), labels))[0], std::log(10.0), 1e-12);
    EXPECT_THROW(ag::cross_entropy(t, t.constant(z), std::vector<int>{0, 10, 1}), Error);
}

TEST(Autograd, FakeQuantPassesGradientThroughMask)
{
    // 2 bits on {-0.2, 0.3, 1.0}: 1.0 lands exactly on a rounding tie and
    // saturates, so its gradient is cut.
    Tensor x({3}, std::vector<double>{-0.2, 0.3, 1.0});
    ag::Tape t;
    auto p = t.parameter(x);
    auto y = ag::fake_quant(t, p, 2);
    t.backward(ag::sum(t, y));
    EXPECT_EQ(t.grad(p).data, (std::vector<double>{1, 1, 0}));

    Rng rng(1);
    ag::Tape t2;
    auto p2 = t2.parameter(x);
    t2.backward(ag::sum(t2, ag::noise_quant(t2, p2, 2, rng)));
    EXPECT_EQ(t2.grad(p2).data, (std::vector<double>{1, 1, 1}));
}

TEST(Autograd, ConstantsReceiveNoGradient)
{
    ag::Tape t;
    auto c = t.constant(Tensor({2}, 1.0));
    auto v = t.variable(Tensor({2}, 2.0));
    t.backward(ag::sum(t, ag::mul(t, c, v)));
    EXPECT_TRUE(t.grad(c).empty());
    EXPECT_EQ(t.grad(v).data, (std::vector<double>{1, 1}));
    EXPECT_THROW(t.backward(v), Error);
}

TEST(Autograd, ShapeErrors)
{
    ag::Tape t;
    auto a = t.constant(Tensor({2}, 1.0));
    auto b = t.constant(Tensor({3}, 1.0));
    EXPECT_THROW(ag::add(t, a, b), Error);
    auto x = t.constant(Tensor({1, 3, 4, 4}, 1.0));
    auto w = t.constant(Tensor({2, 2, 3, 3}, 1.0));
    EXPECT_THROW(ag::conv2d(t, x, w, 1, 1, 1), Error);
}

#pragma once

#include "ghnq/quantsim.hpp"
#include "ghnq/rng.hpp"
#include "ghnq/tensor.hpp"

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <vector>

// Minimal reverse-mode differentiation over a linear tape. Each op records its
// output value and a closure that pushes the output gradient into its inputs.
// Values are immutable once recorded; the tape is single-threaded.
namespace ghnq::ag {

struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const noexcept { return id != std::numeric_limits<std::uint32_t>::max(); }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    Var constant(Tensor value);
    // Leaf that refers to an external tensor; it must outlive the tape.
    Var parameter(const Tensor& value);
    // Owned leaf that receives a gradient.
    Var variable(Tensor value);

    Var record(Tensor value, std::span<const Var> inputs, Backward backward);
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward)
    {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
    }

    const Tensor& value(Var v) const;
    // Empty tensor when no gradient reached v.
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const;

    // Gradient buffer of v, zero-initialised on first use. Only for use
    // inside backward closures.
    Tensor& grad_buffer(Var v);

    // d(root)/d(leaf) for every leaf that requires a gradient. root must be
    // a scalar.
    void backward(Var root);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;
        Backward backward;
        bool requires_grad = false;
    };

    const Node& node(Var v) const;
    Node& node(Var v);

    std::vector<Node> nodes_;
};

// Elementwise; operands must share a shape.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var sigmoid(Tape& t, Var a);
Var tanh(Tape& t, Var a);
Var relu(Tape& t, Var a);
Var relu6(Tape& t, Var a);
// sum_i weights[i] * terms[i]
Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights);

// W (m, n) times x (n) plus optional b (m).
Var matvec(Tape& t, Var w, Var x);
Var affine(Tape& t, Var w, Var x, Var b);
// Contiguous 1-D slice.
Var slice(Tape& t, Var a, std::size_t offset, std::size_t length);
// out[i] = a[indices[i]], reshaped to `shape`.
Var gather(Tape& t, Var a, std::shared_ptr<const std::vector<std::size_t>> indices, Shape shape);
// out[i] = W[rows[i], :] . x + b[rows[i]], reshaped to `shape`: a gather
// from affine(W, x, b) that only evaluates the rows it needs.
Var affine_rows(Tape& t, Var w, Var x, Var b, std::shared_ptr<const std::vector<std::size_t>> rows, Shape shape);
// Row `row` of a 2-D tensor.
Var row(Tape& t, Var a, std::size_t row);

// a * target / rms(a)
Var rms_normalize(Tape& t, Var a, double target);
// a - mean(a) + offset
Var mean_shift(Tape& t, Var a, double offset);
Var sum(Tape& t, Var a);
Var mean(Tape& t, std::span<const Var> scalars);

// NCHW feature maps.
Var conv2d(Tape& t, Var x, Var w, int stride, int pad, int groups);
// Normalises with the statistics of the current batch.
Var batch_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
Var max_pool2d(Tape& t, Var x, int kernel, int stride, int pad);
// Padding is excluded from the average.
Var avg_pool2d(Tape& t, Var x, int kernel, int stride, int pad);
Var global_avg_pool(Tape& t, Var x);
Var concat_channels(Tape& t, std::span<const Var> xs);
// x (N, ...) flattened to (N, F), times w (O, F) transposed.
Var linear(Tape& t, Var x, Var w);

// Calibrated fake quantization; backward applies the saturation mask.
Var fake_quant(Tape& t, Var x, int bits);
// Additive uniform noise; backward is the identity.
Var noise_quant(Tape& t, Var x, int bits, Rng& rng);

// Mean softmax cross-entropy of logits (N, C).
Var cross_entropy(Tape& t, Var logits, std::span<const int> labels);

} // namespace ghnq::ag

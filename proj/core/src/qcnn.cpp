#include "ghnq/qcnn.hpp"

#include "ghnq/error.hpp"

#include <cmath>

namespace ghnq {

void validate_params(const ArchGraph& g, const ShapeMap& shapes, const ParamSet& p)
{
    for (const auto& [id, tensors] : p.tensors) {
        const auto it = shapes.find(id);
        if (it == shapes.end() || it->second.params.empty())
            throw ShapeError(id, "parameters given for a node without parameters");
    }
    for (const OpNode& n : g.nodes) {
        const auto& want = shapes.at(n.id).params;
        if (want.empty())
            continue;
        const auto it = p.tensors.find(n.id);
        if (it == p.tensors.end())
            throw ShapeError(n.id, "missing parameters");
        if (it->second.size() != want.size())
            throw ShapeError(n.id, "expected " + std::to_string(want.size()) + " parameter tensors, got " +
                                       std::to_string(it->second.size()));
        for (std::size_t i = 0; i < want.size(); ++i)
            if (it->second[i].shape != want[i])
                throw ShapeError(n.id, "parameter " + std::to_string(i) + " has shape " + shape_str(it->second[i].shape) +
                                           ", expected " + shape_str(want[i]));
    }
}

ParamSet random_params(const ArchGraph& g, const ShapeMap& shapes, Rng& rng)
{
    ParamSet p;
    p.source = ParamSource::Random;
    for (const OpNode& n : g.nodes) {
        const auto& want = shapes.at(n.id).params;
        if (want.empty())
            continue;
        auto& out = p.tensors[n.id];
        if (n.op == OpType::BatchNorm) {
            out.emplace_back(want[0], 1.0);
            out.emplace_back(want[1], 0.0);
            continue;
        }
        Tensor w(want[0]);
        const double fan_in = static_cast<double>(w.size()) / static_cast<double>(w.dim(0));
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& v : w.data)
            v = sd * rng.normal();
        out.push_back(std::move(w));
    }
    return p;
}

std::uint64_t checksum(const ParamSet& p)
{
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [id, tensors] : p.tensors) {
        h = mix_seed(h, static_cast<std::uint64_t>(id));
        for (const auto& t : tensors)
            h = mix_seed(h, checksum(t));
    }
    return h;
}

bool quantizes_output(const ArchGraph& g, int id)
{
    const OpType op = g.node(id).op;
    if (op == OpType::Input || op == OpType::Output || op == OpType::Linear)
        return false;
    const auto outs = g.outputs(id);
    if (outs.empty())
        return true;
    for (int dst : outs) {
        const OpType c = g.node(dst).op;
        if (c != OpType::BatchNorm && c != OpType::ReLU && c != OpType::ReLU6)
            return true;
    }
    return false;
}

namespace {

ag::Var quantize(ag::Tape& t, ag::Var x, int bits, const QuantScheme& scheme, const ForwardOptions& opts, int node_id,
                 int slot)
{
    switch (scheme.mode) {
    case QuantMode::None:
        return x;
    case QuantMode::SimQuant:
        return ag::fake_quant(t, x, bits);
    case QuantMode::NoiseQuant: {
        Rng rng(mix_seed(opts.noise_seed, static_cast<std::uint64_t>(node_id) * 2 + static_cast<std::uint64_t>(slot)));
        return ag::noise_quant(t, x, bits, rng);
    }
    }
    return x;
}

void check_finite(const Tensor& v, int id, const char* what)
{
    if (!all_finite(v.values()))
        throw NumericError(id, std::string("non-finite ") + what);
}

} // namespace

ag::Var build_cnn(ag::Tape& t, const ArchGraph& g, const ParamVars& params, ag::Var input, const QuantScheme& scheme,
                  const ForwardOptions& opts)
{
    scheme.validate();
    const Tensor& x0 = t.value(input);
    if (x0.rank() != 4)
        throw ShapeError(g.input_id(), "input batch must be (N, C, H, W), got " + shape_str(x0.shape));

    std::map<int, ag::Var> out;
    for (int id : topological_order(g)) {
        const OpNode& n = g.node(id);
        const auto ins = g.inputs(id);
        const auto in = [&](std::size_t i) { return out.at(ins.at(i)); };
        const auto param = [&](std::size_t i) {
            const auto it = params.find(id);
            if (it == params.end() || i >= it->second.size())
                throw ShapeError(id, "missing parameters");
            check_finite(t.value(it->second[i]), id, "parameters");
            return it->second[i];
        };
        const auto weight = [&]() { return quantize(t, param(0), scheme.weight_bits, scheme, opts, id, 0); };

        ag::Var y;
        try {
            switch (n.op) {
            case OpType::Input:
                y = input;
                break;
            case OpType::Conv:
                y = ag::conv2d(t, in(0), weight(), n.stride, n.kernel / 2, 1);
                break;
            case OpType::DWConv: {
                const auto c = static_cast<int>(t.value(in(0)).dim(1));
                y = ag::conv2d(t, in(0), weight(), n.stride, n.kernel / 2, c);
                break;
            }
            case OpType::BatchNorm:
                y = ag::batch_norm(t, in(0), param(0), param(1));
                break;
            case OpType::ReLU:
                y = ag::relu(t, in(0));
                break;
            case OpType::ReLU6:
                y = ag::relu6(t, in(0));
                break;
            case OpType::MaxPool:
                y = ag::max_pool2d(t, in(0), n.kernel, n.stride, n.kernel / 2);
                break;
            case OpType::AvgPool:
                y = ag::avg_pool2d(t, in(0), n.kernel, n.stride, n.kernel / 2);
                break;
            case OpType::GlobalAvgPool:
                y = ag::global_avg_pool(t, in(0));
                break;
            case OpType::Add: {
                std::vector<ag::Var> xs;
                for (std::size_t i = 0; i < ins.size(); ++i)
                    xs.push_back(in(i));
                const std::vector<double> ones(xs.size(), 1.0);
                y = ag::weighted_sum(t, xs, ones);
                break;
            }
            case OpType::Concat: {
                std::vector<ag::Var> xs;
                for (std::size_t i = 0; i < ins.size(); ++i)
                    xs.push_back(in(i));
                y = ag::concat_channels(t, xs);
                break;
            }
            case OpType::Linear:
                y = ag::linear(t, in(0), weight());
                break;
            case OpType::Output:
                y = in(0);
                break;
            }
        } catch (const GraphError&) {
            throw;
        } catch (const Error& e) {
            throw ShapeError(id, e.what());
        }
        check_finite(t.value(y), id, "activations");
        if (quantizes_output(g, id))
            y = quantize(t, y, scheme.act_bits, scheme, opts, id, 1);
        if (opts.trace)
            opts.trace(id, t.value(y));
        out[id] = y;
    }
    const ag::Var logits = out.at(g.output_id());
    if (t.value(logits).rank() != 2)
        throw ShapeError(g.output_id(), "network output must be (N, classes), got " + shape_str(t.value(logits).shape));
    return logits;
}

namespace {

std::array<int, 3> chw_of(const Tensor& batch)
{
    if (batch.rank() != 4)
        throw ShapeError(0, "input batch must be (N, C, H, W), got " + shape_str(batch.shape));
    return {static_cast<int>(batch.dim(1)), static_cast<int>(batch.dim(2)), static_cast<int>(batch.dim(3))};
}

ParamVars bind(ag::Tape& t, const ParamSet& p)
{
    ParamVars vars;
    for (const auto& [id, tensors] : p.tensors)
        for (const auto& tensor : tensors)
            vars[id].push_back(t.parameter(tensor));
    return vars;
}

} // namespace

Tensor forward_cnn(const ArchGraph& g, const ParamSet& p, const Tensor& batch, const QuantScheme& scheme,
                   const ForwardOptions& opts)
{
    validate_params(g, infer_shapes(g, chw_of(batch)), p);
    ag::Tape t;
    const ParamVars vars = bind(t, p);
    return t.value(build_cnn(t, g, vars, t.constant(batch), scheme, opts));
}

LossGrad loss_and_grad(const ArchGraph& g, const ParamSet& p, const Tensor& batch, std::span<const int> labels,
                       const QuantScheme& scheme, const ForwardOptions& opts)
{
    validate_params(g, infer_shapes(g, chw_of(batch)), p);
    ag::Tape t;
    const ParamVars vars = bind(t, p);
    const ag::Var logits = build_cnn(t, g, vars, t.constant(batch), scheme, opts);
    const ag::Var loss = ag::cross_entropy(t, logits, labels);
    t.backward(loss);

    LossGrad r;
    r.loss = t.value(loss)[0];
    for (const auto& [id, vs] : vars)
        for (std::size_t i = 0; i < vs.size(); ++i) {
            const Tensor& gr = t.grad(vs[i]);
            r.grad[id].push_back(gr.empty() ? Tensor(p.tensors.at(id)[i].shape, 0.0) : gr);
        }
    return r;
}

} // namespace ghnq

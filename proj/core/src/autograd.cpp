#include "ghnq/autograd.hpp"

#include "ghnq/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ghnq::ag {

// ---------------------------------------------------------------------------
// Tape

const Tape::Node& Tape::node(Var v) const
{
    if (v.id >= nodes_.size())
        throw Error("autograd: invalid variable");
    return nodes_[v.id];
}

Tape::Node& Tape::node(Var v)
{
    if (v.id >= nodes_.size())
        throw Error("autograd: invalid variable");
    return nodes_[v.id];
}

Var Tape::constant(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(const Tensor& value)
{
    Node n;
    n.external = &value;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::variable(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward)
{
    Node n;
    n.owned = std::move(value);
    for (Var in : inputs)
        n.requires_grad = n.requires_grad || node(in).requires_grad;
    if (n.requires_grad)
        n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const
{
    const Node& n = node(v);
    return n.external ? *n.external : n.owned;
}

const Tensor& Tape::grad(Var v) const
{
    return node(v).grad;
}

bool Tape::requires_grad(Var v) const
{
    return node(v).requires_grad;
}

Tensor& Tape::grad_buffer(Var v)
{
    Node& n = node(v);
    if (n.grad.empty() && !value(v).empty())
        n.grad = Tensor(value(v).shape, 0.0);
    return n.grad;
}

void Tape::backward(Var root)
{
    if (value(root).size() != 1)
        throw Error("autograd: backward needs a scalar root");
    for (auto& n : nodes_)
        n.grad = Tensor();
    if (!node(root).requires_grad)
        return;
    grad_buffer(root)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.backward || n.grad.empty())
            continue;
        n.backward(*this, n.grad);
    }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape != b.shape)
        throw Error(std::string("autograd ") + op + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <typename F>
Var unary(Tape& t, Var a, F&& f, std::function<double(double x, double y)> dfdx)
{
    const Tensor& x = t.value(a);
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = f(x[i]);
    const Var out{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(y), {a}, [a, out, dfdx = std::move(dfdx)](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a))
            return;
        const Tensor& x = tp.value(a);
        const Tensor& y = tp.value(out);
        Tensor& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * dfdx(x[i], y[i]);
    });
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(Tape& t, Var a, Var b)
{
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require_same_shape(x, y, "add");
    Tensor z(x.shape);
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = x[i] + y[i];
    return t.record(std::move(z), {a, b}, [a, b](Tape& tp, const Tensor& g) {
        for (Var v : {a, b})
            if (tp.requires_grad(v)) {
                Tensor& gv = tp.grad_buffer(v);
                for (std::size_t i = 0; i < g.size(); ++i)
                    gv[i] += g[i];
            }
    });
}

Var sub(Tape& t, Var a, Var b)
{
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require_same_shape(x, y, "sub");
    Tensor z(x.shape);
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = x[i] - y[i];
    return t.record(std::move(z), {a, b}, [a, b](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) {
            Tensor& ga = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] -= g[i];
        }
    });
}

Var mul(Tape& t, Var a, Var b)
{
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require_same_shape(x, y, "mul");
    Tensor z(x.shape);
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = x[i] * y[i];
    return t.record(std::move(z), {a, b}, [a, b](Tape& tp, const Tensor& g) {
        const Tensor& x = tp.value(a);
        const Tensor& y = tp.value(b);
        if (tp.requires_grad(a)) {
            Tensor& ga = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * y[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] += g[i] * x[i];
        }
    });
}

Var scale(Tape& t, Var a, double c)
{
    return unary(t, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var sigmoid(Tape& t, Var a)
{
    return unary(t, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Tape& t, Var a)
{
    return unary(t, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Tape& t, Var a)
{
    return unary(t, a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var relu6(Tape& t, Var a)
{
    return unary(t, a, [](double x) { return std::clamp(x, 0.0, 6.0); },
                 [](double x, double) { return x > 0.0 && x < 6.0 ? 1.0 : 0.0; });
}

Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights)
{
    if (terms.empty() || terms.size() != weights.size())
        throw Error("autograd weighted_sum: need matching non-empty terms and weights");
    Tensor z(t.value(terms[0]).shape, 0.0);
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const Tensor& x = t.value(terms[k]);
        require_same_shape(z, x, "weighted_sum");
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] += weights[k] * x[i];
    }
    std::vector<Var> ins(terms.begin(), terms.end());
    std::vector<double> w(weights.begin(), weights.end());
    return t.record(std::move(z), ins, [ins, w](Tape& tp, const Tensor& g) {
        for (std::size_t k = 0; k < ins.size(); ++k)
            if (tp.requires_grad(ins[k])) {
                Tensor& gx = tp.grad_buffer(ins[k]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    gx[i] += w[k] * g[i];
            }
    });
}

// ---------------------------------------------------------------------------
// Dense

Var matvec(Tape& t, Var w, Var x)
{
    const Tensor& W = t.value(w);
    const Tensor& X = t.value(x);
    if (W.rank() != 2 || X.size() != static_cast<std::size_t>(W.dim(1)))
        throw Error("autograd matvec: shapes " + shape_str(W.shape) + " and " + shape_str(X.shape));
    const auto m = static_cast<std::size_t>(W.dim(0));
    const auto n = static_cast<std::size_t>(W.dim(1));
    Tensor y(Shape{static_cast<std::int64_t>(m)}, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* wr = &W.data[i * n];
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            acc += wr[j] * X[j];
        y[i] = acc;
    }
    return t.record(std::move(y), {w, x}, [w, x, m, n](Tape& tp, const Tensor& g) {
        const Tensor& W = tp.value(w);
        const Tensor& X = tp.value(x);
        if (tp.requires_grad(w)) {
            Tensor& gw = tp.grad_buffer(w);
            for (std::size_t i = 0; i < m; ++i) {
                if (g[i] == 0.0)
                    continue;
                double* gr = &gw.data[i * n];
                for (std::size_t j = 0; j < n; ++j)
                    gr[j] += g[i] * X[j];
            }
        }
        if (tp.requires_grad(x)) {
            Tensor& gx = tp.grad_buffer(x);
            for (std::size_t i = 0; i < m; ++i) {
                const double* wr = &W.data[i * n];
                for (std::size_t j = 0; j < n; ++j)
                    gx[j] += g[i] * wr[j];
            }
        }
    });
}

Var affine(Tape& t, Var w, Var x, Var b)
{
    return add(t, matvec(t, w, x), b);
}

Var slice(Tape& t, Var a, std::size_t offset, std::size_t length)
{
    const Tensor& x = t.value(a);
    if (offset + length > x.size())
        throw Error("autograd slice: out of range");
    Tensor y(Shape{static_cast<std::int64_t>(length)});
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(offset), length, y.data.begin());
    return t.record(std::move(y), {a}, [a, offset](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[offset + i] += g[i];
    });
}

Var gather(Tape& t, Var a, std::shared_ptr<const std::vector<std::size_t>> indices, Shape shape)
{
    const Tensor& x = t.value(a);
    if (static_cast<std::int64_t>(indices->size()) != numel(shape))
        throw Error("autograd gather: index count does not match shape");
    Tensor y(std::move(shape));
    for (std::size_t i = 0; i < y.size(); ++i) {
        const auto src = (*indices)[i];
        if (src >= x.size())
            throw Error("autograd gather: index out of range");
        y[i] = x[src];
    }
    return t.record(std::move(y), {a}, [a, indices](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[(*indices)[i]] += g[i];
    });
}

Var affine_rows(Tape& t, Var w, Var x, Var b, std::shared_ptr<const std::vector<std::size_t>> rows, Shape shape)
{
    const Tensor& W = t.value(w);
    const Tensor& X = t.value(x);
    const Tensor& B = t.value(b);
    if (W.rank() != 2 || X.size() != static_cast<std::size_t>(W.dim(1)) || B.size() != static_cast<std::size_t>(W.dim(0)))
        throw Error("autograd affine_rows: shapes " + shape_str(W.shape) + ", " + shape_str(X.shape) + ", " + shape_str(B.shape));
    if (static_cast<std::int64_t>(rows->size()) != numel(shape))
        throw Error("autograd affine_rows: row count does not match shape");
    const auto m = static_cast<std::size_t>(W.dim(0));
    const auto n = static_cast<std::size_t>(W.dim(1));
    Tensor y(std::move(shape));
    for (std::size_t i = 0; i < y.size(); ++i) {
        const std::size_t r = (*rows)[i];
        if (r >= m)
            throw Error("autograd affine_rows: row out of range");
        const double* wr = &W.data[r * n];
        double acc = B[r];
        for (std::size_t j = 0; j < n; ++j)
            acc += wr[j] * X[j];
        y[i] = acc;
    }
    return t.record(std::move(y), {w, x, b}, [w, x, b, rows, n](Tape& tp, const Tensor& g) {
        const Tensor& W = tp.value(w);
        const Tensor& X = tp.value(x);
        Tensor* gw = tp.requires_grad(w) ? &tp.grad_buffer(w) : nullptr;
        Tensor* gx = tp.requires_grad(x) ? &tp.grad_buffer(x) : nullptr;
        Tensor* gb = tp.requires_grad(b) ? &tp.grad_buffer(b) : nullptr;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t r = (*rows)[i];
            const double gi = g[i];
            if (gb)
                (*gb)[r] += gi;
            if (gw) {
                double* gr = &gw->data[r * n];
                for (std::size_t j = 0; j < n; ++j)
                    gr[j] += gi * X[j];
            }
            if (gx) {
                const double* wr = &W.data[r * n];
                for (std::size_t j = 0; j < n; ++j)
                    (*gx)[j] += gi * wr[j];
            }
        }
    });
}

Var row(Tape& t, Var a, std::size_t r)
{
    const Tensor& x = t.value(a);
    if (x.rank() != 2 || r >= static_cast<std::size_t>(x.dim(0)))
        throw Error("autograd row: out of range");
    const auto n = static_cast<std::size_t>(x.dim(1));
    Tensor y(Shape{static_cast<std::int64_t>(n)});
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(r * n), n, y.data.begin());
    return t.record(std::move(y), {a}, [a, r, n](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < n; ++i)
            ga[r * n + i] += g[i];
    });
}

Var rms_normalize(Tape& t, Var a, double target)
{
    const Tensor& x = t.value(a);
    const auto n = static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x.data)
        ss += v * v;
    const double r = std::sqrt(ss / n + 1e-300);
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] * target / r;
    return t.record(std::move(y), {a}, [a, target, r, n](Tape& tp, const Tensor& g) {
        const Tensor& x = tp.value(a);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i)
            dot += x[i] * g[i];
        const double c = target / r;
        const double k = dot / (n * r * r);
        Tensor& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += c * (g[i] - x[i] * k);
    });
}

Var mean_shift(Tape& t, Var a, double offset)
{
    const Tensor& x = t.value(a);
    double m = 0.0;
    for (double v : x.data)
        m += v;
    m /= static_cast<double>(x.size());
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] - m + offset;
    return t.record(std::move(y), {a}, [a](Tape& tp, const Tensor& g) {
        double gm = 0.0;
        for (double v : g.data)
            gm += v;
        gm /= static_cast<double>(g.size());
        Tensor& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] - gm;
    });
}

Var sum(Tape& t, Var a)
{
    double s = 0.0;
    for (double v : t.value(a).data)
        s += v;
    return t.record(Tensor(Shape{1}, s), {a}, [a](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad_buffer(a);
        for (auto& v : ga.data)
            v += g[0];
    });
}

Var mean(Tape& t, std::span<const Var> scalars)
{
    std::vector<double> w(scalars.size(), 1.0 / static_cast<double>(scalars.size()));
    return weighted_sum(t, scalars, w);
}

// ---------------------------------------------------------------------------
// Convolutional

namespace {

struct Dims {
    std::size_t n, c, h, w;
};

Dims nchw(const Tensor& x, const char* op)
{
    if (x.rank() != 4)
        throw Error(std::string("autograd ") + op + ": expected NCHW input, got " + shape_str(x.shape));
    return {static_cast<std::size_t>(x.dim(0)), static_cast<std::size_t>(x.dim(1)), static_cast<std::size_t>(x.dim(2)),
            static_cast<std::size_t>(x.dim(3))};
}

std::size_t out_size(std::size_t in, int k, int s, int p)
{
    const auto v = (static_cast<std::int64_t>(in) + 2 * p - k) / s + 1;
    if (v < 1)
        throw Error("autograd: spatial size collapses below 1");
    return static_cast<std::size_t>(v);
}

// Output positions o with 0 <= o*s - p + k_off < in.
std::pair<std::size_t, std::size_t> valid_range(std::size_t in, std::size_t out, int s, int p, int k_off)
{
    const std::int64_t shift = static_cast<std::int64_t>(k_off) - p;
    std::int64_t lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
    std::int64_t hi = (static_cast<std::int64_t>(in) - 1 - shift);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(out) - 1);
    if (hi < lo)
        return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

} // namespace

Var conv2d(Tape& t, Var xv, Var wv, int stride, int pad, int groups)
{
    const Tensor& x = t.value(xv);
    const Tensor& w = t.value(wv);
    const Dims d = nchw(x, "conv2d");
    if (w.rank() != 4 || w.dim(2) != w.dim(3))
        throw Error("autograd conv2d: bad weight shape " + shape_str(w.shape));
    const auto O = static_cast<std::size_t>(w.dim(0));
    const auto Cg = static_cast<std::size_t>(w.dim(1));
    const int k = static_cast<int>(w.dim(2));
    const auto G = static_cast<std::size_t>(groups);
    if (G == 0 || d.c != Cg * G || O % G != 0)
        throw Error("autograd conv2d: channel/group mismatch " + shape_str(x.shape) + " * " + shape_str(w.shape));
    const std::size_t Og = O / G;
    const std::size_t Ho = out_size(d.h, k, stride, pad);
    const std::size_t Wo = out_size(d.w, k, stride, pad);
    const auto s = static_cast<std::size_t>(stride);

    Tensor y(Shape{static_cast<std::int64_t>(d.n), static_cast<std::int64_t>(O), static_cast<std::int64_t>(Ho), static_cast<std::int64_t>(Wo)}, 0.0);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t oc = 0; oc < O; ++oc) {
            const std::size_t g = oc / Og;
            double* out = &y.data[((n * O) + oc) * Ho * Wo];
            for (std::size_t icg = 0; icg < Cg; ++icg) {
                const std::size_t ic = g * Cg + icg;
                const double* in = &x.data[((n * d.c) + ic) * d.h * d.w];
                for (int kh = 0; kh < k; ++kh) {
                    const auto [oh0, oh1] = valid_range(d.h, Ho, stride, pad, kh);
                    for (int kw = 0; kw < k; ++kw) {
                        const double wt = w.data[((oc * Cg + icg) * static_cast<std::size_t>(k) + static_cast<std::size_t>(kh)) * static_cast<std::size_t>(k) + static_cast<std::size_t>(kw)];
                        const auto [ow0, ow1] = valid_range(d.w, Wo, stride, pad, kw);
                        for (std::size_t oh = oh0; oh < oh1; ++oh) {
                            const std::size_t ih = oh * s + static_cast<std::size_t>(kh) - static_cast<std::size_t>(pad);
                            const double* inr = in + ih * d.w + static_cast<std::size_t>(kw) - static_cast<std::size_t>(pad);
                            double* outr = out + oh * Wo;
                            for (std::size_t ow = ow0; ow < ow1; ++ow)
                                outr[ow] += wt * inr[ow * s];
                        }
                    }
                }
            }
        }

    return t.record(std::move(y), {xv, wv}, [=](Tape& tp, const Tensor& gy) {
        const Tensor& x = tp.value(xv);
        const Tensor& w = tp.value(wv);
        const bool need_x = tp.requires_grad(xv);
        const bool need_w = tp.requires_grad(wv);
        Tensor* gx = need_x ? &tp.grad_buffer(xv) : nullptr;
        Tensor* gw = need_w ? &tp.grad_buffer(wv) : nullptr;
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t oc = 0; oc < O; ++oc) {
                const std::size_t g = oc / Og;
                const double* go = &gy.data[((n * O) + oc) * Ho * Wo];
                for (std::size_t icg = 0; icg < Cg; ++icg) {
                    const std::size_t ic = g * Cg + icg;
                    const std::size_t in_off = ((n * d.c) + ic) * d.h * d.w;
                    for (int kh = 0; kh < k; ++kh) {
                        const auto [oh0, oh1] = valid_range(d.h, Ho, stride, pad, kh);
                        for (int kw = 0; kw < k; ++kw) {
                            const std::size_t widx = ((oc * Cg + icg) * static_cast<std::size_t>(k) + static_cast<std::size_t>(kh)) * static_cast<std::size_t>(k) + static_cast<std::size_t>(kw);
                            const double wt = w.data[widx];
                            const auto [ow0, ow1] = valid_range(d.w, Wo, stride, pad, kw);
                            double acc = 0.0;
                            for (std::size_t oh = oh0; oh < oh1; ++oh) {
                                const std::size_t ih = oh * s + static_cast<std::size_t>(kh) - static_cast<std::size_t>(pad);
                                const std::size_t base = in_off + ih * d.w + static_cast<std::size_t>(kw) - static_cast<std::size_t>(pad);
                                const double* gor = go + oh * Wo;
                                if (need_w) {
                                    const double* inr = &x.data[base];
                                    for (std::size_t ow = ow0; ow < ow1; ++ow)
                                        acc += gor[ow] * inr[ow * s];
                                }
                                if (need_x) {
                                    double* gxr = &gx->data[base];
                                    for (std::size_t ow = ow0; ow < ow1; ++ow)
                                        gxr[ow * s] += wt * gor[ow];
                                }
                            }
                            if (need_w)
                                gw->data[widx] += acc;
                        }
                    }
                }
            }
    });
}

Var batch_norm(Tape& t, Var xv, Var gv, Var bv, double eps)
{
    const Tensor& x = t.value(xv);
    const Tensor& gain = t.value(gv);
    const Tensor& bias = t.value(bv);
    const Dims d = nchw(x, "batch_norm");
    if (gain.size() != d.c || bias.size() != d.c)
        throw Error("autograd batch_norm: parameter size does not match channels");
    const std::size_t plane = d.h * d.w;
    const auto m = static_cast<double>(d.n * plane);

    auto xhat = std::make_shared<Tensor>(x.shape);
    auto inv_std = std::make_shared<std::vector<double>>(d.c);
    Tensor y(x.shape);
    for (std::size_t c = 0; c < d.c; ++c) {
        double mu = 0.0;
        for (std::size_t n = 0; n < d.n; ++n) {
            const double* p = &x.data[(n * d.c + c) * plane];
            for (std::size_t i = 0; i < plane; ++i)
                mu += p[i];
        }
        mu /= m;
        double var = 0.0;
        for (std::size_t n = 0; n < d.n; ++n) {
            const double* p = &x.data[(n * d.c + c) * plane];
            for (std::size_t i = 0; i < plane; ++i)
                var += (p[i] - mu) * (p[i] - mu);
        }
        var /= m;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        for (std::size_t n = 0; n < d.n; ++n) {
            const std::size_t off = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double xh = (x.data[off + i] - mu) * is;
                xhat->data[off + i] = xh;
                y.data[off + i] = gain[c] * xh + bias[c];
            }
        }
    }

    return t.record(std::move(y), {xv, gv, bv}, [=](Tape& tp, const Tensor& gy) {
        const Tensor& gain = tp.value(gv);
        Tensor* gx = tp.requires_grad(xv) ? &tp.grad_buffer(xv) : nullptr;
        Tensor* gg = tp.requires_grad(gv) ? &tp.grad_buffer(gv) : nullptr;
        Tensor* gb = tp.requires_grad(bv) ? &tp.grad_buffer(bv) : nullptr;
        for (std::size_t c = 0; c < d.c; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < d.n; ++n) {
                const std::size_t off = (n * d.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_g += gy.data[off + i];
                    sum_gx += gy.data[off + i] * xhat->data[off + i];
                }
            }
            if (gg)
                (*gg)[c] += sum_gx;
            if (gb)
                (*gb)[c] += sum_g;
            if (gx) {
                const double k = gain[c] * (*inv_std)[c] / m;
                for (std::size_t n = 0; n < d.n; ++n) {
                    const std::size_t off = (n * d.c + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i)
                        gx->data[off + i] += k * (m * gy.data[off + i] - sum_g - xhat->data[off + i] * sum_gx);
                }
            }
        }
    });
}

Var max_pool2d(Tape& t, Var xv, int kernel, int stride, int pad)
{
    const Tensor& x = t.value(xv);
    const Dims d = nchw(x, "max_pool2d");
    const std::size_t Ho = out_size(d.h, kernel, stride, pad);
    const std::size_t Wo = out_size(d.w, kernel, stride, pad);
    Tensor y(Shape{static_cast<std::int64_t>(d.n), static_cast<std::int64_t>(d.c), static_cast<std::int64_t>(Ho), static_cast<std::int64_t>(Wo)});
    auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t arg = 0;
                for (int kh = 0; kh < kernel; ++kh) {
                    const auto ih = static_cast<std::int64_t>(oh) * stride - pad + kh;
                    if (ih < 0 || ih >= static_cast<std::int64_t>(d.h))
                        continue;
                    for (int kw = 0; kw < kernel; ++kw) {
                        const auto iw = static_cast<std::int64_t>(ow) * stride - pad + kw;
                        if (iw < 0 || iw >= static_cast<std::int64_t>(d.w))
                            continue;
                        const std::size_t idx = nc * d.h * d.w + static_cast<std::size_t>(ih) * d.w + static_cast<std::size_t>(iw);
                        if (x.data[idx] > best) {
                            best = x.data[idx];
                            arg = idx;
                        }
                    }
                }
                const std::size_t o = (nc * Ho + oh) * Wo + ow;
                y.data[o] = best;
                (*argmax)[o] = arg;
            }
    return t.record(std::move(y), {xv}, [xv, argmax](Tape& tp, const Tensor& gy) {
        Tensor& gx = tp.grad_buffer(xv);
        for (std::size_t i = 0; i < gy.size(); ++i)
            gx.data[(*argmax)[i]] += gy.data[i];
    });
}

Var avg_pool2d(Tape& t, Var xv, int kernel, int stride, int pad)
{
    const Tensor& x = t.value(xv);
    const Dims d = nchw(x, "avg_pool2d");
    const std::size_t Ho = out_size(d.h, kernel, stride, pad);
    const std::size_t Wo = out_size(d.w, kernel, stride, pad);
    Tensor y(Shape{static_cast<std::int64_t>(d.n), static_cast<std::int64_t>(d.c), static_cast<std::int64_t>(Ho), static_cast<std::int64_t>(Wo)});
    const auto window = [=](std::size_t o, int k, std::size_t in) {
        const auto lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(o) * stride - pad);
        const auto hi = std::min<std::int64_t>(static_cast<std::int64_t>(in), static_cast<std::int64_t>(o) * stride - pad + k);
        return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
    };
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
        for (std::size_t oh = 0; oh < Ho; ++oh) {
            const auto [h0, h1] = window(oh, kernel, d.h);
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                const auto [w0, w1] = window(ow, kernel, d.w);
                double acc = 0.0;
                for (std::size_t ih = h0; ih < h1; ++ih)
                    for (std::size_t iw = w0; iw < w1; ++iw)
                        acc += x.data[nc * d.h * d.w + ih * d.w + iw];
                y.data[(nc * Ho + oh) * Wo + ow] = acc / static_cast<double>((h1 - h0) * (w1 - w0));
            }
        }
    return t.record(std::move(y), {xv}, [=](Tape& tp, const Tensor& gy) {
        Tensor& gx = tp.grad_buffer(xv);
        for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
            for (std::size_t oh = 0; oh < Ho; ++oh) {
                const auto [h0, h1] = window(oh, kernel, d.h);
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    const auto [w0, w1] = window(ow, kernel, d.w);
                    const double g = gy.data[(nc * Ho + oh) * Wo + ow] / static_cast<double>((h1 - h0) * (w1 - w0));
                    for (std::size_t ih = h0; ih < h1; ++ih)
                        for (std::size_t iw = w0; iw < w1; ++iw)
                            gx.data[nc * d.h * d.w + ih * d.w + iw] += g;
                }
            }
    });
}

Var global_avg_pool(Tape& t, Var xv)
{
    const Tensor& x = t.value(xv);
    const Dims d = nchw(x, "global_avg_pool");
    const std::size_t plane = d.h * d.w;
    Tensor y(Shape{static_cast<std::int64_t>(d.n), static_cast<std::int64_t>(d.c), 1, 1});
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i)
            acc += x.data[nc * plane + i];
        y.data[nc] = acc / static_cast<double>(plane);
    }
    return t.record(std::move(y), {xv}, [xv, d, plane](Tape& tp, const Tensor& gy) {
        Tensor& gx = tp.grad_buffer(xv);
        for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
            const double g = gy.data[nc] / static_cast<double>(plane);
            for (std::size_t i = 0; i < plane; ++i)
                gx.data[nc * plane + i] += g;
        }
    });
}

Var concat_channels(Tape& t, std::span<const Var> xs)
{
    if (xs.empty())
        throw Error("autograd concat: no inputs");
    const Dims d0 = nchw(t.value(xs[0]), "concat");
    std::vector<std::size_t> channels;
    std::size_t total = 0;
    for (Var v : xs) {
        const Dims d = nchw(t.value(v), "concat");
        if (d.n != d0.n || d.h != d0.h || d.w != d0.w)
            throw Error("autograd concat: spatial/batch mismatch");
        channels.push_back(d.c);
        total += d.c;
    }
    const std::size_t plane = d0.h * d0.w;
    Tensor y(Shape{static_cast<std::int64_t>(d0.n), static_cast<std::int64_t>(total), static_cast<std::int64_t>(d0.h), static_cast<std::int64_t>(d0.w)});
    for (std::size_t n = 0; n < d0.n; ++n) {
        std::size_t c_off = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const Tensor& x = t.value(xs[k]);
            std::copy_n(&x.data[n * channels[k] * plane], channels[k] * plane, &y.data[(n * total + c_off) * plane]);
            c_off += channels[k];
        }
    }
    std::vector<Var> ins(xs.begin(), xs.end());
    return t.record(std::move(y), ins, [ins, channels, total, plane, batch = d0.n](Tape& tp, const Tensor& gy) {
        std::size_t c_off = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
            if (tp.requires_grad(ins[k])) {
                Tensor& gx = tp.grad_buffer(ins[k]);
                for (std::size_t n = 0; n < batch; ++n) {
                    const double* src = &gy.data[(n * total + c_off) * plane];
                    double* dst = &gx.data[n * channels[k] * plane];
                    for (std::size_t i = 0; i < channels[k] * plane; ++i)
                        dst[i] += src[i];
                }
            }
            c_off += channels[k];
        }
    });
}

Var linear(Tape& t, Var xv, Var wv)
{
    const Tensor& x = t.value(xv);
    const Tensor& w = t.value(wv);
    if (x.rank() < 1 || w.rank() != 2)
        throw Error("autograd linear: bad shapes");
    const auto N = static_cast<std::size_t>(x.dim(0));
    const std::size_t F = N ? x.size() / N : 0;
    const auto O = static_cast<std::size_t>(w.dim(0));
    if (static_cast<std::size_t>(w.dim(1)) != F)
        throw Error("autograd linear: feature mismatch " + shape_str(x.shape) + " * " + shape_str(w.shape));
    Tensor y(Shape{static_cast<std::int64_t>(N), static_cast<std::int64_t>(O)}, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t f = 0; f < F; ++f)
                acc += x.data[n * F + f] * w.data[o * F + f];
            y.data[n * O + o] = acc;
        }
    return t.record(std::move(y), {xv, wv}, [=](Tape& tp, const Tensor& gy) {
        const Tensor& x = tp.value(xv);
        const Tensor& w = tp.value(wv);
        Tensor* gx = tp.requires_grad(xv) ? &tp.grad_buffer(xv) : nullptr;
        Tensor* gw = tp.requires_grad(wv) ? &tp.grad_buffer(wv) : nullptr;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
                const double g = gy.data[n * O + o];
                for (std::size_t f = 0; f < F; ++f) {
                    if (gx)
                        gx->data[n * F + f] += g * w.data[o * F + f];
                    if (gw)
                        gw->data[o * F + f] += g * x.data[n * F + f];
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Quantization

Var fake_quant(Tape& t, Var xv, int bits)
{
    const Tensor& x = t.value(xv);
    auto fq = fake_quant_ste(x.values(), bits);
    Tensor y(x.shape, std::move(fq.values));
    return t.record(std::move(y), {xv}, [xv, mask = std::move(fq.mask)](Tape& tp, const Tensor& gy) {
        Tensor& gx = tp.grad_buffer(xv);
        for (std::size_t i = 0; i < gy.size(); ++i)
            if (mask[i])
                gx.data[i] += gy.data[i];
    });
}

Var noise_quant(Tape& t, Var xv, int bits, Rng& rng)
{
    const Tensor& x = t.value(xv);
    Tensor y(x.shape, ghnq::noise_quant(x.values(), bits, rng));
    return t.record(std::move(y), {xv}, [xv](Tape& tp, const Tensor& gy) {
        Tensor& gx = tp.grad_buffer(xv);
        for (std::size_t i = 0; i < gy.size(); ++i)
            gx.data[i] += gy.data[i];
    });
}

Var cross_entropy(Tape& t, Var lv, std::span<const int> labels)
{
    const Tensor& logits = t.value(lv);
    if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
        throw Error("autograd cross_entropy: logits/labels mismatch");
    const auto N = static_cast<std::size_t>(logits.dim(0));
    const auto C = static_cast<std::size_t>(logits.dim(1));
    auto probs = std::make_shared<std::vector<double>>(N * C);
    double loss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= C)
            throw Error("autograd cross_entropy: label out of range");
        const double* z = &logits.data[n * C];
        const double mx = *std::max_element(z, z + C);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            s += std::exp(z[c] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < C; ++c)
            (*probs)[n * C + c] = std::exp(z[c] - lse);
        loss += lse - z[static_cast<std::size_t>(labels[n])];
    }
    loss /= static_cast<double>(N);
    std::vector<int> lab(labels.begin(), labels.end());
    return t.record(Tensor(Shape{1}, loss), {lv}, [lv, probs, lab, N, C](Tape& tp, const Tensor& gy) {
        Tensor& gl = tp.grad_buffer(lv);
        const double k = gy[0] / static_cast<double>(N);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                gl.data[n * C + c] += k * ((*probs)[n * C + c] - (static_cast<std::size_t>(lab[n]) == c ? 1.0 : 0.0));
    });
}

} // namespace ghnq::ag

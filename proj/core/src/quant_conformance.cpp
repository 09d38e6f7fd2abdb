#include "ghnq/quant_conformance.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace ghnq {

bool ConformanceReport::passed() const noexcept
{
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed(); });
}

std::string ConformanceReport::to_text() const
{
    std::ostringstream os;
    for (const auto& c : checks) {
        os << (c.passed() ? "PASS " : "FAIL ") << c.name << " (" << c.cases << " cases, " << c.failures << " failures)";
        if (!c.first_failure.empty())
            os << ": " << c.first_failure;
        os << "\n";
    }
    os << (passed() ? "quant-check: all checks passed" : "quant-check: FAILED") << "\n";
    return os.str();
}

std::vector<double> nearest_grid_oracle(std::span<const double> x, const QuantParams& qp)
{
    std::vector<double> out(x.begin(), x.end());
    if (qp.passthrough)
        return out;
    const std::int64_t top = qp.max_code();
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::int64_t best = 0;
        double best_dist = std::abs(x[i] - qp.scale * static_cast<double>(-qp.zero_point));
        for (std::int64_t q = 1; q <= top; ++q) {
            const std::int64_t rel = q - qp.zero_point;
            const double dist = std::abs(x[i] - qp.scale * static_cast<double>(rel));
            const double tie_tol = 1e-9 * qp.scale;
            if (dist < best_dist - tie_tol) {
                best = q;
                best_dist = dist;
            } else if (std::abs(dist - best_dist) <= tie_tol && std::abs(rel) > std::abs(best - qp.zero_point)) {
                best = q;
                best_dist = std::min(dist, best_dist);
            }
        }
        out[i] = qp.scale * static_cast<double>(best - qp.zero_point);
    }
    return out;
}

namespace {

struct Recorder {
    ConformanceCheck check;

    explicit Recorder(std::string name) { check.name = std::move(name); }

    void expect(bool ok, const std::string& detail)
    {
        ++check.cases;
        if (!ok) {
            if (check.failures == 0)
                check.first_failure = detail;
            ++check.failures;
        }
    }
};

std::vector<double> random_tensor(Rng& rng)
{
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 64));
    std::vector<double> x(n);
    const auto kind = rng.uniform_int(0, 5);
    const double lo = rng.uniform(-4.0, 1.0);
    const double hi = lo + rng.uniform(1e-3, 6.0);
    for (auto& v : x) {
        switch (kind) {
        case 0:
            v = rng.uniform(lo, hi);
            break;
        case 1:
            v = rng.normal() * std::exp(rng.uniform(-3.0, 2.0));
            break;
        case 2: // coarse values produce exact half-step ties
            v = 0.25 * static_cast<double>(rng.uniform_int(-8, 8));
            break;
        case 3:
            v = std::abs(rng.uniform(lo, hi));
            break;
        case 4:
            v = -std::abs(rng.uniform(lo, hi));
            break;
        default:
            v = rng.bernoulli(0.3) ? 0.0 : rng.uniform(lo, hi);
            break;
        }
    }
    if (rng.bernoulli(0.02))
        std::fill(x.begin(), x.end(), x.front());
    return x;
}

std::string describe(const std::vector<double>& x, int bits)
{
    std::ostringstream os;
    os.precision(17);
    os << "bits=" << bits << " x=[";
    for (std::size_t i = 0; i < x.size() && i < 8; ++i)
        os << (i ? "," : "") << x[i];
    if (x.size() > 8)
        os << ",...";
    os << "]";
    return os.str();
}

} // namespace

ConformanceReport run_quant_conformance(std::size_t tensors_per_bitwidth, std::uint64_t seed)
{
    Recorder params("qparams match closed form");
    Recorder oracle("nearest-grid oracle equivalence");
    Recorder idempotence("idempotence");
    Recorder zero("zero preservation");
    Recorder cardinality("grid cardinality");
    Recorder bound("roundtrip bound");
    Recorder noise("noise_quant bound");

    Rng rng(seed);
    for (int bits : {2, 4, 8}) {
        const auto levels = static_cast<double>((1 << bits) - 1);
        for (std::size_t t = 0; t < tensors_per_bitwidth; ++t) {
            const auto x = random_tensor(rng);
            const auto what = describe(x, bits);
            const auto fq = fake_quant_ste(x, bits);
            const auto& qp = fq.params;

            const double lo = std::min(0.0, *std::min_element(x.begin(), x.end()));
            const double hi = std::max(0.0, *std::max_element(x.begin(), x.end()));
            const bool constant = *std::min_element(x.begin(), x.end()) == *std::max_element(x.begin(), x.end());
            if (constant) {
                params.expect(qp.passthrough, "constant tensor not passthrough: " + what);
            } else {
                const double scale = (hi - lo) / levels;
                const auto zp = static_cast<std::int64_t>(std::round(-lo * levels / (hi - lo)));
                params.expect(!qp.passthrough && std::abs(qp.scale - scale) <= 1e-12 * scale && qp.zero_point == zp,
                              "scale/zero_point mismatch: " + what);
            }

            const auto expected = nearest_grid_oracle(x, qp);
            oracle.expect(expected == fq.values, "oracle mismatch: " + what);

            idempotence.expect(fake_quant(fq.values, bits) == fq.values, "second pass changed values: " + what);

            bool zero_ok = true;
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] == 0.0 && fq.values[i] != 0.0)
                    zero_ok = false;
            zero.expect(zero_ok, "0.0 not preserved: " + what);

            const std::set<double> distinct(fq.values.begin(), fq.values.end());
            cardinality.expect(distinct.size() <= (std::size_t{1} << bits), "too many levels: " + what);

            bool bound_ok = true;
            if (!qp.passthrough)
                for (std::size_t i = 0; i < x.size(); ++i)
                    if (std::abs(fq.values[i] - x[i]) > qp.scale / 2 * (1 + 1e-9))
                        bound_ok = false;
            bound.expect(bound_ok, "error above scale/2: " + what);

            const auto nq = noise_quant_detail(x, bits, rng);
            bool noise_ok = true;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double eps = 1e-12 * std::max(1.0, std::abs(x[i]));
                if (std::abs(nq.values[i] - x[i]) >= nq.step / 2 + eps && !(nq.step == 0.0 && nq.values[i] == x[i]))
                    noise_ok = false;
            }
            noise.expect(noise_ok, "noise outside half step: " + what);
        }
    }

    ConformanceReport report;
    for (auto* r : {&params, &oracle, &idempotence, &zero, &cardinality, &bound, &noise})
        report.checks.push_back(r->check);
    return report;
}

} // namespace ghnq

#include "ghnq/ghn.hpp"

#include "ghnq/error.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ghnq {

using nlohmann::json;

void GhnConfig::validate() const
{
    if (hidden_dim <= 0)
        throw ConfigError("ghn: hidden_dim must be positive, got " + std::to_string(hidden_dim));
    if (passes <= 0)
        throw ConfigError("ghn: passes must be positive, got " + std::to_string(passes));
    for (int b : base)
        if (b <= 0)
            throw ConfigError("ghn: base shape entries must be positive");
    if (base[2] != base[3])
        throw ConfigError("ghn: base kernel must be square");
    if (base[2] < 3)
        throw ConfigError("ghn: base kernel must be at least 3");
}

std::string ghn_config_to_json(const GhnConfig& cfg)
{
    return json{{"hidden_dim", cfg.hidden_dim}, {"passes", cfg.passes}, {"base", cfg.base}}.dump();
}

namespace {

GhnConfig ghn_config_from(const json& j)
{
    if (!j.is_object())
        throw ConfigError("ghn config must be a JSON object");
    GhnConfig cfg;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "hidden_dim")
                cfg.hidden_dim = value.get<int>();
            else if (key == "passes")
                cfg.passes = value.get<int>();
            else if (key == "base")
                cfg.base = value.get<std::array<int, 4>>();
            else
                throw ConfigError("ghn config: unknown key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("ghn config: bad value for '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

} // namespace

GhnConfig parse_ghn_config(std::string_view json_text)
{
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("ghn config: ") + e.what());
    }
    return ghn_config_from(j);
}

// ---------------------------------------------------------------------------
// Model layout

namespace {

struct Base {
    Shape conv, dw, linear, bn;
};

Base base_shapes(const GhnConfig& cfg)
{
    const std::int64_t o = cfg.base[0], i = cfg.base[1], k = cfg.base[2];
    return {{o, i, k, k}, {o, 1, k, k}, {o, i}, {o}};
}

const char* const kHeads[] = {"conv", "dw", "linear", "bn_gain", "bn_bias"};

const Shape& head_base(const Base& b, std::string_view head)
{
    if (head == "conv")
        return b.conv;
    if (head == "dw")
        return b.dw;
    if (head == "linear")
        return b.linear;
    return b.bn;
}

} // namespace

GhnModel::GhnModel(GhnConfig cfg) : cfg_(cfg)
{
    cfg_.validate();
    const std::int64_t h = cfg_.hidden_dim;
    tensors_.emplace_back("embed", Tensor({static_cast<std::int64_t>(kOpCount), h}));
    for (const char* dir : {"fw", "bw"}) {
        const std::string p = dir;
        tensors_.emplace_back(p + ".msg.w", Tensor({h, h}));
        tensors_.emplace_back(p + ".msg.b", Tensor({h}));
        tensors_.emplace_back(p + ".gru.w_ih", Tensor({3 * h, h}));
        tensors_.emplace_back(p + ".gru.b_ih", Tensor({3 * h}));
        tensors_.emplace_back(p + ".gru.w_hh", Tensor({3 * h, h}));
        tensors_.emplace_back(p + ".gru.b_hh", Tensor({3 * h}));
    }
    const Base b = base_shapes(cfg_);
    for (const char* head : kHeads) {
        const std::int64_t rows = numel(head_base(b, head));
        tensors_.emplace_back(std::string("dec.") + head + ".w", Tensor({rows, h}));
        tensors_.emplace_back(std::string("dec.") + head + ".b", Tensor({rows}));
    }
}

Tensor& GhnModel::tensor(const std::string& name)
{
    for (auto& [n, t] : tensors_)
        if (n == name)
            return t;
    throw Error("ghn: no tensor named '" + name + "'");
}

const Tensor& GhnModel::tensor(const std::string& name) const
{
    return const_cast<GhnModel*>(this)->tensor(name);
}

std::size_t GhnModel::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_)
        n += t.size();
    return n;
}

std::uint64_t GhnModel::checksum() const
{
    std::uint64_t h = checksum_bytes(ghn_config_to_json(cfg_));
    for (const auto& [name, t] : tensors_)
        h = mix_seed(h ^ checksum_bytes(name), ghnq::checksum(t));
    return h;
}

GhnModel init_ghn(const GhnConfig& cfg, Rng& rng)
{
    GhnModel m(cfg);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
    for (auto& [name, t] : m.tensors()) {
        if (name == "embed") {
            for (auto& v : t.data)
                v = rng.normal();
            continue;
        }
        // Every weight here has fan-in hidden_dim, and biases share their
        // layer's bound.
        for (auto& v : t.data)
            v = rng.uniform(-bound, bound);
    }
    return m;
}

GhnVars bind_ghn(ag::Tape& tape, const GhnModel& ghn)
{
    GhnVars vars;
    for (const auto& [name, t] : ghn.tensors())
        vars.emplace(name, tape.parameter(t));
    return vars;
}

// ---------------------------------------------------------------------------
// Encoder

namespace {

std::size_t op_index(OpType op)
{
    return static_cast<std::size_t>(op);
}

struct Incoming {
    std::vector<int> src;
    std::vector<double> weight;
};

ag::Var gru(ag::Tape& t, const GhnVars& v, const std::string& dir, ag::Var x, ag::Var h, std::size_t hd)
{
    const ag::Var gi = ag::affine(t, v.at(dir + ".gru.w_ih"), x, v.at(dir + ".gru.b_ih"));
    const ag::Var gh = ag::affine(t, v.at(dir + ".gru.w_hh"), h, v.at(dir + ".gru.b_hh"));
    const ag::Var r = ag::sigmoid(t, ag::add(t, ag::slice(t, gi, 0, hd), ag::slice(t, gh, 0, hd)));
    const ag::Var z = ag::sigmoid(t, ag::add(t, ag::slice(t, gi, hd, hd), ag::slice(t, gh, hd, hd)));
    const ag::Var n = ag::tanh(t, ag::add(t, ag::slice(t, gi, 2 * hd, hd), ag::mul(t, r, ag::slice(t, gh, 2 * hd, hd))));
    return ag::add(t, n, ag::mul(t, z, ag::sub(t, h, n)));
}

} // namespace

std::vector<ag::Var> encode(ag::Tape& t, const GhnModel& ghn, const GhnVars& vars, const ArchGraph& g)
{
    const auto hd = static_cast<std::size_t>(ghn.config().hidden_dim);
    const std::vector<int> order = topological_order(g);

    // Real edges weigh 1, virtual edges 1/distance.
    std::map<int, Incoming> fw_in, bw_in;
    for (const Edge& e : g.edges) {
        fw_in[e.dst].src.push_back(e.src);
        fw_in[e.dst].weight.push_back(1.0);
        bw_in[e.src].src.push_back(e.dst);
        bw_in[e.src].weight.push_back(1.0);
    }
    for (const VirtualEdge& e : g.virtual_edges) {
        const double w = 1.0 / e.distance;
        fw_in[e.dst].src.push_back(e.src);
        fw_in[e.dst].weight.push_back(w);
        bw_in[e.src].src.push_back(e.dst);
        bw_in[e.src].weight.push_back(w);
    }

    std::map<int, ag::Var> state;
    for (const OpNode& n : g.nodes)
        state[n.id] = ag::row(t, vars.at("embed"), op_index(n.op));
    const ag::Var zero = t.constant(Tensor({static_cast<std::int64_t>(hd)}, 0.0));

    const auto traverse = [&](const std::string& dir, const std::map<int, Incoming>& incoming, bool reverse) {
        std::map<int, ag::Var> msg;
        const auto message = [&](int u) {
            auto it = msg.find(u);
            if (it == msg.end())
                it = msg.emplace(u, ag::relu(t, ag::affine(t, vars.at(dir + ".msg.w"), state.at(u), vars.at(dir + ".msg.b")))).first;
            return it->second;
        };
        for (std::size_t k = 0; k < order.size(); ++k) {
            const int v = reverse ? order[order.size() - 1 - k] : order[k];
            ag::Var m = zero;
            if (const auto it = incoming.find(v); it != incoming.end()) {
                std::vector<ag::Var> terms;
                for (int u : it->second.src)
                    terms.push_back(message(u));
                m = ag::weighted_sum(t, terms, it->second.weight);
            }
            state[v] = gru(t, vars, dir, m, state.at(v), hd);
            msg.erase(v);
        }
    };
    for (int p = 0; p < ghn.config().passes; ++p) {
        traverse("fw", fw_in, false);
        traverse("bw", bw_in, true);
    }

    std::vector<ag::Var> out;
    for (const OpNode& n : g.nodes)
        out.push_back(state.at(n.id));
    return out;
}

// ---------------------------------------------------------------------------
// Decoder

std::vector<std::size_t> tile_indices(const Shape& target, const Shape& base)
{
    if (target.size() != base.size())
        throw ConfigError("tiling: rank mismatch " + shape_str(target) + " vs base " + shape_str(base));
    if (target.size() == 4 && target[2] > base[2])
        throw ConfigError("tiling: target kernel " + std::to_string(target[2]) + " exceeds base kernel " +
                          std::to_string(base[2]));
    const std::size_t rank = target.size();
    std::vector<std::size_t> idx(static_cast<std::size_t>(numel(target)));
    std::vector<std::int64_t> coord(rank, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::size_t flat = 0;
        for (std::size_t d = 0; d < rank; ++d)
            flat = flat * static_cast<std::size_t>(base[d]) + static_cast<std::size_t>(coord[d] % base[d]);
        idx[i] = flat;
        for (std::size_t d = rank; d-- > 0;) {
            if (++coord[d] < target[d])
                break;
            coord[d] = 0;
        }
    }
    return idx;
}

ParamVars decode_params(ag::Tape& t, const GhnModel& ghn, const GhnVars& vars, const std::vector<ag::Var>& states,
                        const ArchGraph& g, const ShapeMap& shapes)
{
    const Base base = base_shapes(ghn.config());
    std::map<std::pair<std::string, Shape>, std::shared_ptr<const std::vector<std::size_t>>> index_cache;
    const auto head = [&](const std::string& name, ag::Var state, const Shape& target) {
        const Shape& b = head_base(base, name);
        auto& idx = index_cache[{name, target}];
        if (!idx)
            idx = std::make_shared<const std::vector<std::size_t>>(tile_indices(target, b));
        return ag::affine_rows(t, vars.at("dec." + name + ".w"), state, vars.at("dec." + name + ".b"), idx, target);
    };

    ParamVars out;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const OpNode& n = g.nodes[i];
        const auto& ps = shapes.at(n.id).params;
        if (ps.empty())
            continue;
        auto& dst = out[n.id];
        const ag::Var h = states.at(i);
        try {
            switch (n.op) {
            case OpType::Conv:
                dst.push_back(ag::rms_normalize(t, head("conv", h, ps[0]),
                                                std::sqrt(2.0 / static_cast<double>(ps[0][1] * ps[0][2] * ps[0][3]))));
                break;
            case OpType::DWConv:
                dst.push_back(ag::rms_normalize(t, head("dw", h, ps[0]), std::sqrt(2.0 / static_cast<double>(ps[0][2] * ps[0][3]))));
                break;
            case OpType::Linear:
                dst.push_back(ag::rms_normalize(t, head("linear", h, ps[0]), std::sqrt(2.0 / static_cast<double>(ps[0][1]))));
                break;
            case OpType::BatchNorm:
                dst.push_back(ag::mean_shift(t, head("bn_gain", h, ps[0]), 1.0));
                dst.push_back(ag::mean_shift(t, head("bn_bias", h, ps[1]), 0.0));
                break;
            default:
                throw GraphError(n.id, "no decoder for op " + std::string(to_string(n.op)));
            }
        } catch (const ConfigError& e) {
            throw ConfigError("node " + std::to_string(n.id) + ": " + e.what());
        }
    }
    return out;
}

std::vector<Tensor> encode(const GhnModel& ghn, const ArchGraph& g)
{
    ag::Tape t;
    const GhnVars vars = bind_ghn(t, ghn);
    std::vector<Tensor> out;
    for (ag::Var v : encode(t, ghn, vars, g))
        out.push_back(t.value(v));
    return out;
}

ParamSet predict_parameters(const GhnModel& ghn, const ArchGraph& g, std::array<int, 3> input_chw)
{
    const ShapeMap shapes = infer_shapes(g, input_chw);
    ag::Tape t;
    const GhnVars vars = bind_ghn(t, ghn);
    const ParamVars pv = decode_params(t, ghn, vars, encode(t, ghn, vars, g), g, shapes);
    ParamSet p;
    p.source = ParamSource::Predicted;
    for (const auto& [id, vs] : pv)
        for (ag::Var v : vs)
            p.tensors[id].push_back(t.value(v));
    return p;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kMagic = "GHNQCKPT";

void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n)
            throw FormatError("truncated checkpoint: " + std::string(what) + " needs " + std::to_string(n) +
                              " bytes at offset " + std::to_string(pos_) + ", " + std::to_string(bytes_.size() - pos_) +
                              " left");
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint64_t u(std::size_t n, const char* what)
    {
        const auto s = take(n, what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
        return v;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_checkpoint(const Checkpoint& ckpt)
{
    std::string out(kMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.header_json.size()));
    out += ckpt.header_json;
    put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape)
            put_u64(out, static_cast<std::uint64_t>(d));
    }
    const std::size_t payload_start = out.size();
    for (const auto& [name, t] : ckpt.tensors)
        for (double v : t.data)
            put_u64(out, std::bit_cast<std::uint64_t>(v));
    put_u64(out, checksum_bytes(std::string_view(out).substr(payload_start)));
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes)
{
    Reader r(bytes);
    if (r.take(kMagic.size(), "magic") != kMagic)
        throw FormatError("not a ghnq checkpoint (bad magic)");
    const auto version = r.u(4, "version");
    if (version != kCheckpointVersion)
        throw FormatError("incompatible checkpoint version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
    Checkpoint ckpt;
    ckpt.header_json = std::string(r.take(r.u(4, "header length"), "header"));
    const auto count = r.u(4, "tensor count");
    std::vector<std::pair<std::string, Shape>> manifest;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name(r.take(r.u(4, "name length"), "tensor name"));
        const auto rank = r.u(4, "rank");
        if (rank > 8)
            throw FormatError("checkpoint tensor '" + name + "' has implausible rank " + std::to_string(rank));
        Shape shape;
        for (std::uint64_t d = 0; d < rank; ++d) {
            const auto dim = static_cast<std::int64_t>(r.u(8, "dimension"));
            if (dim < 0 || dim > (std::int64_t{1} << 32))
                throw FormatError("checkpoint tensor '" + name + "' has bad dimension");
            shape.push_back(dim);
        }
        manifest.emplace_back(std::move(name), std::move(shape));
    }
    const std::size_t payload_start = r.pos();
    for (auto& [name, shape] : manifest) {
        const auto n = static_cast<std::size_t>(numel(shape));
        if (r.remaining() < n * 8)
            throw FormatError("truncated checkpoint: payload of '" + name + "' at offset " + std::to_string(r.pos()));
        Tensor t(shape);
        for (std::size_t i = 0; i < n; ++i)
            t.data[i] = std::bit_cast<double>(r.u(8, "payload"));
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    const std::size_t payload_end = r.pos();
    const auto stored = r.u(8, "checksum");
    if (stored != checksum_bytes(bytes.substr(payload_start, payload_end - payload_start)))
        throw FormatError("checkpoint payload checksum mismatch");
    if (r.remaining() != 0)
        throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
    return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt)
{
    const std::string bytes = encode_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f || !f.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
        throw Error("cannot write checkpoint " + path);
}

Checkpoint read_checkpoint(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw Error("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return decode_checkpoint(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

void save_ghn(const GhnModel& ghn, const std::string& path, const std::string& extra_header, const NamedTensors& extra_tensors)
{
    json header = json::parse(extra_header);
    if (!header.is_object())
        throw Error("checkpoint extra header must be a JSON object");
    header["ghn"] = json::parse(ghn_config_to_json(ghn.config()));
    Checkpoint ckpt;
    ckpt.header_json = header.dump();
    ckpt.tensors = ghn.tensors();
    ckpt.tensors.insert(ckpt.tensors.end(), extra_tensors.begin(), extra_tensors.end());
    write_checkpoint(path, ckpt);
}

GhnModel ghn_from_checkpoint(const Checkpoint& ckpt)
{
    json header;
    try {
        header = json::parse(ckpt.header_json);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("ghn"))
        throw FormatError("checkpoint header has no ghn config");
    GhnModel m(ghn_config_from(header["ghn"]));
    std::map<std::string, const Tensor*> stored;
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.starts_with("opt."))
            continue;
        stored[name] = &t;
    }
    for (auto& [name, t] : m.tensors()) {
        const auto it = stored.find(name);
        if (it == stored.end())
            throw FormatError("checkpoint is missing tensor '" + name + "'");
        if (it->second->shape != t.shape)
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape) + ", expected " +
                              shape_str(t.shape));
        t = *it->second;
        stored.erase(it);
    }
    if (!stored.empty())
        throw FormatError("checkpoint has unexpected tensor '" + stored.begin()->first + "'");
    return m;
}

GhnModel load_ghn(const std::string& path)
{
    return ghn_from_checkpoint(read_checkpoint(path));
}

} // namespace ghnq

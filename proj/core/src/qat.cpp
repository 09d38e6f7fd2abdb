#include "ghnq/qat.hpp"

#include "ghnq/error.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <numeric>

namespace ghnq {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(AdamConfig cfg, const NamedTensors& params) : cfg_(cfg)
{
    for (const auto& [name, t] : params) {
        names_.push_back(name);
        m_.emplace_back(t.shape, 0.0);
        v_.emplace_back(t.shape, 0.0);
    }
}

void Adam::step(NamedTensors& params, std::span<const Tensor> grads)
{
    if (params.size() != names_.size() || grads.size() != names_.size())
        throw Error("adam: parameter layout changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < names_.size(); ++k) {
        Tensor& p = params[k].second;
        const Tensor& g = grads[k];
        if (g.size() != p.size())
            throw Error("adam: gradient size mismatch for " + names_[k]);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * g[i];
            v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * g[i] * g[i];
            const double mh = m_[k][i] / bc1;
            const double vh = v_[k][i] / bc2;
            p[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
}

NamedTensors Adam::state() const
{
    NamedTensors out;
    out.emplace_back("opt.step", Tensor({1}, static_cast<double>(t_)));
    for (std::size_t k = 0; k < names_.size(); ++k) {
        out.emplace_back("opt.m." + names_[k], m_[k]);
        out.emplace_back("opt.v." + names_[k], v_[k]);
    }
    return out;
}

void Adam::load_state(const NamedTensors& tensors)
{
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : tensors)
        by_name[name] = &t;
    const auto get = [&](const std::string& name, const Shape& shape) -> const Tensor& {
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw FormatError("checkpoint lacks optimizer tensor '" + name + "'");
        if (it->second->shape != shape)
            throw FormatError("optimizer tensor '" + name + "' has the wrong shape");
        return *it->second;
    };
    t_ = static_cast<std::int64_t>(get("opt.step", {1})[0]);
    for (std::size_t k = 0; k < names_.size(); ++k) {
        m_[k] = get("opt.m." + names_[k], m_[k].shape);
        v_[k] = get("opt.v." + names_[k], v_[k].shape);
    }
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const
{
    scheme.validate();
    if (epochs < 0)
        throw ConfigError("train: epochs must be non-negative");
    if (meta_batch <= 0 || batch_size <= 0)
        throw ConfigError("train: meta_batch and batch_size must be positive");
    if (!(adam.lr > 0) || !(adam.eps > 0) || adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1)
        throw ConfigError("train: invalid optimizer settings");
    if (!(clip_norm > 0))
        throw ConfigError("train: clip_norm must be positive");
    if (checkpoint_every < 0 || max_consecutive_aborts < 0)
        throw ConfigError("train: checkpoint_every and max_consecutive_aborts must be non-negative");
    if (scheme.mode == QuantMode::SimQuant && (scheme.weight_bits <= 2 || scheme.act_bits <= 2) && !allow_unstable)
        throw UsageError("SimQuant at " + scheme.label() + " is unstable; use noisequant or pass --allow-unstable");
    ghn.validate();
}

ParsedTrainConfig parse_train_config(std::string_view json_text)
{
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    if (!j.is_object())
        throw ConfigError("train config must be a JSON object");
    // A combined config file carries "graphs", "synth" and "train" sections.
    if (j.contains("train")) {
        for (const auto& [key, value] : j.items())
            if (key != "train" && key != "synth" && key != "graphs")
                throw ConfigError("train config: unknown section '" + key + "'");
        json inner = j["train"];
        if (j.contains("synth"))
            inner["synth"] = j["synth"];
        j = std::move(inner);
    }
    ParsedTrainConfig out;
    TrainConfig& cfg = out.cfg;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "epochs")
                cfg.epochs = value.get<int>();
            else if (key == "meta_batch")
                cfg.meta_batch = value.get<int>();
            else if (key == "batch_size")
                cfg.batch_size = value.get<int>();
            else if (key == "lr")
                cfg.adam.lr = value.get<double>();
            else if (key == "betas") {
                const auto b = value.get<std::array<double, 2>>();
                cfg.adam.beta1 = b[0];
                cfg.adam.beta2 = b[1];
            } else if (key == "eps")
                cfg.adam.eps = value.get<double>();
            else if (key == "clip_norm")
                cfg.clip_norm = value.get<double>();
            else if (key == "seed")
                cfg.seed = value.get<std::uint64_t>();
            else if (key == "checkpoint_every")
                cfg.checkpoint_every = value.get<int>();
            else if (key == "max_consecutive_aborts")
                cfg.max_consecutive_aborts = value.get<int>();
            else if (key == "allow_unstable")
                cfg.allow_unstable = value.get<bool>();
            else if (key == "ghn")
                cfg.ghn = parse_ghn_config(value.dump());
            else if (key == "scheme")
                out.scheme = value.get<std::string>();
            else if (key == "mode")
                out.mode = parse_quant_mode(value.get<std::string>());
            else if (key == "synth")
                out.synth_json = value.dump();
            else
                throw ConfigError("train config: unknown key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("train config: bad value for '" + key + "': " + e.what());
        }
    }
    return out;
}

std::string train_config_to_json(const TrainConfig& cfg)
{
    ordered_json j;
    j["scheme"] = cfg.scheme.name();
    j["mode"] = std::string(to_string(cfg.scheme.mode));
    j["epochs"] = cfg.epochs;
    j["meta_batch"] = cfg.meta_batch;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.adam.lr;
    j["betas"] = {cfg.adam.beta1, cfg.adam.beta2};
    j["eps"] = cfg.adam.eps;
    j["clip_norm"] = cfg.clip_norm;
    j["seed"] = cfg.seed;
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["max_consecutive_aborts"] = cfg.max_consecutive_aborts;
    j["allow_unstable"] = cfg.allow_unstable;
    j["ghn"] = json::parse(ghn_config_to_json(cfg.ghn));
    return j.dump();
}

// ---------------------------------------------------------------------------
// Steps

GraphLoss ghn_loss_and_grad(const GhnModel& ghn, const ArchGraph& g, const Tensor& images, std::span<const int> labels,
                            const QuantScheme& scheme, std::uint64_t noise_seed)
{
    const std::array<int, 3> chw{static_cast<int>(images.dim(1)), static_cast<int>(images.dim(2)), static_cast<int>(images.dim(3))};
    const ShapeMap shapes = infer_shapes(g, chw);
    ag::Tape t;
    const GhnVars vars = bind_ghn(t, ghn);
    const ParamVars params = decode_params(t, ghn, vars, encode(t, ghn, vars, g), g, shapes);
    ForwardOptions opts;
    opts.noise_seed = noise_seed;
    const ag::Var logits = build_cnn(t, g, params, t.constant(images), scheme, opts);
    const ag::Var loss = ag::cross_entropy(t, logits, labels);
    GraphLoss out;
    out.loss = t.value(loss)[0];
    if (!std::isfinite(out.loss))
        throw NumericError(g.output_id(), "non-finite loss");
    t.backward(loss);
    for (const auto& [name, tensor] : ghn.tensors()) {
        const Tensor& gr = t.grad(vars.at(name));
        out.grads.push_back(gr.empty() ? Tensor(tensor.shape, 0.0) : gr);
    }
    return out;
}

StepResult train_step(GhnModel& ghn, Adam& opt, std::span<const ArchGraph* const> graphs, const Tensor& images,
                      std::span<const int> labels, const TrainConfig& cfg, std::uint64_t step)
{
    StepResult r;
    if (graphs.empty())
        throw Error("train_step: empty meta-batch");
    std::vector<Tensor> acc;
    for (const auto& [name, t] : ghn.tensors())
        acc.emplace_back(t.shape, 0.0);
    double loss_sum = 0.0;
    // Fixed reduction order: graphs in meta-batch order.
    for (const ArchGraph* g : graphs) {
        const std::uint64_t noise_seed = mix_seed(mix_seed(cfg.seed, step), g->seed);
        try {
            GraphLoss gl = ghn_loss_and_grad(ghn, *g, images, labels, cfg.scheme, noise_seed);
            bool finite = true;
            for (const auto& gr : gl.grads)
                finite = finite && all_finite(gr.values());
            if (!finite)
                throw NumericError(g->output_id(), "non-finite gradient");
            loss_sum += gl.loss;
            for (std::size_t k = 0; k < acc.size(); ++k)
                for (std::size_t i = 0; i < acc[k].size(); ++i)
                    acc[k][i] += gl.grads[k][i];
        } catch (const NumericError& e) {
            r.aborted = true;
            r.bad_graphs.push_back(g->graph_id);
            if (r.reason.empty())
                r.reason = std::string("graph ") + std::to_string(g->graph_id) + ": " + e.what();
        }
    }
    if (r.aborted) {
        r.loss = std::nan("");
        return r;
    }
    const double inv = 1.0 / static_cast<double>(graphs.size());
    double sq = 0.0;
    for (auto& t : acc)
        for (auto& v : t.data) {
            v *= inv;
            sq += v * v;
        }
    r.loss = loss_sum * inv;
    r.grad_norm = std::sqrt(sq);
    if (r.grad_norm > cfg.clip_norm) {
        r.clipped = true;
        const double s = cfg.clip_norm / r.grad_norm;
        for (auto& t : acc)
            for (auto& v : t.data)
                v *= s;
    }
    opt.step(ghn.tensors(), acc);
    return r;
}

// ---------------------------------------------------------------------------
// Log

void TrainLog::append(std::string record_json)
{
    records_.push_back(std::move(record_json));
}

std::string TrainLog::text() const
{
    std::string out;
    for (const auto& r : records_)
        out += r + "\n";
    return out;
}

std::vector<std::string> TrainLog::of_type(std::string_view type) const
{
    std::vector<std::string> out;
    for (const auto& r : records_)
        if (json::parse(r).value("type", "") == type)
            out.push_back(r);
    return out;
}

std::string_view to_string(RunStatus s)
{
    return s == RunStatus::Completed ? "completed" : "aborted";
}

bool TrainOutcome::loss_decreased() const
{
    return epoch_losses.size() >= 2 && epoch_losses.back() < epoch_losses.front();
}

namespace {

// JSON cannot carry NaN; non-finite losses are logged as null.
json number_or_null(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

} // namespace

TrainOutcome qat_finetune(GhnModel& ghn, const std::vector<ArchGraph>& graphs, const ImageDataset& data,
                          const TrainConfig& cfg, const TrainHooks& hooks, Adam* resume_opt, std::optional<TrainState> resume)
{
    cfg.validate();
    if (ghn.config() != cfg.ghn)
        throw ConfigError("train: GHN config differs from the train config");
    TrainOutcome out;
    const auto emit = [&](const ordered_json& j) {
        std::string s = j.dump();
        if (hooks.on_record)
            hooks.on_record(s);
        out.log.append(std::move(s));
    };

    Adam local(cfg.adam, ghn.tensors());
    Adam& opt = resume_opt ? *resume_opt : local;
    TrainState state = resume.value_or(TrainState{});

    const auto checkpoint = [&](RunStatus status, const TrainOutcome* outcome) {
        if (!hooks.checkpoint_path.empty())
            save_training_checkpoint(hooks.checkpoint_path, ghn, opt, cfg, state, status, hooks.provenance_json, outcome);
    };

    if (cfg.epochs == 0 || state.epochs_done >= cfg.epochs) {
        out.state = state;
        return out;
    }
    if (graphs.empty())
        throw Error("train: no training graphs");
    const std::size_t nb = full_batches(data.train, static_cast<std::size_t>(cfg.batch_size));
    if (nb == 0)
        throw Error("train: fewer training images than one batch of " + std::to_string(cfg.batch_size));
    for (const auto& g : graphs)
        validate(g);

    {
        ordered_json run;
        run["type"] = "run";
        run["scheme"] = cfg.scheme.name();
        run["mode"] = std::string(to_string(cfg.scheme.mode));
        run["config"] = json::parse(train_config_to_json(cfg));
        run["graphs"] = graphs.size();
        run["start_epoch"] = state.epochs_done;
        emit(run);
    }

    const auto mb = static_cast<std::size_t>(cfg.meta_batch);
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, graphs.size() / mb);
    int consecutive_aborts = 0;

    for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(graphs.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(cfg.seed, 0xe0c0000000000000ull + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        double epoch_loss = 0.0;
        int good_steps = 0, bad_steps = 0;
        for (std::size_t k = 0; k < steps_per_epoch; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<const ArchGraph*> batch;
            for (std::size_t i = k * mb; i < std::min(order.size(), (k + 1) * mb); ++i)
                batch.push_back(&graphs[order[i]]);
            const std::size_t b = state.step % nb;
            const Tensor images = data.batch(data.train, b * static_cast<std::size_t>(cfg.batch_size), static_cast<std::size_t>(cfg.batch_size));
            const std::vector<int> labels = data.labels(data.train, b * static_cast<std::size_t>(cfg.batch_size), static_cast<std::size_t>(cfg.batch_size));
            const StepResult r = train_step(ghn, opt, batch, images, labels, cfg, state.step);

            ordered_json rec;
            rec["type"] = r.aborted ? "abort" : "step";
            rec["epoch"] = epoch;
            rec["step"] = state.step;
            rec["loss"] = number_or_null(r.loss);
            if (r.aborted) {
                rec["graphs"] = r.bad_graphs;
                rec["reason"] = r.reason;
            } else {
                rec["grad_norm"] = r.grad_norm;
                rec["clipped"] = r.clipped;
            }
            if (hooks.log_wall_time)
                rec["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            emit(rec);
            ++state.step;

            if (r.aborted) {
                ++bad_steps;
                ++out.aborted_steps;
                if (++consecutive_aborts > cfg.max_consecutive_aborts) {
                    out.status = RunStatus::Aborted;
                    out.reason = std::to_string(consecutive_aborts) + " consecutive non-finite steps (last: " + r.reason + ")";
                    break;
                }
            } else {
                consecutive_aborts = 0;
                epoch_loss += r.loss;
                ++good_steps;
            }
        }
        const double mean_loss = good_steps ? epoch_loss / good_steps : std::nan("");
        out.epoch_losses.push_back(mean_loss);
        ordered_json rec;
        rec["type"] = "epoch";
        rec["epoch"] = epoch;
        rec["mean_loss"] = number_or_null(mean_loss);
        rec["steps"] = good_steps;
        rec["aborted_steps"] = bad_steps;
        emit(rec);

        if (out.status == RunStatus::Aborted)
            break;
        state.epochs_done = epoch + 1;
        if (cfg.checkpoint_every > 0 && state.epochs_done % cfg.checkpoint_every == 0 && state.epochs_done < cfg.epochs)
            checkpoint(RunStatus::Completed, nullptr);
    }

    ordered_json end;
    end["type"] = "end";
    end["status"] = std::string(to_string(out.status));
    if (!out.reason.empty())
        end["reason"] = out.reason;
    end["epochs_done"] = state.epochs_done;
    end["steps"] = state.step;
    end["aborted_steps"] = out.aborted_steps;
    end["loss_decreased"] = out.loss_decreased();
    end["ghn_checksum"] = hex64(ghn.checksum());
    emit(end);

    out.state = state;
    checkpoint(out.status, &out);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_training_checkpoint(const std::string& path, const GhnModel& ghn, const Adam& opt, const TrainConfig& cfg,
                              const TrainState& state, RunStatus status, const std::string& provenance_json,
                              const TrainOutcome* outcome)
{
    ordered_json header;
    header["scheme"] = cfg.scheme.name();
    header["mode"] = std::string(to_string(cfg.scheme.mode));
    header["train"] = json::parse(train_config_to_json(cfg));
    header["state"] = {{"epochs_done", state.epochs_done}, {"step", state.step}, {"status", std::string(to_string(status))}};
    if (!provenance_json.empty())
        header["provenance"] = ordered_json::parse(provenance_json);
    if (outcome) {
        ordered_json o;
        o["status"] = std::string(to_string(outcome->status));
        o["epochs_done"] = outcome->state.epochs_done;
        o["steps"] = outcome->state.step;
        o["aborted_steps"] = outcome->aborted_steps;
        o["loss_decreased"] = outcome->loss_decreased();
        ordered_json losses = ordered_json::array();
        for (double v : outcome->epoch_losses)
            losses.push_back(std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr));
        o["epoch_losses"] = losses;
        if (!outcome->reason.empty())
            o["reason"] = outcome->reason;
        header["outcome"] = o;
    }
    save_ghn(ghn, path, header.dump(), opt.state());
}

std::optional<CheckpointScheme> checkpoint_scheme(const Checkpoint& ckpt)
{
    const json header = json::parse(ckpt.header_json, nullptr, false);
    if (header.is_discarded() || !header.contains("scheme"))
        return std::nullopt;
    CheckpointScheme s;
    s.scheme = header["scheme"].get<std::string>();
    if (header.contains("mode"))
        s.mode = parse_quant_mode(header["mode"].get<std::string>());
    return s;
}

std::optional<std::string> checkpoint_outcome_json(const Checkpoint& ckpt)
{
    const ordered_json header = ordered_json::parse(ckpt.header_json, nullptr, false);
    if (header.is_discarded() || !header.contains("outcome"))
        return std::nullopt;
    return header["outcome"].dump();
}

LoadedTraining load_training_checkpoint(const std::string& path, const AdamConfig& adam)
{
    const Checkpoint ckpt = read_checkpoint(path);
    LoadedTraining out;
    out.ghn = ghn_from_checkpoint(ckpt);
    out.opt = Adam(adam, out.ghn.tensors());
    out.opt.load_state(ckpt.tensors);
    const json header = json::parse(ckpt.header_json);
    if (!header.contains("state"))
        throw FormatError(path + ": not a training checkpoint (no train state)");
    out.state.epochs_done = header["state"].value("epochs_done", 0);
    out.state.step = header["state"].value("step", std::uint64_t{0});
    out.status = header["state"].value("status", std::string("completed"));
    if (const auto s = checkpoint_scheme(ckpt)) {
        out.scheme = s->scheme;
        out.mode = s->mode;
    }
    return out;
}

} // namespace ghnq

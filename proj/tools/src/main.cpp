#include "manifest.hpp"

#include "ghnq/archspace.hpp"
#include "ghnq/data.hpp"
#include "ghnq/error.hpp"
#include "ghnq/ghn.hpp"
#include "ghnq/harness.hpp"
#include "ghnq/qat.hpp"
#include "ghnq/quant_conformance.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

namespace ghnq::cli {
namespace {

using nlohmann::json;

constexpr int kOk = 0;
constexpr int kDomainError = 1;
constexpr int kUsageError = 2;

// GHN initialization draws from its own stream of the training seed.
constexpr std::uint64_t kGhnInitStream = 0x6768'6e69'6e69'7400ull;

struct DataSpec {
    std::string source; // "synth" or a CIFAR-10 directory
    std::string synth_json = "{}";
};

ImageDataset load_data(const DataSpec& spec)
{
    if (spec.source == "synth")
        return synth_dataset(parse_synth_config(spec.synth_json));
    if (!std::filesystem::is_directory(spec.source))
        throw UsageError("--data must be 'synth' or a CIFAR-10 directory, got '" + spec.source + "'");
    return load_cifar10(spec.source);
}

json data_provenance(const DataSpec& spec, const ImageDataset& data)
{
    json j;
    j["source"] = spec.source;
    if (spec.source == "synth")
        j["synth"] = json::parse(synth_config_to_json(parse_synth_config(spec.synth_json)));
    j["checksum"] = hex64(checksum(data));
    j["num_classes"] = data.num_classes;
    j["train_images"] = data.train.labels.size();
    j["test_images"] = data.test.labels.size();
    return j;
}

std::vector<ArchGraph> read_graphs(const std::string& path)
{
    return deserialize_dataset(read_file(path));
}

// Graphs and images must agree on the input shape and class count.
void check_compatible(const std::vector<ArchGraph>& graphs, const ImageDataset& data)
{
    for (const auto& g : graphs) {
        for (const auto& n : g.nodes) {
            if (n.op == OpType::Linear && n.out_channels != data.num_classes)
                throw ConfigError("graph " + std::to_string(g.graph_id) + " predicts " + std::to_string(n.out_channels) +
                                  " classes but the dataset has " + std::to_string(data.num_classes));
        }
    }
}

std::vector<Split> parse_splits(const std::string& text)
{
    std::vector<Split> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty())
            continue;
        const Split s = parse_split(item);
        if (s == Split::Train)
            throw UsageError("--splits: the train split is not an evaluation split");
        if (std::find(out.begin(), out.end(), s) == out.end())
            out.push_back(s);
    }
    if (out.empty())
        throw UsageError("--splits is empty");
    return out;
}

// ---------------------------------------------------------------------------

struct GenGraphsArgs {
    std::string config;
    std::string out;
};

int gen_graphs(const GenGraphsArgs& a)
{
    const GenConfig cfg = parse_gen_config(read_file(a.config));
    const auto graphs = generate_dataset(cfg);
    write_file(a.out, serialize_dataset(graphs));

    Manifest m("gen-graphs");
    m.config(json::parse(gen_config_to_json(cfg)));
    m.seed("graphs", cfg.seed);
    m.input("config", a.config);
    m.output("graphs", a.out);
    m.write(with_suffix(a.out, ".manifest.json"));

    for (Split s : {Split::Train, Split::IDTest, Split::OODDeep, Split::OODWide, Split::OODBNFree})
        std::cout << to_string(s) << ": " << select_split(graphs, s).size() << " graphs\n";
    std::cout << "wrote " << a.out << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string graphs;
    std::string data;
    std::string scheme;
    std::string mode;
    std::string config;
    std::string out;
    bool allow_unstable = false;
    bool resume = false;
    bool log_wall_time = false;
    bool quiet = false;
};

int train(const TrainArgs& a)
{
    ParsedTrainConfig parsed = parse_train_config(a.config.empty() ? std::string("{}") : read_file(a.config));
    TrainConfig cfg = parsed.cfg;

    if (!a.scheme.empty() && parsed.scheme && *parsed.scheme != QuantScheme::parse(a.scheme, QuantMode::SimQuant).name())
        throw UsageError("contradictory schemes: --scheme " + a.scheme + " but the config says " + *parsed.scheme);
    const std::string scheme_name = !a.scheme.empty() ? a.scheme : parsed.scheme.value_or("");
    if (scheme_name.empty())
        throw UsageError("train needs --scheme (or \"scheme\" in the config)");

    std::optional<QuantMode> mode;
    if (!a.mode.empty())
        mode = parse_quant_mode(a.mode);
    if (mode && parsed.mode && *mode != *parsed.mode)
        throw UsageError("contradictory modes: --mode " + a.mode + " but the config says " + to_string(*parsed.mode));
    if (!mode)
        mode = parsed.mode;
    QuantScheme scheme = QuantScheme::parse(scheme_name, QuantMode::SimQuant);
    // 2-bit SimQuant is unstable; without an explicit mode, 2-bit runs use NoiseQuant.
    if (!mode)
        mode = std::min(scheme.weight_bits, scheme.act_bits) <= 2 ? QuantMode::NoiseQuant : QuantMode::SimQuant;
    scheme.mode = *mode;
    cfg.scheme = scheme;
    cfg.allow_unstable = cfg.allow_unstable || a.allow_unstable;
    cfg.validate();

    const DataSpec spec{a.data, parsed.synth_json};
    const ImageDataset data = load_data(spec);
    const auto all = read_graphs(a.graphs);
    const auto graphs = select_split(all, Split::Train);
    if (graphs.empty())
        throw ConfigError(a.graphs + " contains no train-split graphs");
    check_compatible(graphs, data);

    GhnModel ghn = [&] {
        Rng rng(mix_seed(cfg.seed, kGhnInitStream));
        return init_ghn(cfg.ghn, rng);
    }();
    std::optional<LoadedTraining> loaded;
    if (a.resume && std::filesystem::exists(a.out)) {
        loaded = load_training_checkpoint(a.out, cfg.adam);
        if (loaded->scheme != scheme.name() || loaded->mode != scheme.mode)
            throw UsageError("cannot resume " + a.out + ": it was trained as " + loaded->scheme + " " + to_string(loaded->mode));
        ghn = loaded->ghn;
        std::cout << "resuming from epoch " << loaded->state.epochs_done << "\n";
    }

    json provenance;
    provenance["graphs"] = {{"path", a.graphs}, {"checksum", file_checksum(a.graphs)}, {"train_graphs", graphs.size()}};
    provenance["data"] = data_provenance(spec, data);
    provenance["ghn_init_seed"] = mix_seed(cfg.seed, kGhnInitStream);

    const std::string log_path = with_suffix(a.out, ".log.jsonl");
    std::string log_text;
    if (loaded && std::filesystem::exists(log_path))
        log_text = read_file(log_path);

    TrainHooks hooks;
    hooks.checkpoint_path = a.out;
    hooks.log_wall_time = a.log_wall_time;
    hooks.provenance_json = provenance.dump();
    hooks.on_record = [&](const std::string& rec) {
        log_text += rec + "\n";
        if (!a.quiet && rec.find("\"type\":\"step\"") == std::string::npos)
            std::cout << rec << "\n";
    };
    const TrainOutcome out = loaded ? qat_finetune(ghn, graphs, data, cfg, hooks, &loaded->opt, loaded->state)
                                    : qat_finetune(ghn, graphs, data, cfg, hooks);
    if (out.log.records().empty()) // nothing to do (zero epochs or already finished)
        save_training_checkpoint(a.out, ghn, loaded ? loaded->opt : Adam(cfg.adam, ghn.tensors()), cfg, out.state,
                                 RunStatus::Completed, hooks.provenance_json, &out);
    write_file(log_path, log_text);

    Manifest m("train");
    json run_cfg;
    run_cfg["train"] = json::parse(train_config_to_json(cfg));
    if (spec.source == "synth")
        run_cfg["synth"] = provenance["data"]["synth"];
    m.config(run_cfg);
    m.seed("train", cfg.seed);
    m.seed("ghn_init", mix_seed(cfg.seed, kGhnInitStream));
    if (spec.source == "synth")
        m.seed("synth", parse_synth_config(spec.synth_json).seed);
    if (!a.config.empty())
        m.input("config", a.config);
    m.input("graphs", a.graphs);
    m.set("data", provenance["data"]);
    m.output("checkpoint", a.out);
    m.output("log", log_path);
    m.set("result", {{"status", std::string(to_string(out.status))},
                     {"steps", out.state.step},
                     {"aborted_steps", out.aborted_steps},
                     {"loss_decreased", out.loss_decreased()},
                     {"ghn_checksum", hex64(ghn.checksum())}});
    m.write(with_suffix(a.out, ".manifest.json"));

    std::cout << "checkpoint " << a.out << " ghn_checksum " << hex64(ghn.checksum()) << "\n";
    if (out.status == RunStatus::Aborted) {
        std::cerr << "ghnq: training aborted: " << out.reason << "\n";
        return kDomainError;
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string graphs;
    std::string splits = "id,deep,wide,bnfree";
    std::string scheme;
    std::string data;
    std::string report;
    std::size_t batch_size = 64;
    std::size_t max_images = 0;
};

TrainingNote note_from_checkpoint(const Checkpoint& ckpt)
{
    TrainingNote n;
    const auto s = checkpoint_scheme(ckpt);
    n.scheme = s ? s->scheme : "";
    n.mode = s ? to_string(s->mode) : "";
    const json o = json::parse(*checkpoint_outcome_json(ckpt));
    n.status = o.at("status");
    n.epochs_done = o.value("epochs_done", 0);
    n.steps = o.value("steps", std::uint64_t{0});
    n.aborted_steps = o.value("aborted_steps", 0);
    n.loss_decreased = o.value("loss_decreased", false);
    for (const auto& v : o.value("epoch_losses", json::array()))
        n.epoch_losses.push_back(v.is_null() ? std::nan("") : v.get<double>());
    n.reason = o.value("reason", "");
    return n;
}

int eval(const EvalArgs& a)
{
    const Checkpoint ckpt = read_checkpoint(a.ckpt);
    const GhnModel ghn = ghn_from_checkpoint(ckpt);
    const json header = json::parse(ckpt.header_json);
    const auto trained = checkpoint_scheme(ckpt);

    const std::string scheme_name = !a.scheme.empty() ? a.scheme : trained ? trained->scheme : "";
    if (scheme_name.empty())
        throw UsageError("eval needs --scheme: " + a.ckpt + " does not record one");
    // Evaluation always simulates integer inference.
    const QuantScheme scheme = QuantScheme::parse(scheme_name, QuantMode::SimQuant);

    DataSpec spec;
    if (!a.data.empty()) {
        spec.source = a.data;
    } else if (header.contains("provenance")) {
        const json& d = header["provenance"]["data"];
        spec.source = d.at("source");
        if (d.contains("synth"))
            spec.synth_json = d["synth"].dump();
    } else {
        throw UsageError("eval needs --data: " + a.ckpt + " does not record its dataset");
    }
    if (spec.source == "synth" && !a.data.empty() && header.contains("provenance") && header["provenance"]["data"].contains("synth"))
        spec.synth_json = header["provenance"]["data"]["synth"].dump();
    const ImageDataset data = load_data(spec);

    const auto all = read_graphs(a.graphs);
    const auto splits = parse_splits(a.splits);
    EvalOptions opts;
    opts.batch_size = a.batch_size;
    opts.max_images = a.max_images;

    std::vector<SummaryCell> cells;
    std::vector<GraphEval> per_graph;
    for (Split s : splits) {
        const auto graphs = select_split(all, s);
        check_compatible(graphs, data);
        const auto evals = evaluate_split(ghn, graphs, data, scheme, opts);
        if (evals.empty()) {
            std::cerr << "ghnq: warning: no " << to_string(s) << " graphs in " << a.graphs << "\n";
            continue;
        }
        for (auto& c : summarize_split(evals, s, scheme, trained ? trained->scheme : "", trained ? to_string(trained->mode) : ""))
            cells.push_back(std::move(c));
        per_graph.insert(per_graph.end(), evals.begin(), evals.end());
    }

    SummaryFile summary{cells, {}};
    if (checkpoint_outcome_json(ckpt))
        summary.notes.push_back(note_from_checkpoint(ckpt));

    const std::string report_text = render_report(summary);
    const std::string summary_path = with_suffix(a.report, ".summary.jsonl");
    const std::string graphs_path = with_suffix(a.report, ".graphs.jsonl");
    write_file(a.report, report_text);
    write_file(summary_path, summary_to_jsonl(summary.cells, summary.notes));
    write_file(graphs_path, graph_evals_to_jsonl(per_graph));

    Manifest m("eval");
    json cfg;
    cfg["scheme"] = scheme.name();
    cfg["mode"] = to_string(scheme.mode);
    cfg["splits"] = a.splits;
    cfg["batch_size"] = a.batch_size;
    cfg["max_images"] = a.max_images;
    m.config(cfg);
    if (header.contains("train"))
        m.seed("train", header["train"].value("seed", std::uint64_t{0}));
    m.input("checkpoint", a.ckpt);
    m.input("graphs", a.graphs);
    m.set("data", data_provenance(spec, data));
    m.set("ghn_checksum", hex64(ghn.checksum()));
    m.output("report", a.report);
    m.output("summary", summary_path);
    m.output("per_graph", graphs_path);
    m.write(with_suffix(a.report, ".manifest.json"));

    std::cout << report_text;
    return kOk;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

int report(const ReportArgs& a)
{
    SummaryFile merged;
    for (const auto& path : a.inputs) {
        SummaryFile f;
        try {
            f = parse_summary_jsonl(read_file(path));
        } catch (const FormatError& e) {
            throw FormatError(path + ": " + e.what());
        }
        merged.cells.insert(merged.cells.end(), f.cells.begin(), f.cells.end());
        merged.notes.insert(merged.notes.end(), f.notes.begin(), f.notes.end());
    }
    const std::string text = render_report(merged);
    if (a.out.empty()) {
        std::cout << text;
        return kOk;
    }
    write_file(a.out, text);
    Manifest m("report");
    json inputs = json::array();
    for (const auto& p : a.inputs)
        inputs.push_back(p);
    m.config({{"inputs", inputs}});
    for (std::size_t i = 0; i < a.inputs.size(); ++i)
        m.input("summary_" + std::to_string(i), a.inputs[i]);
    m.output("report", a.out);
    m.write(with_suffix(a.out, ".manifest.json"));
    std::cout << text;
    return kOk;
}

// ---------------------------------------------------------------------------

struct QuantCheckArgs {
    std::size_t tensors = 10000;
    std::uint64_t seed = 1;
};

int quant_check(const QuantCheckArgs& a)
{
    const ConformanceReport r = run_quant_conformance(a.tensors, a.seed);
    std::cout << r.to_text();
    std::cout << (r.passed() ? "PASS" : "FAIL") << "\n";
    return r.passed() ? kOk : kDomainError;
}

} // namespace
} // namespace ghnq::cli

int main(int argc, char** argv)
{
    using namespace ghnq::cli;
    CLI::App app{"Quantization-aware graph hypernetwork toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", GHNQ_VERSION);

    GenGraphsArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-graphs", "Sample a graph dataset with train and test splits");
    gen_cmd->add_option("--config", gen.config, "Graph generator config (JSON)")->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("--out", gen.out, "Output graph dataset")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Quantization-aware finetuning of the hypernetwork");
    train_cmd->add_option("--graphs", tr.graphs, "Graph dataset")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--data", tr.data, "'synth' or a CIFAR-10 binary directory")->required();
    train_cmd->add_option("--scheme", tr.scheme, "W4A4, W4A8, W2A2, ...");
    train_cmd->add_option("--mode", tr.mode, "simquant or noisequant")->check(CLI::IsMember({"simquant", "noisequant", "none"}));
    train_cmd->add_option("--config", tr.config, "Training config (JSON)")->check(CLI::ExistingFile);
    train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
    train_cmd->add_flag("--allow-unstable", tr.allow_unstable, "Permit SimQuant at 2 bits");
    train_cmd->add_flag("--resume", tr.resume, "Continue from --out if it exists");
    train_cmd->add_flag("--log-wall-time", tr.log_wall_time, "Record per-step wall time in the log");
    train_cmd->add_flag("-q,--quiet", tr.quiet, "Do not echo log records");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate predicted networks on test splits");
    eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--graphs", ev.graphs, "Graph dataset")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--splits", ev.splits, "Comma-separated subset of id,deep,wide,bnfree")->capture_default_str();
    eval_cmd->add_option("--scheme", ev.scheme, "Evaluation bitwidths (default: the trained scheme)");
    eval_cmd->add_option("--data", ev.data, "Override the dataset recorded in the checkpoint");
    eval_cmd->add_option("--report", ev.report, "Report path")->required();
    eval_cmd->add_option("--batch-size", ev.batch_size, "Evaluation batch size")->capture_default_str()->check(CLI::PositiveNumber);
    eval_cmd->add_option("--max-images", ev.max_images, "Cap on test images (0: all)")->capture_default_str();

    ReportArgs rep;
    auto* report_cmd = app.add_subcommand("report", "Merge evaluation summaries into one report");
    report_cmd->add_option("--inputs", rep.inputs, "Summary files written by eval")->required()->check(CLI::ExistingFile);
    report_cmd->add_option("--out", rep.out, "Write the report here as well as to stdout");

    QuantCheckArgs qc;
    auto* qc_cmd = app.add_subcommand("quant-check", "Run the quantizer conformance suite");
    qc_cmd->add_option("--tensors", qc.tensors, "Random tensors per bitwidth")->capture_default_str()->check(CLI::PositiveNumber);
    qc_cmd->add_option("--seed", qc.seed, "Seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsageError;
    }

    try {
        if (*gen_cmd)
            return gen_graphs(gen);
        if (*train_cmd)
            return train(tr);
        if (*eval_cmd)
            return eval(ev);
        if (*report_cmd)
            return report(rep);
        if (*qc_cmd)
            return quant_check(qc);
    } catch (const ghnq::UsageError& e) {
        std::cerr << "ghnq: usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const ghnq::Error& e) {
        std::cerr << "ghnq: error: " << e.what() << "\n";
        return kDomainError;
    } catch (const std::exception& e) {
        std::cerr << "ghnq: error: " << e.what() << "\n";
        return kDomainError;
    }
    return kUsageError;
}

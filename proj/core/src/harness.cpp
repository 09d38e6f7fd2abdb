#include "ghnq/harness.hpp"

#include "ghnq/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

namespace ghnq {

using nlohmann::json;
using nlohmann::ordered_json;

std::vector<bool> topk_hits(const Tensor& logits, std::span<const int> labels, int k)
{
    if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
        throw Error("topk: logits " + shape_str(logits.shape) + " do not match " + std::to_string(labels.size()) + " labels");
    if (k < 1)
        throw Error("topk: k must be positive");
    const auto n = static_cast<std::size_t>(logits.dim(0));
    const auto c = static_cast<std::size_t>(logits.dim(1));
    std::vector<bool> hits(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        if (labels[i] < 0 || y >= c)
            throw Error("topk: label out of range");
        const double* row = &logits.data[i * c];
        std::size_t rank = 0;
        for (std::size_t j = 0; j < c; ++j)
            if (row[j] > row[y] || (row[j] == row[y] && j < y))
                ++rank;
        hits[i] = rank < static_cast<std::size_t>(k);
    }
    return hits;
}

double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k)
{
    const auto hits = topk_hits(logits, labels, k);
    if (hits.empty())
        return 0.0;
    return static_cast<double>(std::count(hits.begin(), hits.end(), true)) / static_cast<double>(hits.size());
}

std::vector<GraphEval> evaluate_split(const GhnModel& ghn, const std::vector<ArchGraph>& graphs, const ImageDataset& data,
                                      const QuantScheme& scheme, const EvalOptions& opts)
{
    std::vector<GraphEval> out;
    if (graphs.empty())
        return out;
    std::size_t batches = full_batches(data.test, opts.batch_size);
    if (opts.max_images)
        batches = std::min(batches, opts.max_images / opts.batch_size);
    if (batches == 0)
        throw Error("eval: fewer test images than one batch of " + std::to_string(opts.batch_size));

    std::vector<Tensor> images;
    std::vector<std::vector<int>> labels;
    for (std::size_t b = 0; b < batches; ++b) {
        images.push_back(data.batch(data.test, b * opts.batch_size, opts.batch_size));
        labels.push_back(data.labels(data.test, b * opts.batch_size, opts.batch_size));
    }

    for (const ArchGraph& g : graphs) {
        GraphEval e;
        e.graph_id = g.graph_id;
        e.split = g.split;
        try {
            const ParamSet p = predict_parameters(ghn, g, data.test.chw);
            std::size_t hit1 = 0, hit5 = 0, total = 0;
            for (std::size_t b = 0; b < batches; ++b) {
                const Tensor logits = forward_cnn(g, p, images[b], scheme);
                const auto h1 = topk_hits(logits, labels[b], 1);
                const auto h5 = topk_hits(logits, labels[b], 5);
                hit1 += static_cast<std::size_t>(std::count(h1.begin(), h1.end(), true));
                hit5 += static_cast<std::size_t>(std::count(h5.begin(), h5.end(), true));
                total += h1.size();
            }
            e.top1 = static_cast<double>(hit1) / static_cast<double>(total);
            e.top5 = static_cast<double>(hit5) / static_cast<double>(total);
        } catch (const Error& err) {
            e.ok = false;
            e.error = err.what();
        }
        out.push_back(std::move(e));
    }
    return out;
}

Stat summarize(std::span<const double> acc)
{
    if (acc.empty())
        throw Error("summarize: no accuracies");
    Stat s;
    s.n = acc.size();
    double sum = 0.0;
    s.max = acc[0];
    for (double a : acc) {
        sum += a;
        s.max = std::max(s.max, a);
    }
    const double mean = sum / static_cast<double>(s.n);
    if (s.n == 1) {
        s.sem_undefined = true;
    } else {
        double ss = 0.0;
        for (double a : acc)
            ss += (a - mean) * (a - mean);
        s.sem = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n)) * 100.0;
    }
    s.mean = mean * 100.0;
    s.max *= 100.0;
    return s;
}

std::string_view to_string(FailurePolicy p)
{
    return p == FailurePolicy::Exclude ? "exclude_failures" : "failures_as_zero";
}

std::vector<SummaryCell> summarize_split(const std::vector<GraphEval>& evals, Split split, const QuantScheme& scheme,
                                         const std::string& trained_scheme, const std::string& trained_mode)
{
    std::vector<SummaryCell> out;
    for (FailurePolicy policy : {FailurePolicy::Exclude, FailurePolicy::CountAsZero}) {
        SummaryCell c;
        c.scheme = scheme.name();
        c.mode = std::string(to_string(scheme.mode));
        c.trained_scheme = trained_scheme;
        c.trained_mode = trained_mode;
        c.mismatched = !trained_scheme.empty() && trained_scheme != scheme.name();
        c.split = split;
        c.failures = policy;
        std::vector<double> t1, t5;
        for (const auto& e : evals) {
            if (e.split != split)
                continue;
            ++c.n_graphs;
            if (!e.ok) {
                ++c.n_failed;
                if (policy == FailurePolicy::Exclude)
                    continue;
            }
            t1.push_back(e.ok ? e.top1 : 0.0);
            t5.push_back(e.ok ? e.top5 : 0.0);
        }
        if (!t1.empty()) {
            c.top1 = summarize(t1);
            c.top5 = summarize(t5);
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::string format_cell(const Stat& s)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f±%.1f; %.1f", s.mean, s.sem, s.max);
    return buf;
}

namespace {

const std::array<Split, 4> kColumns{Split::IDTest, Split::OODDeep, Split::OODWide, Split::OODBNFree};

std::string scheme_label(const SummaryCell& c)
{
    std::string label = QuantScheme::parse(c.scheme, QuantMode::SimQuant).label();
    if (!c.trained_mode.empty())
        label += " " + c.trained_mode;
    if (c.mismatched)
        label += " (trained " + QuantScheme::parse(c.trained_scheme, QuantMode::SimQuant).label() + ", mismatched)";
    return label;
}

int row_rank(const std::string& scheme)
{
    if (scheme == "W4A4")
        return 0;
    if (scheme == "W4A8")
        return 1;
    if (scheme == "W2A2")
        return 2;
    return 3;
}

std::string render_one(const std::vector<SummaryCell>& cells, FailurePolicy policy, bool top5)
{
    std::map<std::pair<int, std::string>, std::map<Split, const SummaryCell*>> rows;
    for (const auto& c : cells)
        if (c.failures == policy)
            rows[{row_rank(c.scheme), scheme_label(c)}][c.split] = &c;

    std::string title = top5 ? "Top-5 Accuracy" : "Top-1 Accuracy";
    title += " by Bitwidth (Mean%±SEM; Max%)";
    if (policy == FailurePolicy::CountAsZero)
        title += ", failed networks counted as 0%";
    std::string out = title + "\n";
    out += "| Bitwidth | ID Test | OOD Deep | OOD Wide | OOD BN-Free |\n";
    out += "|---|---|---|---|---|\n";
    for (const auto& [key, by_split] : rows) {
        out += "| " + key.second + " |";
        for (Split s : kColumns) {
            const auto it = by_split.find(s);
            std::string cell = "-";
            if (it != by_split.end()) {
                const auto& stat = top5 ? it->second->top5 : it->second->top1;
                if (stat)
                    cell = format_cell(*stat);
                if (it->second->n_failed > 0)
                    cell += " (" + std::to_string(it->second->n_failed) + "/" + std::to_string(it->second->n_graphs) + " failed)";
            }
            out += " " + cell + " |";
        }
        out += "\n";
    }
    return out;
}

} // namespace

std::string render_table(const std::vector<SummaryCell>& cells)
{
    std::string out = render_one(cells, FailurePolicy::Exclude, false) + "\n" + render_one(cells, FailurePolicy::Exclude, true);
    const bool any_failed = std::any_of(cells.begin(), cells.end(), [](const SummaryCell& c) { return c.n_failed > 0; });
    if (any_failed)
        out += "\n" + render_one(cells, FailurePolicy::CountAsZero, false) + "\n" +
               render_one(cells, FailurePolicy::CountAsZero, true);
    return out;
}

namespace {

ordered_json stat_json(const std::optional<Stat>& s)
{
    if (!s)
        return nullptr;
    ordered_json j;
    j["mean"] = s->mean;
    j["sem"] = s->sem;
    j["max"] = s->max;
    j["n"] = s->n;
    j["sem_undefined"] = s->sem_undefined;
    return j;
}

std::optional<Stat> stat_from(const json& j)
{
    if (j.is_null())
        return std::nullopt;
    Stat s;
    s.mean = j.at("mean").get<double>();
    s.sem = j.at("sem").get<double>();
    s.max = j.at("max").get<double>();
    s.n = j.at("n").get<std::size_t>();
    s.sem_undefined = j.value("sem_undefined", false);
    return s;
}

} // namespace

namespace {

ordered_json loss_or_null(double v)
{
    return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr);
}

SummaryCell cell_from(const json& j)
{
    SummaryCell c;
    c.scheme = QuantScheme::parse(j.at("scheme").get<std::string>(), QuantMode::SimQuant).name();
    c.mode = j.value("mode", "simquant");
    c.trained_scheme = j.value("trained_scheme", "");
    c.trained_mode = j.value("trained_mode", "");
    c.mismatched = j.value("mismatched", false);
    c.split = parse_split(j.at("split").get<std::string>());
    const std::string f = j.value("failures", "exclude_failures");
    if (f == "exclude_failures")
        c.failures = FailurePolicy::Exclude;
    else if (f == "failures_as_zero")
        c.failures = FailurePolicy::CountAsZero;
    else
        throw FormatError("unknown failure policy '" + f + "'");
    c.n_graphs = j.at("n_graphs").get<std::size_t>();
    c.n_failed = j.value("n_failed", std::size_t{0});
    c.top1 = stat_from(j.at("top1"));
    c.top5 = stat_from(j.at("top5"));
    return c;
}

TrainingNote note_from(const json& j)
{
    TrainingNote n;
    n.scheme = j.at("scheme").get<std::string>();
    n.mode = j.value("mode", "");
    n.status = j.at("status").get<std::string>();
    n.epochs_done = j.value("epochs_done", 0);
    n.steps = j.value("steps", std::uint64_t{0});
    n.aborted_steps = j.value("aborted_steps", 0);
    n.loss_decreased = j.value("loss_decreased", false);
    for (const auto& v : j.value("epoch_losses", json::array()))
        n.epoch_losses.push_back(v.is_null() ? std::nan("") : v.get<double>());
    n.reason = j.value("reason", "");
    return n;
}

std::string fmt_loss(double v)
{
    if (!std::isfinite(v))
        return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

} // namespace

std::string summary_to_jsonl(const std::vector<SummaryCell>& cells, const std::vector<TrainingNote>& notes)
{
    std::string out;
    for (const auto& n : notes) {
        ordered_json j;
        j["type"] = "training";
        j["scheme"] = n.scheme;
        j["mode"] = n.mode;
        j["status"] = n.status;
        j["epochs_done"] = n.epochs_done;
        j["steps"] = n.steps;
        j["aborted_steps"] = n.aborted_steps;
        j["loss_decreased"] = n.loss_decreased;
        ordered_json losses = ordered_json::array();
        for (double v : n.epoch_losses)
            losses.push_back(loss_or_null(v));
        j["epoch_losses"] = losses;
        if (!n.reason.empty())
            j["reason"] = n.reason;
        out += j.dump() + "\n";
    }
    for (const auto& c : cells) {
        ordered_json j;
        j["type"] = "cell";
        j["scheme"] = c.scheme;
        j["mode"] = c.mode;
        j["trained_scheme"] = c.trained_scheme;
        j["trained_mode"] = c.trained_mode;
        j["mismatched"] = c.mismatched;
        j["split"] = std::string(to_string(c.split));
        j["failures"] = std::string(to_string(c.failures));
        j["n_graphs"] = c.n_graphs;
        j["n_failed"] = c.n_failed;
        j["top1"] = stat_json(c.top1);
        j["top5"] = stat_json(c.top5);
        out += j.dump() + "\n";
    }
    return out;
}

SummaryFile parse_summary_jsonl(std::string_view text)
{
    SummaryFile out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos)
            continue;
        try {
            const json j = json::parse(line);
            const std::string type = j.value("type", "cell");
            if (type == "training")
                out.notes.push_back(note_from(j));
            else if (type == "cell")
                out.cells.push_back(cell_from(j));
            else
                throw FormatError("unknown record type '" + type + "'");
        } catch (const json::exception& e) {
            throw FormatError("summary line " + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw FormatError("summary line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<SummaryCell> summary_from_jsonl(std::string_view text)
{
    return parse_summary_jsonl(text).cells;
}

std::string render_report(const SummaryFile& summary)
{
    std::string out = render_table(summary.cells);
    if (summary.notes.empty())
        return out;
    std::vector<const TrainingNote*> notes;
    for (const auto& n : summary.notes)
        notes.push_back(&n);
    std::stable_sort(notes.begin(), notes.end(), [](const TrainingNote* a, const TrainingNote* b) {
        return std::pair(row_rank(a->scheme), a->scheme + a->mode) < std::pair(row_rank(b->scheme), b->scheme + b->mode);
    });
    out += "\nTraining Runs\n";
    out += "| Bitwidth | Mode | Status | Steps | Aborted Steps | Epoch Loss (first, last) | Loss Decreased | Unstable |\n";
    out += "|---|---|---|---|---|---|---|---|\n";
    for (const TrainingNote* n : notes) {
        std::string losses = "-";
        if (!n->epoch_losses.empty())
            losses = fmt_loss(n->epoch_losses.front()) + ", " + fmt_loss(n->epoch_losses.back());
        out += "| " + QuantScheme::parse(n->scheme, QuantMode::SimQuant).label() + " | " + n->mode + " | " + n->status + " | " +
               std::to_string(n->steps) + " | " + std::to_string(n->aborted_steps) + " | " + losses + " | " +
               (n->loss_decreased ? "yes" : "no") + " | " + (n->unstable() ? "yes" : "no") + " |\n";
    }
    for (const TrainingNote* n : notes)
        if (!n->reason.empty())
            out += "\n" + QuantScheme::parse(n->scheme, QuantMode::SimQuant).label() + " " + n->mode + ": " + n->reason + "\n";
    return out;
}

std::string graph_evals_to_jsonl(const std::vector<GraphEval>& evals)
{
    std::string out;
    for (const auto& e : evals) {
        ordered_json j;
        j["graph_id"] = e.graph_id;
        j["split"] = std::string(to_string(e.split));
        j["ok"] = e.ok;
        if (e.ok) {
            j["top1"] = e.top1;
            j["top5"] = e.top5;
        } else {
            j["error"] = e.error;
        }
        out += j.dump() + "\n";
    }
    return out;
}

} // namespace ghnq

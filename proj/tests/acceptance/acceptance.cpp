// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Training and evaluation go through the ghnq
// executable so the shipped CLI is what gets measured.
#include "ghnq/archspace.hpp"
#include "ghnq/data.hpp"
#include "ghnq/ghn.hpp"
#include "ghnq/harness.hpp"
#include "ghnq/qat.hpp"
#include "ghnq/quant_conformance.hpp"
#include "support/fd_scenarios.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace ghnq;
using namespace ghnq::testing;

namespace {

struct Args {
    std::string cli;
    std::string config;
    std::string work;
};

std::string slurp(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Runner {
public:
    explicit Runner(Args a) : a_(std::move(a)) {}

    // Runs `ghnq <args>` in the work directory; output goes to <log>.out.
    int ghnq(const std::string& args, const std::string& log)
    {
        const std::string cmd = "cd '" + a_.work + "' && '" + a_.cli + "' " + args + " > '" + log + ".out' 2>&1";
        const int raw = std::system(cmd.c_str());
        const int rc = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
        std::cout << "  $ ghnq " << args << "  -> exit " << rc << "\n" << std::flush;
        return rc;
    }

    std::string path(const std::string& name) const { return (fs::path(a_.work) / name).string(); }
    const Args& args() const { return a_; }

private:
    Args a_;
};

void report(int id, const std::string& name, const Outcome& o, int& failures)
{
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << "\n" << std::flush;
    if (!o.pass)
        ++failures;
}

// Runs a criterion body, turning exceptions into a FAIL with the message.
Outcome guarded(const std::function<Outcome()>& f)
{
    try {
        return f();
    } catch (const std::exception& e) {
        return {false, std::string("exception: ") + e.what()};
    }
}

const SummaryCell* find_cell(const SummaryFile& s, Split split)
{
    for (const auto& c : s.cells)
        if (c.split == split && c.failures == FailurePolicy::Exclude)
            return &c;
    return nullptr;
}

double mean_top1(const SummaryFile& s, Split split)
{
    const SummaryCell* c = find_cell(s, split);
    if (!c || !c->top1)
        throw std::runtime_error("no " + std::string(to_string(split)) + " top-1 statistic in summary");
    return c->top1->mean;
}

Outcome criterion1()
{
    const auto t0 = std::chrono::steady_clock::now();
    const ConformanceReport r = run_quant_conformance(10000, 1);
    const double secs = seconds_since(t0);
    std::size_t mismatches = 0, cases = 0;
    std::string failed;
    for (const auto& c : r.checks) {
        mismatches += c.failures;
        cases = std::max(cases, c.cases);
        if (!c.passed())
            failed += " [" + c.name + ": " + c.first_failure + "]";
    }
    const bool has_all = [&] {
        for (const char* name : {"nearest-grid oracle equivalence", "idempotence", "zero preservation", "grid cardinality", "roundtrip bound"})
            if (std::none_of(r.checks.begin(), r.checks.end(), [&](const ConformanceCheck& c) { return c.name == name; }))
                return false;
        return true;
    }();
    Outcome o;
    o.pass = r.passed() && has_all && cases >= 30000 && secs < 60.0;
    o.detail = std::to_string(cases) + " tensors over bitwidths {2,4,8}, " + std::to_string(r.checks.size()) + " checks, " +
               std::to_string(mismatches) + " mismatches, " + fmt("%.2f s", secs) + failed;
    return o;
}

Outcome criterion2()
{
    const auto t0 = std::chrono::steady_clock::now();
    const FdSummary cnn = cnn_fd_check(20, 8, 21, 5);
    const FdSummary ghn = ghn_composition_fd_check(11);
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = cnn.passed() && ghn.passed() && cnn.max_nodes <= 8 && ghn.max_nodes == 5 && secs < 300.0;
    o.detail = "CNN: 20 graphs (<= " + std::to_string(cnn.max_nodes) + " nodes), " + std::to_string(cnn.checked) +
               " coordinates, max rel err " + fmt("%.2e", cnn.max_rel_error) + "; GHN composition: 5-node graph, " +
               std::to_string(ghn.checked) + " coordinates, max rel err " + fmt("%.2e", ghn.max_rel_error) + "; " +
               fmt("%.1f s", secs);
    for (const auto& f : cnn.failures)
        o.detail += " [" + f + "]";
    for (const auto& f : ghn.failures)
        o.detail += " [" + f + "]";
    return o;
}

// Brute force in long double, two passes.
Stat brute_stat(const std::vector<double>& v)
{
    Stat s;
    long double sum = 0;
    for (double x : v)
        sum += x;
    const long double mean = sum / v.size();
    long double ss = 0;
    for (double x : v)
        ss += (x - mean) * (x - mean);
    s.n = v.size();
    s.mean = static_cast<double>(mean * 100);
    s.sem = v.size() > 1 ? static_cast<double>(std::sqrt(ss / (v.size() - 1)) / std::sqrt(static_cast<long double>(v.size())) * 100) : 0.0;
    s.max = *std::max_element(v.begin(), v.end()) * 100;
    return s;
}

Outcome criterion7()
{
    Rng rng(7);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> v(static_cast<std::size_t>(rng.uniform_int(1, 100)));
        for (double& x : v)
            x = rng.uniform();
        const Stat a = summarize(v);
        const Stat b = brute_stat(v);
        worst = std::max({worst, std::abs(a.mean - b.mean), std::abs(a.sem - b.sem), std::abs(a.max - b.max)});
    }
    SummaryCell w4a4, w4a8;
    w4a4.scheme = "W4A4";
    w4a4.split = Split::IDTest;
    w4a4.top1 = Stat{52.5, 0.4, 65.7, 100, false};
    w4a4.top5 = Stat{90.0, 0.2, 97.0, 100, false};
    w4a8.scheme = "W4A8";
    w4a8.split = Split::IDTest;
    w4a8.top1 = Stat{60.2, 0.5, 71.0, 100, false};
    w4a8.top5 = Stat{94.5, 0.1, 98.1, 100, false};
    const std::string table = render_table({w4a4, w4a8});
    const bool cell1 = table.find("| W4/A4 | 52.5±0.4; 65.7 |") != std::string::npos;
    const bool cell2 = table.find("| W4/A8 | 94.5±0.1; 98.1 |") != std::string::npos;
    Outcome o;
    o.pass = worst <= 1e-9 && cell1 && cell2;
    o.detail = "summarize vs brute force on 1000 vectors, max abs diff " + fmt("%.1e", worst) + "; golden cells " +
               (cell1 ? "\"52.5±0.4; 65.7\" found" : "\"52.5±0.4; 65.7\" MISSING") + ", " +
               (cell2 ? "\"94.5±0.1; 98.1\" found" : "\"94.5±0.1; 98.1\" MISSING");
    return o;
}

struct DeskSetup {
    GenConfig graphs;
    SynthConfig synth;
    TrainConfig train;
};

DeskSetup read_desk(const std::string& config)
{
    const std::string text = slurp(config);
    DeskSetup d;
    d.graphs = parse_gen_config(text);
    const ParsedTrainConfig p = parse_train_config(text);
    d.train = p.cfg;
    d.synth = parse_synth_config(p.synth_json);
    return d;
}

} // namespace

int main(int argc, char** argv)
{
    if (argc != 4) {
        std::cerr << "usage: ghnq_acceptance <ghnq executable> <desk config> <work dir>\n";
        return 2;
    }
    Args args{fs::absolute(argv[1]).string(), fs::absolute(argv[2]).string(), fs::absolute(argv[3]).string()};
    fs::remove_all(args.work);
    fs::create_directories(args.work);
    Runner run(args);
    int failures = 0;
    const auto total0 = std::chrono::steady_clock::now();

    report(1, "quantization conformance", guarded(criterion1), failures);
    report(2, "gradient correctness", guarded(criterion2), failures);

    // Desk-scale runs shared by criteria 3 to 6 and 8.
    const std::string cfg = "--config '" + args.config + "'";
    std::map<std::string, int> rc;
    std::map<std::string, SummaryFile> summaries;
    DeskSetup desk;
    std::string setup_error;
    try {
        desk = read_desk(args.config);
        std::cout << "desk setup: " << desk.synth.num_classes << " classes, " << desk.graphs.counts.at(Split::Train)
                  << " train graphs, GHN hidden_dim " << desk.train.ghn.hidden_dim << ", " << desk.train.epochs << " epochs\n";
        rc["gen"] = run.ghnq("gen-graphs " + cfg + " --out graphs.jsonl", "gen");
        const auto train_eval = [&](const std::string& tag, const std::string& train_flags, const std::string& splits) {
            const auto t0 = std::chrono::steady_clock::now();
            rc["train_" + tag] = run.ghnq("train --graphs graphs.jsonl --data synth " + train_flags + " " + cfg + " --out " + tag + ".ckpt -q", "train_" + tag);
            if (fs::exists(run.path(tag + ".ckpt"))) {
                rc["eval_" + tag] = run.ghnq("eval --ckpt " + tag + ".ckpt --graphs graphs.jsonl --splits " + splits + " --report " + tag + ".md", "eval_" + tag);
                summaries[tag] = parse_summary_jsonl(slurp(run.path(tag + ".summary.jsonl")));
            }
            std::cout << "  " << tag << " done in " << fmt("%.1f s", seconds_since(t0)) << "\n" << std::flush;
        };
        if (rc["gen"] != 0)
            throw std::runtime_error("gen-graphs failed");
        train_eval("w4a4", "--scheme W4A4 --mode simquant", "id,deep,wide,bnfree");
        train_eval("w4a8", "--scheme W4A8 --mode simquant", "id");
        train_eval("w2a2_noise", "--scheme W2A2 --mode noisequant", "id");
        train_eval("w2a2_sim", "--scheme W2A2 --mode simquant --allow-unstable", "id");
        train_eval("w4a4_rerun", "--scheme W4A4 --mode simquant", "id,deep,wide,bnfree");
        rc["report"] = run.ghnq("report --inputs w4a4.summary.jsonl w4a8.summary.jsonl w2a2_noise.summary.jsonl w2a2_sim.summary.jsonl --out report.md",
                                "report");
    } catch (const std::exception& e) {
        setup_error = e.what();
        std::cout << "  desk-scale setup failed: " << setup_error << "\n";
    }
    const auto ok = [&](const std::string& tag) {
        return rc.count("train_" + tag) && rc.at("train_" + tag) == 0 && rc.count("eval_" + tag) && rc.at("eval_" + tag) == 0 && summaries.count(tag);
    };
    const auto need = [&](std::initializer_list<const char*> tags) {
        if (!setup_error.empty())
            throw std::runtime_error(setup_error);
        for (const char* t : tags)
            if (!ok(t))
                throw std::runtime_error(std::string("run '") + t + "' did not complete; see " + run.path(std::string("train_") + t + ".out"));
    };
    const double chance = desk.synth.num_classes > 0 ? 100.0 / desk.synth.num_classes : 0.0;

    report(3, "desk-scale QAT signal", guarded([&] {
               need({"w4a4"});
               const double id = mean_top1(summaries["w4a4"], Split::IDTest);
               const bool setup = desk.synth.num_classes == 4 && desk.graphs.counts.at(Split::Train) == 200 &&
                                  desk.train.ghn.hidden_dim == 32 && desk.train.epochs <= 20;
               return Outcome{setup && id >= chance + 15.0,
                              "W4A4 simquant ID top-1 " + fmt("%.1f%%", id) + " (chance " + fmt("%.1f%%", chance) + ", needs >= " +
                                  fmt("%.1f%%", chance + 15.0) + ")" + (setup ? "" : "; desk setup does not match the required scale")};
           }),
           failures);

    report(4, "bitwidth ordering", guarded([&] {
               need({"w4a4", "w4a8", "w2a2_noise"});
               const double w44 = mean_top1(summaries["w4a4"], Split::IDTest);
               const double w48 = mean_top1(summaries["w4a8"], Split::IDTest);
               const double w22 = mean_top1(summaries["w2a2_noise"], Split::IDTest);
               return Outcome{w48 >= w44 - 2.0 && w44 >= w22 + 5.0,
                              "ID top-1 W4A8 " + fmt("%.1f", w48) + " >= W4A4 - 2 = " + fmt("%.1f", w44 - 2.0) + "; W4A4 " +
                                  fmt("%.1f", w44) + " >= W2A2 + 5 = " + fmt("%.1f", w22 + 5.0)};
           }),
           failures);

    report(5, "W2/A2 trainability", guarded([&] {
               need({"w2a2_noise"});
               const double noise = mean_top1(summaries["w2a2_noise"], Split::IDTest);
               std::string sim = "SimQuant W2A2 run missing";
               bool surfaced = false;
               if (summaries.count("w2a2_sim")) {
                   const auto& s = summaries["w2a2_sim"];
                   const std::string rep = slurp(run.path("report.md"));
                   surfaced = !s.notes.empty() && rep.find("| W2/A2 | simquant |") != std::string::npos;
                   if (!s.notes.empty()) {
                       const TrainingNote& n = s.notes.front();
                       sim = "SimQuant W2A2: status " + n.status + ", " + std::to_string(n.aborted_steps) + " aborted steps, loss " +
                             (n.loss_decreased ? "decreased" : "did not decrease") + ", " + (n.unstable() ? "unstable" : "no instability observed");
                       if (find_cell(s, Split::IDTest) && find_cell(s, Split::IDTest)->top1)
                           sim += ", ID top-1 " + fmt("%.1f%%", find_cell(s, Split::IDTest)->top1->mean);
                   }
               }
               return Outcome{noise >= chance + 5.0 && surfaced,
                              "NoiseQuant W2A2 ID top-1 " + fmt("%.1f%%", noise) + " (needs >= " + fmt("%.1f%%", chance + 5.0) + "); " + sim +
                                  (surfaced ? " (in report.md)" : " (NOT in report)")};
           }),
           failures);

    report(6, "OOD degradation", guarded([&] {
               need({"w4a4"});
               const double id = mean_top1(summaries["w4a4"], Split::IDTest);
               const double bnfree = mean_top1(summaries["w4a4"], Split::OODBNFree);
               const double deep = mean_top1(summaries["w4a4"], Split::OODDeep);
               const double wide = mean_top1(summaries["w4a4"], Split::OODWide);
               return Outcome{bnfree <= id, "W4A4 BN-Free " + fmt("%.1f", bnfree) + " <= ID " + fmt("%.1f", id) + " (Deep " + fmt("%.1f", deep) +
                                                ", Wide " + fmt("%.1f", wide) + ")"};
           }),
           failures);

    report(7, "statistics and rendering", guarded(criterion7), failures);

    report(8, "determinism", guarded([&] {
               need({"w4a4", "w4a4_rerun"});
               const GhnModel a = load_ghn(run.path("w4a4.ckpt"));
               const GhnModel b = load_ghn(run.path("w4a4_rerun.ckpt"));
               const bool same_ckpt = a.checksum() == b.checksum();
               const bool same_bytes = slurp(run.path("w4a4.ckpt")) == slurp(run.path("w4a4_rerun.ckpt"));
               const bool same_report = slurp(run.path("w4a4.md")) == slurp(run.path("w4a4_rerun.md")) &&
                                        slurp(run.path("w4a4.summary.jsonl")) == slurp(run.path("w4a4_rerun.summary.jsonl"));
               return Outcome{same_ckpt && same_report,
                              "checkpoint checksums " + hex64(a.checksum()) + " / " + hex64(b.checksum()) + (same_bytes ? " (files byte-identical)" : " (file bytes differ)") +
                                  "; reports " + (same_report ? "byte-identical" : "DIFFER")};
           }),
           failures);

    std::cout << "combined report: " << run.path("report.md") << "\n";
    std::cout << "total " << fmt("%.1f s", seconds_since(total0)) << ", " << (8 - failures) << "/8 criteria passed\n";
    return failures == 0 ? 0 : 1;
}

#pragma once

#include "ghnq/data.hpp"
#include "ghnq/ghn.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Evaluation over graph splits, summary statistics and report rendering.
namespace ghnq {

// Fraction of rows whose label ranks among the k largest logits. Ties go to
// the lower class index: label y ranks at #{j : l_j > l_y or (l_j == l_y and j < y)}.
double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k);
// Per-row hit flags for the same rule.
std::vector<bool> topk_hits(const Tensor& logits, std::span<const int> labels, int k);

struct GraphEval {
    std::int64_t graph_id = 0;
    Split split = Split::IDTest;
    bool ok = true;
    double top1 = 0.0;
    double top5 = 0.0;
    std::string error;
};

struct EvalOptions {
    // BatchNorm normalizes with batch statistics, so accuracy depends on
    // this; only full batches of the test set are used.
    std::size_t batch_size = 64;
    // Cap on evaluated test images (0: all full batches).
    std::size_t max_images = 0;
};

// SimQuant at the scheme's bitwidths (None stays float). Failures are
// recorded per graph instead of thrown.
std::vector<GraphEval> evaluate_split(const GhnModel& ghn, const std::vector<ArchGraph>& graphs, const ImageDataset& data,
                                      const QuantScheme& scheme, const EvalOptions& opts = {});

struct Stat {
    double mean = 0.0; // percent
    double sem = 0.0;  // percent, sample standard deviation / sqrt(n)
    double max = 0.0;  // percent
    std::size_t n = 0;
    // Set when n == 1 and sem is reported as 0.
    bool sem_undefined = false;
};

// Accuracies are fractions in [0, 1]; throws Error for an empty input.
Stat summarize(std::span<const double> accuracies);

enum class FailurePolicy { Exclude, CountAsZero };
std::string_view to_string(FailurePolicy p);

struct SummaryCell {
    std::string scheme;         // "W4A4"
    std::string mode;           // quantization mode used for evaluation
    std::string trained_scheme; // scheme recorded in the checkpoint
    std::string trained_mode;   // training-time quantization mode, if known
    bool mismatched = false;
    Split split = Split::IDTest;
    FailurePolicy failures = FailurePolicy::Exclude;
    std::size_t n_graphs = 0;
    std::size_t n_failed = 0;
    std::optional<Stat> top1;
    std::optional<Stat> top5;
};

// One cell per failure policy; a policy with no usable graph has no stats.
std::vector<SummaryCell> summarize_split(const std::vector<GraphEval>& evals, Split split, const QuantScheme& scheme,
                                         const std::string& trained_scheme, const std::string& trained_mode = "");

std::string format_cell(const Stat& s);

// Top-1 and top-5 tables, rows by bitwidth (W4/A4, W4/A8, W2/A2, then the
// rest by name) and training mode when known, columns ID Test / Deep / Wide / BN-Free. Cells counted with
// failures as zero get their own tables when any graph failed.
std::string render_table(const std::vector<SummaryCell>& cells);

// How the evaluated checkpoint's training run went, carried into reports so
// unstable runs stay visible next to their accuracy.
struct TrainingNote {
    std::string scheme;
    std::string mode;
    std::string status; // "completed" or "aborted"
    int epochs_done = 0;
    std::uint64_t steps = 0;
    int aborted_steps = 0;
    bool loss_decreased = false;
    std::vector<double> epoch_losses; // NaN for epochs without a finite step
    std::string reason;

    bool unstable() const { return status != "completed" || aborted_steps > 0 || !loss_decreased; }
};

struct SummaryFile {
    std::vector<SummaryCell> cells;
    std::vector<TrainingNote> notes;
};

// One JSON object per line; training notes carry "type":"training".
std::string summary_to_jsonl(const std::vector<SummaryCell>& cells, const std::vector<TrainingNote>& notes = {});
SummaryFile parse_summary_jsonl(std::string_view text);
std::vector<SummaryCell> summary_from_jsonl(std::string_view text);

// render_table plus a training-run section when notes are present.
std::string render_report(const SummaryFile& summary);

std::string graph_evals_to_jsonl(const std::vector<GraphEval>& evals);

} // namespace ghnq

#pragma once

#include "ghnq/data.hpp"
#include "ghnq/ghn.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Bitwidth-specific quantization-aware training of the GHN.
namespace ghnq {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(AdamConfig cfg, const NamedTensors& params);

    // One bias-corrected update of `params` (same layout as construction).
    void step(NamedTensors& params, std::span<const Tensor> grads);

    std::int64_t steps() const noexcept { return t_; }
    // "opt.step", then "opt.m.<name>" and "opt.v.<name>" per parameter.
    NamedTensors state() const;
    void load_state(const NamedTensors& tensors);

private:
    AdamConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

struct TrainConfig {
    QuantScheme scheme{4, 4, QuantMode::SimQuant};
    int epochs = 1;
    int meta_batch = 4;
    int batch_size = 64;
    AdamConfig adam;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
    // Write a checkpoint every N epochs (0: only at the end).
    int checkpoint_every = 0;
    // A run ends as aborted after more than this many consecutive NaN steps.
    int max_consecutive_aborts = 3;
    // SimQuant at 2 bits is known to be unstable and must be asked for.
    bool allow_unstable = false;
    GhnConfig ghn;

    void validate() const;
};

// Keys: epochs, meta_batch, batch_size, lr, betas, eps, clip_norm, seed,
// checkpoint_every, max_consecutive_aborts, allow_unstable, ghn, and the
// optional scheme / mode (otherwise supplied by the caller). Unknown keys are
// rejected. Returns the config plus whether scheme/mode were given.
struct ParsedTrainConfig {
    TrainConfig cfg;
    std::optional<std::string> scheme;
    std::optional<QuantMode> mode;
    // Raw "synth" section for --data synth, "{}" when absent.
    std::string synth_json = "{}";
};
ParsedTrainConfig parse_train_config(std::string_view json_text);
std::string train_config_to_json(const TrainConfig& cfg);

struct GraphLoss {
    double loss = 0.0;
    // Same order as GhnModel::tensors().
    std::vector<Tensor> grads;
};

// Cross-entropy of the CNN whose parameters the GHN predicts for `g`, and
// its gradient with respect to every GHN tensor. Throws NumericError when
// the forward produces non-finite values.
GraphLoss ghn_loss_and_grad(const GhnModel& ghn, const ArchGraph& g, const Tensor& images, std::span<const int> labels,
                            const QuantScheme& scheme, std::uint64_t noise_seed);

struct StepResult {
    bool aborted = false;
    double loss = 0.0;
    double grad_norm = 0.0;
    bool clipped = false;
    std::vector<std::int64_t> bad_graphs;
    std::string reason;
};

// Mean loss over the meta-batch, one clipped Adam update. A non-finite loss
// or gradient on any graph aborts the step without touching the GHN.
StepResult train_step(GhnModel& ghn, Adam& opt, std::span<const ArchGraph* const> graphs, const Tensor& images,
                      std::span<const int> labels, const TrainConfig& cfg, std::uint64_t step);

// Append-only JSON-lines log.
class TrainLog {
public:
    void append(std::string record_json);
    const std::vector<std::string>& records() const noexcept { return records_; }
    std::string text() const;
    // Records of a given "type" field.
    std::vector<std::string> of_type(std::string_view type) const;

private:
    std::vector<std::string> records_;
};

enum class RunStatus { Completed, Aborted };
std::string_view to_string(RunStatus s);

struct TrainState {
    int epochs_done = 0;
    std::uint64_t step = 0;
};

struct TrainOutcome {
    RunStatus status = RunStatus::Completed;
    std::string reason;
    TrainState state;
    TrainLog log;
    std::vector<double> epoch_losses;
    int aborted_steps = 0;
    // Mean loss of the last epoch below that of the first.
    bool loss_decreased() const;
};

struct TrainHooks {
    // Called for every log record as it is appended.
    std::function<void(const std::string&)> on_record;
    // Checkpoint destination; empty disables checkpointing.
    std::string checkpoint_path;
    // Wall time is logged only when set, keeping logs reproducible otherwise.
    bool log_wall_time = false;
    // JSON object stored under "provenance" in every checkpoint header.
    std::string provenance_json;
};

// Trains on `graphs` (all used as the train set) for cfg.epochs, starting
// from `resume` when given. Deterministic in (cfg, graphs, data).
TrainOutcome qat_finetune(GhnModel& ghn, const std::vector<ArchGraph>& graphs, const ImageDataset& data,
                          const TrainConfig& cfg, const TrainHooks& hooks = {}, Adam* resume_opt = nullptr,
                          std::optional<TrainState> resume = std::nullopt);

// Checkpoint with GHN, optimizer state, scheme and train state in the header.
void save_training_checkpoint(const std::string& path, const GhnModel& ghn, const Adam& opt, const TrainConfig& cfg,
                              const TrainState& state, RunStatus status, const std::string& provenance_json = {},
                              const TrainOutcome* outcome = nullptr);
// The "outcome" header object of a finished run, if recorded.
std::optional<std::string> checkpoint_outcome_json(const Checkpoint& ckpt);

struct LoadedTraining {
    GhnModel ghn;
    Adam opt;
    TrainState state;
    std::string scheme;
    QuantMode mode = QuantMode::SimQuant;
    std::string status;
};
LoadedTraining load_training_checkpoint(const std::string& path, const AdamConfig& adam);

// Scheme recorded in a checkpoint header ("W4A4"), empty if none.
struct CheckpointScheme {
    std::string scheme;
    QuantMode mode = QuantMode::SimQuant;
};
std::optional<CheckpointScheme> checkpoint_scheme(const Checkpoint& ckpt);

} // namespace ghnq

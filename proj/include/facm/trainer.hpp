#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "facm/flow.hpp"
#include "facm/network.hpp"
#include "facm/objectives.hpp"

namespace facm::train {

enum class Paradigm { PretrainTeacher, Distill, Scratch };

std::string_view to_string(Paradigm p);
Paradigm parse_paradigm(std::string_view name);

/// Everything a run depends on. One flat record so that a resolved snapshot
/// can be written and re-read as plain `key = value` text.
struct TrainConfig {
    Paradigm paradigm = Paradigm::Distill;
    std::size_t steps = 10000;
    std::size_t batch_size = 256;
    double lr = 1e-4;
    std::array<double, 2> adam_betas{0.9, 0.999};
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double ema_rel_length = 0.2;
    flow::TimeSchedule schedule;
    obj::GuidanceSpec guidance;
    obj::WeightingSpec weighting;
    flow::Scheme scheme = flow::Scheme::ExpandedInterval;
    std::string dataset = "eight_gaussians";
    std::size_t dataset_size = 50000;
    std::uint64_t seed = 0;
    double mixed_condition_ratio = 0.5;
    /// Fraction of training labels replaced by the null class.
    double label_dropout = 0.1;

    // network
    std::size_t hidden_width = 256;
    std::size_t depth = 4;
    std::size_t time_embed_dim = 128;
    bool class_conditional = true;
    double dropout = 0.0;

    // objective
    obj::Objective objective = obj::Objective::FACM;
    double fm_weight = 1.0;
    obj::ClampSpec clamp;
    double norm_c = 1e-3;
    /// MeanFlow: probability of r == t.
    double meanflow_ratio = 0.75;
    /// Global-norm clip, applied to the sCM and MeanFlow baselines only.
    double grad_clip = 10.0;
    /// Consecutive non-finite steps tolerated before the run aborts.
    std::size_t nonfinite_abort = 20;

    // paths and evaluation
    std::string teacher;
    std::string checkpoint;
    std::vector<std::size_t> eval_nfe{1, 2, 4};
    std::size_t eval_samples = 2000;
    std::size_t eval_projections = 128;
    std::size_t reference_steps = 200;
    std::string reference_method = "heun";
    int label = -1;

    void validate() const;
    nn::NetworkConfig network_config() const;
    obj::ObjectiveSettings objective_settings() const;
    int num_classes() const;
    bool operator==(const TrainConfig&) const = default;
};

// --- optimizer and EMA ---------------------------------------------------------

struct OptimizerState {
    nn::ParamMap m;
    nn::ParamMap v;
    std::uint64_t step = 0;

    static OptimizerState zeros_like(const nn::ParamMap& params);
};

struct AdamW {
    double lr = 1e-4;
    std::array<double, 2> betas{0.9, 0.999};
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// One AdamW update with bias correction and decoupled weight decay.
/// Parameters without a gradient entry are left untouched.
void adamw_step(nn::ParamMap& params, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                const AdamW& opt);

double ema_decay(double rel_length, std::size_t total_steps);

struct EmaState {
    nn::ParamMap shadow;
    double decay = 0.0;
};

/// shadow ← d·shadow + (1 − d)·online.
void ema_update(EmaState& ema, const nn::ParamMap& online);

// --- training loops ------------------------------------------------------------

struct TraceRow {
    std::size_t step = 0;
    double fm_loss = 0.0;
    double cm_loss = 0.0;
    double total = 0.0;
    double grad_norm = 0.0;
    double clamp_fraction = 0.0;
};

inline constexpr const char* kTraceHeader = "step,fm_loss,cm_loss,total,grad_norm,clamp_fraction";
void write_trace_row(std::ostream& os, const TraceRow& row);

struct TrainResult {
    nn::Checkpoint checkpoint;
    std::vector<TraceRow> trace;
    std::size_t skipped_steps = 0;
    bool aborted = false;
    std::string diagnostics;

    bool all_finite() const { return skipped_steps == 0 && !aborted; }
};

/// Called after every step with the logged row; may stream it to disk.
using StepHook = std::function<void(const TraceRow&)>;

/// Hash of the resolved config text, stored in checkpoints.
std::string config_hash(const TrainConfig& config);

TrainResult pretrain_teacher(const TrainConfig& config, const StepHook& hook = {});
/// Student starts from the teacher's evaluation weights; the teacher stays frozen.
TrainResult distill(const nn::Checkpoint& teacher, const TrainConfig& config, const StepHook& hook = {});
TrainResult train_scratch(const TrainConfig& config, const StepHook& hook = {});

/// Dispatches on config.paradigm; distill loads config.teacher.
TrainResult run(const TrainConfig& config, const StepHook& hook = {});

/// Held-out FM loss (L2 + cosine) of a network on fresh interpolant draws.
double fm_validation_loss(const nn::Network& net, const TrainConfig& config, std::size_t n, std::uint64_t seed);

}  // namespace facm::train

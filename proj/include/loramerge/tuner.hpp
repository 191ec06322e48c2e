// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loramerge/merge.hpp"
#include "loramerge/tasks.hpp"

namespace loramerge {

enum class TuneMode { grad_based, grad_free, joint, single };
enum class CheckpointRule { best_val_loss, best_train_loss_full_100 };

const char* to_string(TuneMode m);
TuneMode tune_mode_from_string(const std::string& s);
const char* to_string(CheckpointRule r);

struct TuneConfig {
    TuneMode mode = TuneMode::grad_based;
    int steps = 100;
    double lr = 5e-2;
    std::vector<double> joint_lrs{1e-4, 5e-5};
    GranularityKind granularity = GranularityKind::module;
    Activation activation = Activation::leaky_relu;
    CoeffInit init = CoeffInit::zeros;
    CheckpointRule checkpoint = CheckpointRule::best_val_loss;
    double clip_norm = 1.0;
    double es_sigma0 = 0.3;
    // L1 penalty on the coefficient vector in the gradient-free objective;
    // off by default (the protocol specifies plain loss).
    double es_l1_reg = 0.0;
    std::uint64_t seed = 0;

    // Per-mode defaults: grad_based/single train module-level coefficients at
    // 5e-2 with best-val checkpointing; grad_free tunes k model-level linear
    // coefficients against the loss on the full 100 examples; joint uses
    // softmax, zero init and the two low learning rates.
    static TuneConfig defaults(TuneMode mode);
};

struct TuneRun {
    CoefficientTable table;             // checkpointed coefficients
    std::vector<LoraAdapter> adapters;  // joint mode: tuned adapters at the checkpoint
    std::vector<double> train_history;  // per-step train objective
    std::vector<double> val_history;    // index 0 = before any update (grad modes)
    int selected_step = 0;
    double selected_metric = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
};

struct TuneResult {
    TuneConfig config;
    std::vector<TuneRun> runs;  // one per learning rate for joint, else one

    const TuneRun& best_run() const;
};

// Trains merging coefficients with plain gradient descent (full pass over
// the 80 training examples per step), validating every step.
TuneResult tune_gradient_based(const ToyModel& model, std::span<const TaskVectorSet> sets,
                               const TuneConfig& cfg, const TaskDataset& data);

// (1+lambda) evolution strategy over k model-level coefficients, lambda =
// 4 + floor(3 ln k), Gaussian mutation with 1/5-success-rule step-size
// control, elitist. Adapters are rank-padded to the pool maximum first.
TuneResult tune_gradient_free(const ToyModel& model, std::span<const LoraAdapter> adapters,
                              const TuneConfig& cfg, const TaskDataset& data);

// Joint descent on softmax coefficients and every adapter's factors; one
// seeded run per learning rate in cfg.joint_lrs.
TuneResult tune_joint(const ToyModel& model, std::span<const LoraAdapter> adapters,
                      const TuneConfig& cfg, const TaskDataset& data);

// The k=1 scaling-coefficient case.
TuneResult tune_single(const ToyModel& model, const LoraAdapter& adapter, const TuneConfig& cfg,
                       const TaskDataset& data);

// Fresh adapter for joint tuning: A random, B zero.
LoraAdapter make_untrained_adapter(const ModelConfig& config, std::size_t rank,
                                   std::uint64_t seed, const std::string& name);

}  // namespace loramerge

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loramerge/tasks.hpp"

namespace loramerge {

enum class OptimizerKind { sgd, adam };

const char* to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

enum class ModuleCoverage { full, attention, qv };

const char* to_string(ModuleCoverage c);
ModuleCoverage coverage_from_string(const std::string& s);
std::vector<ModuleType> coverage_types(ModuleCoverage c);

struct TrainLoraOptions {
    std::size_t rank = 8;
    int steps = 400;
    double lr = 3e-4;
    OptimizerKind optimizer = OptimizerKind::adam;
    double clip_norm = 1.0;
    int batch_size = 20;  // deterministic cyclic minibatches from the train split
    double alpha_factor = 2.0;  // alpha = alpha_factor * rank
    ModuleCoverage coverage = ModuleCoverage::full;
    std::uint64_t seed = 0;
    std::string name = "target";
};

struct TrainedLora {
    LoraAdapter adapter;  // parameters at the best-validation checkpoint
    std::vector<double> train_loss;  // per step
    std::vector<double> val_loss;    // index 0 = before any update
    int best_step = 0;               // step whose parameters were returned
    double best_val_loss = 0.0;
};

// Gradient training of a LoRA on the task's train split; returns the
// snapshot with the lowest validation loss (ties keep the earliest step).
TrainedLora train_target_lora(const ToyModel& model, const TaskDataset& data,
                              const TrainLoraOptions& options);

// Convenience overload with the desk-scale defaults.
TrainedLora train_target_lora(const ToyModel& model, const TaskDataset& data, std::size_t rank,
                              int steps, double lr, std::uint64_t seed);

struct PoolMember {
    TaskDescriptor descriptor;
    std::size_t rank;
    ModuleCoverage coverage;
};

// One adapter per descriptor; rank and coverage assigned round-robin from
// the provided lists. Adapter i is named "p{i}_{descriptor}".
std::vector<LoraAdapter> build_synthetic_pool(const ToyModel& model,
                                              const std::vector<TaskDescriptor>& descriptors,
                                              const std::vector<std::size_t>& ranks,
                                              const std::vector<ModuleCoverage>& coverages,
                                              std::uint64_t seed,
                                              const TrainLoraOptions& base_options = {});

}  // namespace loramerge

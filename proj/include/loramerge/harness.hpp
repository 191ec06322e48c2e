// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include <json.hpp>

#include "loramerge/selection.hpp"
#include "loramerge/train.hpp"
#include "loramerge/tuner.hpp"

namespace loramerge {

using json = nlohmann::ordered_json;

// --- method specifications --------------------------------------------------

enum class MergeMethod { simple_average, ties, tsv, adaptive };

const char* to_string(MergeMethod m);
MergeMethod merge_method_from_string(const std::string& s);

// TIES per-adapter coefficient grid values.
enum class TiesCoeff { one, zero_point_three, one_over_k };

const char* to_string(TiesCoeff c);
TiesCoeff ties_coeff_from_string(const std::string& s);
double ties_coeff_value(TiesCoeff c, std::size_t k);

struct MethodSpec {
    std::string name;
    MergeMethod method = MergeMethod::adaptive;
    SelectionStrategy selection = SelectionStrategy::random;
    double ties_prune_frac = 0.6;
    TiesCoeff ties_coeff = TiesCoeff::one_over_k;
    std::size_t tsv_q = 8;
    TuneConfig tune = TuneConfig::defaults(TuneMode::grad_based);

    // Table-style presets: simple_average, ties, tsv, adamerging, pi_tuning,
    // lorahub, ours.
    static MethodSpec preset(const std::string& name);
};

void to_json(json& j, const MethodSpec& m);
void from_json(const json& j, MethodSpec& m);

// --- pool specification -------------------------------------------------------

struct PoolSpec {
    std::string directory;  // load a user pool from disk when non-empty
    // synthetic pool otherwise:
    std::vector<TaskDescriptor> descriptors;
    std::vector<std::size_t> ranks{2, 4, 8};
    std::vector<ModuleCoverage> coverages{ModuleCoverage::full, ModuleCoverage::full,
                                          ModuleCoverage::attention, ModuleCoverage::full,
                                          ModuleCoverage::qv};
    int train_steps = 300;
    std::uint64_t seed = 0;
};

void to_json(json& j, const PoolSpec& p);
void from_json(const json& j, PoolSpec& p);

struct WarmupSpec {
    TaskDescriptor task;
    int steps = 400;
    std::size_t rank = 8;
};

void to_json(json& j, const WarmupSpec& w);
void from_json(const json& j, WarmupSpec& w);

struct ExperimentConfig {
    ModelConfig model;
    std::uint64_t model_seed = 1;
    std::optional<WarmupSpec> warmup;  // generic adapter folded into the base
    std::vector<TaskDescriptor> tasks;
    PoolSpec pool;
    std::vector<MethodSpec> methods;
    std::vector<std::size_t> ks{10};
    bool include_target_lora = false;
    bool reinit_pool = false;  // reinitialize selected adapters (target kept intact)
    std::vector<std::uint64_t> seeds{1};
    std::size_t target_rank = 8;
    int target_steps = 400;
    double target_lr = 3e-4;
    std::string cache_dir = "loramerge_cache";
    std::string report_path;
    int workers = 0;  // 0 -> LORAMERGE_WORKERS or hardware concurrency
};

void to_json(json& j, const ExperimentConfig& c);
void from_json(const json& j, ExperimentConfig& c);

void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const TaskDescriptor& d);
void from_json(const json& j, TaskDescriptor& d);
void to_json(json& j, const TuneConfig& c);
void from_json(const json& j, TuneConfig& c);
void to_json(json& j, const SelectionResult& r);

// Desk-scale defaults: a 12-task suite and a 40-descriptor pool mixing
// near-transfer neighbours, far-transfer tasks, and label-noise junk.
std::vector<TaskDescriptor> standard_task_suite();
std::vector<TaskDescriptor> standard_pool_descriptors();
WarmupSpec standard_warmup();

// --- reports -----------------------------------------------------------------

struct CellResult {
    std::string task;
    std::string method;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    double test_accuracy = 0.0;
    double base_accuracy = 0.0;
    double target_accuracy = 0.0;
    SelectionResult selection;
    std::vector<std::string> merged_adapters;   // pool members actually merged
    std::vector<double> coefficient_distribution;  // parallel to merged_adapters
    int selected_step = 0;
    double selected_metric = 0.0;
    std::vector<double> train_history;  // per-step tuning objective
    std::vector<double> val_history;    // per-step validation loss (grad modes)
    double wall_seconds = 0.0;
    json config_echo;  // everything needed to re-run this cell
};

void to_json(json& j, const CellResult& c);
void from_json(const json& j, CellResult& c);

struct ExperimentReport {
    json header;
    std::vector<CellResult> cells;

    bool has_failures() const;
    void write_jsonl(const std::string& path) const;
    static ExperimentReport read_jsonl(const std::string& path);

    // Aggregates per (method, k): mean accuracy, mean relative improvement
    // vs the prompting and target-LoRA baselines (cells with a zero baseline
    // are excluded from relative means), tasks outperformed, and bucket
    // counts of relative improvement at the given thresholds.
    json summarize(const std::vector<double>& buckets = {0.01, 0.05}) const;
    std::string summarize_csv(const std::vector<double>& buckets = {0.01, 0.05}) const;
};

// --- experiment drivers --------------------------------------------------------

// Full grid over tasks x methods x ks x seeds. Failed cells are recorded and
// never abort the sweep.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// Re-execute one cell from its embedded config echo.
CellResult rerun_cell(const json& config_echo);

// Min-max normalize each group's activated coefficients to [0,1] (an
// all-equal group becomes 1/k), divide by the group sum, then average per
// adapter across groups. Output sums to 1.
std::vector<double> coefficient_distribution(const CoefficientTable& table);

// Q4 sliding window: rank the other tasks' target adapters by evaluation on
// this task's 100 examples, drop the top omit_m, merge the next k-1 with the
// task's own adapter and tune with the "ours" preset. One cell per
// (task, omit_m), plus a "reinit" baseline cell per task.
ExperimentReport inhouse_window_experiment(const ExperimentConfig& cfg, std::size_t k,
                                           const std::vector<int>& omit_ms);

struct DesignSpaceAxes {
    std::vector<GranularityKind> granularities;
    std::vector<SelectionStrategy> selections;
    std::vector<Activation> activations;
    std::vector<std::size_t> ks;
};

// Appendix-style ablation: ours-like gradient-based tuning swept over the
// design axes with shared seeds and shared target adapters.
ExperimentReport sweep_design_space(const ExperimentConfig& cfg, const DesignSpaceAxes& axes);

// TIES hyperparameter grid: prune fraction x coefficient x {with, without}
// the target adapter, averaged over the config's seeds.
ExperimentReport ties_grid(const ExperimentConfig& cfg,
                           const std::vector<double>& prune_fracs = {0.2, 0.4, 0.6},
                           const std::vector<TiesCoeff>& coeffs = {TiesCoeff::one,
                                                                   TiesCoeff::zero_point_three,
                                                                   TiesCoeff::one_over_k});

}  // namespace loramerge

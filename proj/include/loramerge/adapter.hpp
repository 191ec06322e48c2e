// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "loramerge/config.hpp"
#include "loramerge/matrix.hpp"

namespace loramerge {

enum class LoraVariant { standard, rank_stabilized };

const char* to_string(LoraVariant v);
LoraVariant lora_variant_from_string(const std::string& s);

// alpha/r for standard, alpha/sqrt(r) for rank-stabilized.
double lora_scaling(double alpha, std::size_t rank, LoraVariant variant);

// One low-rank factor pair: delta = scaling * b @ a.
struct LoraPair {
    Matrix a;  // r x in
    Matrix b;  // out x r
    double scaling = 1.0;
};

struct LoraAdapter {
    std::string name;
    std::map<ModulePath, LoraPair> modules;
    double alpha = 16.0;
    std::size_t rank = 8;
    LoraVariant variant = LoraVariant::standard;
    std::map<std::string, std::string> metadata;
};

// Dense per-module deltas; modules absent from the map are implicitly zero.
struct TaskVectorSet {
    std::string name;
    std::map<ModulePath, Matrix> deltas;
};

enum class DefectKind { shape_mismatch, nan_or_inf, abnormal_magnitude, unsupported_feature };

const char* to_string(DefectKind k);

struct ValidationReport {
    struct Reason {
        DefectKind kind;
        std::string detail;
    };
    std::string adapter;
    std::vector<Reason> reasons;

    bool accepted() const { return reasons.empty(); }
    bool has(DefectKind k) const {
        for (const auto& r : reasons)
            if (r.kind == k) return true;
        return false;
    }
};

inline constexpr double kDefaultMagnitudeCap = 1e3;

// Undecoded adapter as it sits on disk: PEFT-named tensors plus the sidecar
// config. Kept raw so validation can report NaNs and shape defects instead
// of refusing to represent them.
struct RawAdapter {
    std::string name;
    std::map<std::string, Matrix> tensors;
    double alpha = 16.0;
    std::size_t rank = 8;
    LoraVariant variant = LoraVariant::standard;
    std::map<std::string, std::string> metadata;
};

// --- I/O ------------------------------------------------------------------

// PEFT tensor name for one factor:
// base_model.model.model.layers.{l}.{self_attn|mlp}.{type}.{lora_A|lora_B}.weight
std::string peft_tensor_name(const ModulePath& p, bool is_a);
// Parses a PEFT tensor name; nullopt when the name is not a LoRA factor of a
// known module type (embeddings, heads, foreign layouts).
std::optional<std::pair<ModulePath, bool>> parse_peft_tensor_name(const std::string& name);

// Sidecar config path for an adapter container ("x.safetensors" -> "x.json").
std::string sidecar_path(const std::string& adapter_path);

// Reads container + sidecar without any base-model checks.
RawAdapter load_raw_adapter(const std::string& path);

// Strict load: raw load, then validation against the base config; rejected
// adapters raise ValidationError listing every reason.
LoraAdapter load_adapter(const std::string& path, const ModelConfig& base_config,
                         double magnitude_cap = kDefaultMagnitudeCap);

// Writes container (F32 tensors) + sidecar. Deterministic byte output.
void save_adapter(const LoraAdapter& adapter, const std::string& path);

// --- Validation -----------------------------------------------------------

ValidationReport validate_adapter(const RawAdapter& raw, const ModelConfig& base_config,
                                  double magnitude_cap = kDefaultMagnitudeCap);
ValidationReport validate_adapter(const LoraAdapter& adapter, const ModelConfig& base_config,
                                  double magnitude_cap = kDefaultMagnitudeCap);

// --- Transforms -----------------------------------------------------------

// Per module, delta = scaling * B @ A.
TaskVectorSet materialize_task_vectors(const LoraAdapter& adapter);

// Zero-pad every A to r_max x in and B to out x r_max; deltas unchanged.
LoraAdapter pad_to_rank(const LoraAdapter& adapter, std::size_t r_max);

// Replace each factor with N(0, std) samples where std is the population
// standard deviation of the original matrix. Shapes/scaling/metadata kept.
LoraAdapter reinit_matched(const LoraAdapter& adapter, std::uint64_t seed);

enum class FeatureTransform { identity, absolute, square, clamp_nonneg };

// Concatenation of elementwise-transformed deltas over a fixed module
// universe; absent modules contribute zeros. The base config supplies the
// per-module shapes so absent blocks have well-defined lengths.
std::vector<double> flatten_features(const TaskVectorSet& tvs, FeatureTransform transform,
                                     const std::vector<ModulePath>& module_universe,
                                     const ModelConfig& config);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// Dense-delta export of a merged set; tensor names are
// "model.{module path}.weight".
void save_task_vectors(const TaskVectorSet& tvs, const std::string& path);

}  // namespace loramerge

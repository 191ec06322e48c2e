// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "loramerge/errors.hpp"

namespace loramerge {

// The seven targetable projection types of a Llama-shaped block.
enum class ModuleType : int {
    q_proj = 0, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj,
};

inline constexpr int kNumModuleTypes = 7;

inline constexpr std::array<const char*, kNumModuleTypes> kModuleTypeNames{
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"};

inline bool is_attention(ModuleType t) { return static_cast<int>(t) <= static_cast<int>(ModuleType::o_proj); }

const char* to_string(ModuleType t);
ModuleType module_type_from_string(const std::string& name);  // throws ArgumentError

// (layer, module type) address of one targetable weight matrix.
struct ModulePath {
    int layer = 0;
    ModuleType type = ModuleType::q_proj;

    auto operator<=>(const ModulePath&) const = default;
};

// "layers.{l}.{self_attn|mlp}.{type}"
std::string to_string(const ModulePath& p);
ModulePath module_path_from_string(const std::string& s);  // throws ArgumentError

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_seq = 32;

    void validate() const {
        if (vocab < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq < 2)
            throw ArgumentError("model config: all dimensions must be positive");
        if (d_model % static_cast<std::size_t>(n_heads) != 0)
            throw ArgumentError("model config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
    }

    // Output/input dimensions of a projection type.
    std::size_t out_dim(ModuleType t) const {
        switch (t) {
            case ModuleType::gate_proj:
            case ModuleType::up_proj: return d_ff;
            case ModuleType::down_proj: return d_model;
            default: return d_model;
        }
    }
    std::size_t in_dim(ModuleType t) const {
        return t == ModuleType::down_proj ? d_ff : d_model;
    }

    bool contains(const ModulePath& p) const {
        return p.layer >= 0 && p.layer < n_layers;
    }

    // All L x 7 targetable paths, ordered by (layer, type).
    std::vector<ModulePath> all_module_paths() const;

    bool operator==(const ModelConfig&) const = default;
};

}  // namespace loramerge

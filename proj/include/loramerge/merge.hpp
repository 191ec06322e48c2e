// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "loramerge/model.hpp"

namespace loramerge {

enum class GranularityKind { model, layer, sublayer, module };

const char* to_string(GranularityKind k);
GranularityKind granularity_from_string(const std::string& s);

// Coefficient indexing resolution. Group index of module (l, m):
//   model    -> 0
//   layer    -> l
//   sublayer -> 2l + (0 for attention, 1 for feed-forward)
//   module   -> l * 7 + index(m)
struct Granularity {
    GranularityKind kind = GranularityKind::module;
    int n_layers = 0;

    static Granularity of(GranularityKind kind, const ModelConfig& cfg) {
        return Granularity{kind, cfg.n_layers};
    }

    int group_count() const {
        switch (kind) {
            case GranularityKind::model: return 1;
            case GranularityKind::layer: return n_layers;
            case GranularityKind::sublayer: return 2 * n_layers;
            case GranularityKind::module: return n_layers * kNumModuleTypes;
        }
        return 0;
    }

    int group_of(const ModulePath& p) const {
        switch (kind) {
            case GranularityKind::model: return 0;
            case GranularityKind::layer: return p.layer;
            case GranularityKind::sublayer: return 2 * p.layer + (is_attention(p.type) ? 0 : 1);
            case GranularityKind::module:
                return p.layer * kNumModuleTypes + static_cast<int>(p.type);
        }
        return 0;
    }

    bool operator==(const Granularity&) const = default;
};

enum class Activation { softmax, leaky_relu, linear };
enum class CoeffInit { zeros, uniform_1_over_k };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);
const char* to_string(CoeffInit i);
CoeffInit coeff_init_from_string(const std::string& s);

inline constexpr double kLeakyReluSlope = 0.01;

// Raw merging coefficients, k adapters x group_count groups.
struct CoefficientTable {
    Matrix raw;
    Granularity granularity;
    Activation activation = Activation::linear;

    static CoefficientTable make(std::size_t k, Granularity g, Activation a, CoeffInit init);
    std::size_t k() const { return raw.rows(); }
};

// Softmax per group-column across the k adapters, leaky ReLU elementwise,
// or identity.
Matrix apply_activation(const CoefficientTable& table);

// Tape counterpart used when coefficients are trainable leaves.
Tape::Id apply_activation_node(Tape& tape, Tape::Id raw, Activation activation);

// Merged[p] = sum_i activated[i, group(p)] * delta_i[p] over the union of
// module paths; adapters lacking a module contribute zero.
TaskVectorSet combine(std::span<const TaskVectorSet> sets, const CoefficientTable& table);

// Eq.-style weighted sum with per-adapter scalars; uniform 1/k by default.
TaskVectorSet simple_average(std::span<const TaskVectorSet> sets,
                             const std::vector<double>* alphas = nullptr);

// Trim by magnitude (keep ceil((1-prune_frac)*n*m) entries, threshold ties
// broken by flat index), elect the dominant sign per entry (zero sum elects
// positive), average adapters agreeing with the elected sign, scale by coeff.
// Applied per module independently.
TaskVectorSet ties_merge(std::span<const TaskVectorSet> sets, double prune_frac, double coeff);

// Per module: sum_i weights[i] * rank-q SVD reconstruction of delta_i.
TaskVectorSet tsv_merge(std::span<const TaskVectorSet> sets, std::size_t q,
                        const std::vector<double>& weights);

// W' = W + delta per module; the input model is untouched.
ToyModel merge_into_model(const ToyModel& model, const TaskVectorSet& merged);

}  // namespace loramerge

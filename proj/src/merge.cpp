// SPDX-License-Identifier: Apache-2.0
#include "loramerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "loramerge/svd.hpp"

namespace loramerge {

const char* to_string(GranularityKind k) {
    switch (k) {
        case GranularityKind::model: return "model";
        case GranularityKind::layer: return "layer";
        case GranularityKind::sublayer: return "sublayer";
        case GranularityKind::module: return "module";
    }
    return "?";
}

GranularityKind granularity_from_string(const std::string& s) {
    for (const auto k : {GranularityKind::model, GranularityKind::layer,
                         GranularityKind::sublayer, GranularityKind::module})
        if (s == to_string(k)) return k;
    throw ArgumentError("unknown granularity: " + s);
}

const char* to_string(Activation a) {
    switch (a) {
        case Activation::softmax: return "softmax";
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::linear: return "linear";
    }
    return "?";
}

Activation activation_from_string(const std::string& s) {
    for (const auto a : {Activation::softmax, Activation::leaky_relu, Activation::linear})
        if (s == to_string(a)) return a;
    throw ArgumentError("unknown activation: " + s);
}

const char* to_string(CoeffInit i) {
    return i == CoeffInit::zeros ? "zeros" : "uniform_1_over_k";
}

CoeffInit coeff_init_from_string(const std::string& s) {
    if (s == "zeros") return CoeffInit::zeros;
    if (s == "uniform_1_over_k") return CoeffInit::uniform_1_over_k;
    throw ArgumentError("unknown coefficient init: " + s);
}

CoefficientTable CoefficientTable::make(std::size_t k, Granularity g, Activation a,
                                        CoeffInit init) {
    if (k < 1) throw ArgumentError("coefficient table: k must be >= 1");
    CoefficientTable t;
    t.granularity = g;
    t.activation = a;
    t.raw = init == CoeffInit::zeros
                ? Matrix::zeros(k, static_cast<std::size_t>(g.group_count()))
                : Matrix::filled(k, static_cast<std::size_t>(g.group_count()),
                                 1.0 / static_cast<double>(k));
    return t;
}

Matrix apply_activation(const CoefficientTable& table) {
    const Matrix& raw = table.raw;
    if (!raw.all_finite()) throw NumericError("coefficient table contains non-finite entries");
    switch (table.activation) {
        case Activation::linear: return raw;
        case Activation::leaky_relu: {
            Matrix out(raw.rows(), raw.cols());
            for (std::size_t i = 0; i < raw.size(); ++i) {
                const double v = raw.data()[i];
                out.data()[i] = v >= 0.0 ? v : kLeakyReluSlope * v;
            }
            return out;
        }
        case Activation::softmax: {
            Matrix out(raw.rows(), raw.cols());
            for (std::size_t c = 0; c < raw.cols(); ++c) {
                double mx = -1e300;
                for (std::size_t r = 0; r < raw.rows(); ++r) mx = std::max(mx, raw(r, c));
                double sum = 0.0;
                for (std::size_t r = 0; r < raw.rows(); ++r)
                    sum += (out(r, c) = std::exp(raw(r, c) - mx));
                for (std::size_t r = 0; r < raw.rows(); ++r) out(r, c) /= sum;
            }
            return out;
        }
    }
    throw ArgumentError("unknown activation");
}

Tape::Id apply_activation_node(Tape& tape, Tape::Id raw, Activation activation) {
    switch (activation) {
        case Activation::linear: return raw;
        case Activation::leaky_relu: return tape.leaky_relu(raw, kLeakyReluSlope);
        case Activation::softmax: return tape.softmax_cols(raw);
    }
    throw ArgumentError("unknown activation");
}

namespace {

std::set<ModulePath> union_paths(std::span<const TaskVectorSet> sets) {
    std::set<ModulePath> paths;
    for (const TaskVectorSet& s : sets)
        for (const auto& [p, d] : s.deltas) paths.insert(p);
    return paths;
}

void check_consistent_shape(const ModulePath& p, const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw DimensionError("merge: module " + to_string(p) + " deltas have shapes " +
                             a.shape() + " and " + b.shape());
}

}  // namespace

TaskVectorSet combine(std::span<const TaskVectorSet> sets, const CoefficientTable& table) {
    if (sets.size() != table.k())
        throw ArgumentError("combine: " + std::to_string(sets.size()) + " sets but table has k=" +
                            std::to_string(table.k()));
    const Matrix activated = apply_activation(table);
    TaskVectorSet out;
    out.name = "merged";
    for (const ModulePath& p : union_paths(sets)) {
        Matrix* acc = nullptr;
        for (std::size_t i = 0; i < sets.size(); ++i) {
            const auto it = sets[i].deltas.find(p);
            if (it == sets[i].deltas.end()) continue;
            const int g = table.granularity.group_of(p);
            if (g < 0 || g >= table.granularity.group_count() ||
                static_cast<std::size_t>(g) >= activated.cols())
                throw ArgumentError("combine: module " + to_string(p) +
                                    " maps outside the coefficient table");
            if (!acc) {
                acc = &out.deltas.emplace(p, Matrix(it->second.rows(), it->second.cols()))
                           .first->second;
            }
            check_consistent_shape(p, *acc, it->second);
            axpy_into(*acc, activated(i, static_cast<std::size_t>(g)), it->second);
        }
    }
    return out;
}

TaskVectorSet simple_average(std::span<const TaskVectorSet> sets,
                             const std::vector<double>* alphas) {
    if (sets.empty()) throw ArgumentError("simple_average: no sets");
    if (alphas && alphas->size() != sets.size())
        throw ArgumentError("simple_average: " + std::to_string(alphas->size()) +
                            " alphas for " + std::to_string(sets.size()) + " sets");
    TaskVectorSet out;
    out.name = "averaged";
    const double uniform = 1.0 / static_cast<double>(sets.size());
    for (const ModulePath& p : union_paths(sets)) {
        Matrix* acc = nullptr;
        for (std::size_t i = 0; i < sets.size(); ++i) {
            const auto it = sets[i].deltas.find(p);
            if (it == sets[i].deltas.end()) continue;
            if (!acc)
                acc = &out.deltas.emplace(p, Matrix(it->second.rows(), it->second.cols()))
                           .first->second;
            check_consistent_shape(p, *acc, it->second);
            axpy_into(*acc, alphas ? (*alphas)[i] : uniform, it->second);
        }
    }
    return out;
}

TaskVectorSet ties_merge(std::span<const TaskVectorSet> sets, double prune_frac, double coeff) {
    if (sets.empty()) throw ArgumentError("ties_merge: no sets");
    if (prune_frac < 0.0 || prune_frac >= 1.0)
        throw ArgumentError("ties_merge: prune_frac must lie in [0, 1)");

    TaskVectorSet out;
    out.name = "ties";
    for (const ModulePath& p : union_paths(sets)) {
        // trimmed copies of every adapter's delta for this module
        std::vector<Matrix> trimmed;
        std::size_t rows = 0, cols = 0;
        for (const TaskVectorSet& s : sets) {
            const auto it = s.deltas.find(p);
            if (it == s.deltas.end()) continue;
            if (rows == 0) {
                rows = it->second.rows();
                cols = it->second.cols();
            }
            if (it->second.rows() != rows || it->second.cols() != cols)
                throw DimensionError("ties_merge: inconsistent shapes at " + to_string(p));
            Matrix t = it->second;
            const std::size_t total = t.size();
            const std::size_t keep =
                static_cast<std::size_t>(std::ceil((1.0 - prune_frac) * static_cast<double>(total)));
            if (keep < total) {
                std::vector<std::size_t> idx(total);
                std::iota(idx.begin(), idx.end(), 0);
                std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                    const double ma = std::fabs(t.data()[a]);
                    const double mb = std::fabs(t.data()[b]);
                    if (ma != mb) return ma > mb;
                    return a < b;  // threshold ties: lower flat index survives
                });
                for (std::size_t i = keep; i < total; ++i) t.data()[idx[i]] = 0.0;
            }
            trimmed.push_back(std::move(t));
        }
        if (trimmed.empty()) continue;

        Matrix merged(rows, cols);
        for (std::size_t e = 0; e < merged.size(); ++e) {
            double sum = 0.0;
            for (const Matrix& t : trimmed) sum += t.data()[e];
            const double elected = sum >= 0.0 ? 1.0 : -1.0;  // zero sum elects positive
            double total = 0.0;
            int agreeing = 0;
            for (const Matrix& t : trimmed) {
                const double v = t.data()[e];
                if (v == 0.0) continue;
                if ((v > 0.0 ? 1.0 : -1.0) == elected) {
                    total += v;
                    ++agreeing;
                }
            }
            merged.data()[e] = agreeing > 0 ? coeff * (total / agreeing) : 0.0;
        }
        out.deltas.emplace(p, std::move(merged));
    }
    return out;
}

TaskVectorSet tsv_merge(std::span<const TaskVectorSet> sets, std::size_t q,
                        const std::vector<double>& weights) {
    if (sets.empty()) throw ArgumentError("tsv_merge: no sets");
    if (weights.size() != sets.size())
        throw ArgumentError("tsv_merge: " + std::to_string(weights.size()) + " weights for " +
                            std::to_string(sets.size()) + " sets");
    for (const TaskVectorSet& s : sets)
        for (const auto& [p, d] : s.deltas)
            if (q < 1 || q > std::min(d.rows(), d.cols()))
                throw ArgumentError("tsv_merge: q=" + std::to_string(q) +
                                    " out of range for module " + to_string(p) + " with shape " +
                                    d.shape());

    TaskVectorSet out;
    out.name = "tsv";
    for (const ModulePath& p : union_paths(sets)) {
        Matrix* acc = nullptr;
        for (std::size_t i = 0; i < sets.size(); ++i) {
            const auto it = sets[i].deltas.find(p);
            if (it == sets[i].deltas.end()) continue;
            if (!acc)
                acc = &out.deltas.emplace(p, Matrix(it->second.rows(), it->second.cols()))
                           .first->second;
            check_consistent_shape(p, *acc, it->second);
            if (weights[i] == 0.0) continue;
            const Matrix truncated = svd_reconstruct(truncated_svd(it->second, q));
            axpy_into(*acc, weights[i], truncated);
        }
    }
    return out;
}

ToyModel merge_into_model(const ToyModel& model, const TaskVectorSet& merged) {
    ToyModel out = model;
    for (const auto& [p, delta] : merged.deltas) {
        const auto it = out.weights.find(p);
        if (it == out.weights.end())
            throw DimensionError("merge_into_model: module " + to_string(p) +
                                 " does not exist in the model");
        if (!it->second.same_shape(delta))
            throw DimensionError("merge_into_model: module " + to_string(p) + " has shape " +
                                 it->second.shape() + ", delta is " + delta.shape());
        it->second = add(it->second, delta);
    }
    return out;
}

}  // namespace loramerge

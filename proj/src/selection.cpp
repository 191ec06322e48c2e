// SPDX-License-Identifier: Apache-2.0
#include "loramerge/selection.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace loramerge {

const char* to_string(SelectionStrategy s) {
    switch (s) {
        case SelectionStrategy::random: return "random";
        case SelectionStrategy::evaluation: return "evaluation";
        case SelectionStrategy::cosine: return "cosine";
        case SelectionStrategy::abs: return "abs";
        case SelectionStrategy::clamp: return "clamp";
        case SelectionStrategy::quasi_fim: return "quasi_fim";
    }
    return "?";
}

SelectionStrategy selection_from_string(const std::string& s) {
    for (const auto v : {SelectionStrategy::random, SelectionStrategy::evaluation,
                         SelectionStrategy::cosine, SelectionStrategy::abs,
                         SelectionStrategy::clamp, SelectionStrategy::quasi_fim})
        if (s == to_string(v)) return v;
    throw ArgumentError("unknown selection strategy: " + s);
}

namespace {

void require_k(std::size_t k, std::size_t n) {
    if (k < 1 || k > n)
        throw ArgumentError("selection: k=" + std::to_string(k) + " out of range for pool of " +
                            std::to_string(n));
}

// Rank by (score desc, name asc) and keep the top k.
SelectionResult ranked(SelectionStrategy strategy, std::span<const LoraAdapter> pool,
                       const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return pool[a].name < pool[b].name;
    });
    SelectionResult result;
    result.strategy = strategy;
    for (std::size_t i = 0; i < k; ++i) {
        result.names.push_back(pool[order[i]].name);
        result.scores.push_back(scores[order[i]]);
    }
    return result;
}

}  // namespace

SelectionResult select_random(std::span<const LoraAdapter> pool, std::size_t k,
                              std::uint64_t seed) {
    require_k(k, pool.size());
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "select_random"));
    SelectionResult result;
    result.strategy = SelectionStrategy::random;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng.below(idx.size() - i);
        std::swap(idx[i], idx[j]);
        result.names.push_back(pool[idx[i]].name);
        result.scores.push_back(0.0);
    }
    return result;
}

SelectionResult select_by_evaluation(std::span<const LoraAdapter> pool, const ToyModel& model,
                                     std::span<const Example> split, std::size_t k) {
    require_k(k, pool.size());
    if (split.empty()) throw ArgumentError("select_by_evaluation: empty split");
    std::vector<double> scores(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const TaskVectorSet tvs = materialize_task_vectors(pool[i]);
        scores[i] = evaluate_accuracy(model, &tvs, split);
    }
    return ranked(SelectionStrategy::evaluation, pool, scores, k);
}

SelectionResult select_by_similarity(std::span<const LoraAdapter> pool,
                                     const LoraAdapter& reference, SelectionStrategy metric,
                                     std::size_t k, const ModelConfig& config) {
    require_k(k, pool.size());
    FeatureTransform transform;
    switch (metric) {
        case SelectionStrategy::cosine: transform = FeatureTransform::identity; break;
        case SelectionStrategy::abs: transform = FeatureTransform::absolute; break;
        case SelectionStrategy::clamp: transform = FeatureTransform::clamp_nonneg; break;
        case SelectionStrategy::quasi_fim: transform = FeatureTransform::square; break;
        default:
            throw ArgumentError("select_by_similarity: metric must be a similarity strategy");
    }

    std::set<ModulePath> universe_set;
    for (const auto& [p, pair] : reference.modules) universe_set.insert(p);
    for (const LoraAdapter& a : pool)
        for (const auto& [p, pair] : a.modules) universe_set.insert(p);
    const std::vector<ModulePath> universe(universe_set.begin(), universe_set.end());

    const auto ref_features =
        flatten_features(materialize_task_vectors(reference), transform, universe, config);
    std::vector<double> scores(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto features =
            flatten_features(materialize_task_vectors(pool[i]), transform, universe, config);
        scores[i] = cosine_similarity(ref_features, features);
    }
    return ranked(metric, pool, scores, k);
}

}  // namespace loramerge

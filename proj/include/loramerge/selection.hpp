// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "loramerge/model.hpp"

namespace loramerge {

enum class SelectionStrategy { random, evaluation, cosine, abs, clamp, quasi_fim };

const char* to_string(SelectionStrategy s);
SelectionStrategy selection_from_string(const std::string& s);

// Chosen adapters best-first with their scores (zero for random selection).
struct SelectionResult {
    SelectionStrategy strategy = SelectionStrategy::random;
    std::vector<std::string> names;
    std::vector<double> scores;
};

// Uniform sample of k adapters without replacement.
SelectionResult select_random(std::span<const LoraAdapter> pool, std::size_t k,
                              std::uint64_t seed);

// Score = greedy exact-match accuracy of the adapter's overlay on the
// split; ties broken by adapter name ascending.
SelectionResult select_by_evaluation(std::span<const LoraAdapter> pool, const ToyModel& model,
                                     std::span<const Example> split, std::size_t k);

// Score = cosine over transformed flattened deltas against the reference:
// cosine -> identity, abs -> absolute, clamp -> clamp-nonneg (both sides),
// quasi_fim -> elementwise square. Zero-norm features score 0.
SelectionResult select_by_similarity(std::span<const LoraAdapter> pool,
                                     const LoraAdapter& reference, SelectionStrategy metric,
                                     std::size_t k, const ModelConfig& config);

}  // namespace loramerge

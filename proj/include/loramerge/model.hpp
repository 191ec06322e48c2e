// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "loramerge/adapter.hpp"
#include "loramerge/config.hpp"
#include "loramerge/tape.hpp"

namespace loramerge {

inline constexpr double kRmsEps = 1e-5;

// Llama-shaped decoder-only toy transformer: RMS-norm, multi-head causal
// attention, gated-SiLU feed-forward, learned absolute positions, untied
// output head. Seven targetable projection types per layer.
struct ToyModel {
    ModelConfig config;
    std::uint64_t seed = 0;
    Matrix embed;                         // vocab x d
    Matrix pos;                           // max_seq x d
    std::map<ModulePath, Matrix> weights; // out x in per projection
    std::vector<Matrix> attn_norm_gain;   // per layer, 1 x d
    std::vector<Matrix> ffn_norm_gain;    // per layer, 1 x d
    Matrix final_norm_gain;               // 1 x d
    Matrix head;                          // vocab x d
};

// Seeded N(0, 0.02) init everywhere except o_proj, which follows the
// zero-init output-projection convention; norm gains start at 1.
ToyModel build_model(const ModelConfig& config, std::uint64_t seed);

struct Example {
    std::vector<std::int32_t> prompt;
    std::vector<std::int32_t> answer;

    bool operator==(const Example&) const = default;
};

// Packed batch with a uniform timeline (prompt + answer) per example.
struct Batch {
    int batch = 0;
    int seq = 0;         // prompt_len + answer_len
    int prompt_len = 0;
    std::vector<std::int32_t> tokens;  // batch x seq

    static Batch pack(std::span<const Example> examples);
};

// Per-module task-vector nodes already on the tape; effective weight for a
// module is base + delta.
using OverlayNodes = std::map<ModulePath, Tape::Id>;

// Logits over the first `input_len` positions of every sequence in the
// batch; rows are batch x input_len.
Tape::Id build_logits(Tape& tape, const ToyModel& model, const OverlayNodes* overlay,
                      const Batch& batch, int input_len);

// Mean next-token cross entropy over answer positions only.
Tape::Id build_loss(Tape& tape, const ToyModel& model, const OverlayNodes* overlay,
                    const Batch& batch);

// Places each overlay delta on the tape as a constant leaf.
OverlayNodes overlay_constants(Tape& tape, const TaskVectorSet& overlay);

// Evaluation entry points (overlay may be null for the bare model).
double forward_loss(const ToyModel& model, const TaskVectorSet* overlay,
                    std::span<const Example> batch);

// Greedy decode of answer positions; exact-match fraction.
double evaluate_accuracy(const ToyModel& model, const TaskVectorSet* overlay,
                         std::span<const Example> split);

// Greedy continuation of each prompt by `answer_len` tokens.
std::vector<std::vector<std::int32_t>> greedy_decode(const ToyModel& model,
                                                     const TaskVectorSet* overlay,
                                                     std::span<const Example> prompts,
                                                     int answer_len);

}  // namespace loramerge

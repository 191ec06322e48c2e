// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "loramerge/model.hpp"

namespace loramerge {

// Token alphabet shared by all task families.
inline constexpr std::int32_t kTokBos = 0;
inline constexpr std::int32_t kTokSep = 1;
inline constexpr std::int32_t kTokBase = 2;  // payload symbols start here

enum class TaskFamily { modular_add, copy, reverse, sort, parity, projection_classify };

const char* to_string(TaskFamily f);
TaskFamily task_family_from_string(const std::string& s);

// Seeded synthetic token task. `params` fix the underlying function (so two
// descriptors with equal family+params compute the same mapping); `seed`
// only drives example sampling. The shared `label_noise` param (0/1)
// scrambles answers for junk-adapter training.
//
// Families and their params (defaults in parentheses):
//   modular_add:          p (7), distractors (2)
//       prompt  BOS a b d... SEP     answer  (a+b) mod p
//   copy / reverse / sort: n (4), alphabet (8)
//       prompt  BOS x1..xn SEP       answer  payload / reversed / ascending
//   parity:               n (10), relevant (2), rule (0)
//       prompt  BOS bits SEP         answer  XOR of bits at `relevant`
//                                            positions fixed by `rule`
//   projection_classify:  symbols (16), len (6), classes (4), world (0),
//                         angle_deg (0)
//       prompt  BOS s1..sm SEP       answer  argmax_c sum_i G[s_i, c], with
//       G drawn from `world` and the class space rotated by `angle_deg`.
struct TaskDescriptor {
    TaskFamily family = TaskFamily::modular_add;
    std::map<std::string, int> params;
    std::uint64_t seed = 0;

    int param(const std::string& key, int fallback) const {
        const auto it = params.find(key);
        return it == params.end() ? fallback : it->second;
    }

    std::string name() const;

    bool operator==(const TaskDescriptor&) const = default;
};

struct TaskDataset {
    std::vector<Example> train;       // 80
    std::vector<Example> validation;  // 20
    std::vector<Example> test;        // >= 200
};

inline constexpr int kTrainSize = 80;
inline constexpr int kValidationSize = 20;
inline constexpr int kDefaultTestSize = 200;

// Deterministic dataset with disjoint 80/20/test splits (distinct prompts).
TaskDataset generate_task(const TaskDescriptor& desc, std::size_t vocab = 64,
                          int test_size = kDefaultTestSize);

}  // namespace loramerge

// SPDX-License-Identifier: Apache-2.0
#include "loramerge/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace loramerge {

const char* to_string(TaskFamily f) {
    switch (f) {
        case TaskFamily::modular_add: return "modular_add";
        case TaskFamily::copy: return "copy";
        case TaskFamily::reverse: return "reverse";
        case TaskFamily::sort: return "sort";
        case TaskFamily::parity: return "parity";
        case TaskFamily::projection_classify: return "projection_classify";
    }
    return "?";
}

TaskFamily task_family_from_string(const std::string& s) {
    for (const TaskFamily f :
         {TaskFamily::modular_add, TaskFamily::copy, TaskFamily::reverse, TaskFamily::sort,
          TaskFamily::parity, TaskFamily::projection_classify})
        if (s == to_string(f)) return f;
    throw ArgumentError("unknown task family: " + s);
}

std::string TaskDescriptor::name() const {
    std::string n = to_string(family);
    for (const auto& [k, v] : params) n += "_" + k.substr(0, 3) + std::to_string(v);
    n += "_s" + std::to_string(seed);
    return n;
}

namespace {

struct FamilySpec {
    int prompt_payload_len = 0;  // tokens between BOS and SEP
    int answer_len = 0;
    std::size_t distinct_prompts = 0;
};

// Generates the payload symbols of one prompt and its answer.
class Generator {
public:
    Generator(const TaskDescriptor& desc, std::size_t vocab) : desc_(desc), vocab_(vocab) {
        switch (desc.family) {
            case TaskFamily::modular_add: {
                p_ = desc.param("p", 7);
                distractors_ = desc.param("distractors", 2);
                if (p_ < 2 || static_cast<std::size_t>(kTokBase + p_) > vocab_)
                    throw ArgumentError("modular_add: modulus " + std::to_string(p_) +
                                        " does not fit the vocab");
                spec_ = {2 + distractors_, 1, pow_size(p_, 2 + distractors_)};
                break;
            }
            case TaskFamily::copy:
            case TaskFamily::reverse:
            case TaskFamily::sort: {
                n_ = desc.param("n", 4);
                alphabet_ = desc.param("alphabet", 8);
                if (n_ < 1 || alphabet_ < 2 ||
                    static_cast<std::size_t>(kTokBase + alphabet_) > vocab_)
                    throw ArgumentError("sequence family: bad n/alphabet");
                spec_ = {n_, n_, pow_size(alphabet_, n_)};
                break;
            }
            case TaskFamily::parity: {
                n_ = desc.param("n", 10);
                relevant_ = desc.param("relevant", 2);
                if (n_ < 1 || relevant_ < 1 || relevant_ > n_)
                    throw ArgumentError("parity: bad n/relevant");
                // positions fixed by the rule parameter, not the data seed
                Rng rule_rng(
                    derive_seed(static_cast<std::uint64_t>(desc.param("rule", 0)), "parity_rule"));
                std::vector<int> perm(n_);
                std::iota(perm.begin(), perm.end(), 0);
                for (int i = n_ - 1; i > 0; --i)
                    std::swap(perm[i], perm[rule_rng.below(static_cast<std::uint64_t>(i + 1))]);
                positions_.assign(perm.begin(), perm.begin() + relevant_);
                std::sort(positions_.begin(), positions_.end());
                spec_ = {n_, 1, pow_size(2, n_)};
                break;
            }
            case TaskFamily::projection_classify: {
                symbols_ = desc.param("symbols", 16);
                len_ = desc.param("len", 6);
                classes_ = desc.param("classes", 4);
                const int world = desc.param("world", 0);
                const int angle_deg = desc.param("angle_deg", 0);
                if (symbols_ < 2 || len_ < 1 || classes_ < 2 ||
                    static_cast<std::size_t>(kTokBase + std::max(symbols_, classes_)) > vocab_)
                    throw ArgumentError("projection_classify: bad symbols/len/classes");
                Rng wrng(derive_seed(static_cast<std::uint64_t>(world), "projection_world"));
                scores_ = Matrix::randn(static_cast<std::size_t>(symbols_),
                                        static_cast<std::size_t>(classes_), 1.0, wrng);
                // rotate the class space in consecutive 2-D planes
                const double theta = static_cast<double>(angle_deg) * 3.14159265358979323846 / 180.0;
                const double c = std::cos(theta), s = std::sin(theta);
                for (int plane = 0; plane + 1 < classes_; plane += 2) {
                    for (int row = 0; row < symbols_; ++row) {
                        const double x0 = scores_(row, plane), x1 = scores_(row, plane + 1);
                        scores_(row, plane) = c * x0 - s * x1;
                        scores_(row, plane + 1) = s * x0 + c * x1;
                    }
                }
                spec_ = {len_, 1, pow_size(symbols_, len_)};
                break;
            }
        }
    }

    const FamilySpec& spec() const { return spec_; }

    // payload -> answer tokens
    std::vector<std::int32_t> answer_for(const std::vector<std::int32_t>& payload) const {
        switch (desc_.family) {
            case TaskFamily::modular_add: {
                const int a = payload[0] - kTokBase;
                const int b = payload[1] - kTokBase;
                return {static_cast<std::int32_t>(kTokBase + (a + b) % p_)};
            }
            case TaskFamily::copy: return payload;
            case TaskFamily::reverse: {
                std::vector<std::int32_t> r(payload.rbegin(), payload.rend());
                return r;
            }
            case TaskFamily::sort: {
                std::vector<std::int32_t> r = payload;
                std::sort(r.begin(), r.end());
                return r;
            }
            case TaskFamily::parity: {
                int x = 0;
                for (const int pos : positions_) x ^= (payload[pos] - kTokBase) & 1;
                return {static_cast<std::int32_t>(kTokBase + x)};
            }
            case TaskFamily::projection_classify: {
                int best = 0;
                double best_v = -1e300;
                for (int c = 0; c < classes_; ++c) {
                    double v = 0.0;
                    for (const auto tok : payload) v += scores_(tok - kTokBase, c);
                    if (v > best_v + 1e-12) {
                        best_v = v;
                        best = c;
                    }
                }
                return {static_cast<std::int32_t>(kTokBase + best)};
            }
        }
        throw ArgumentError("unknown family");
    }

    std::vector<std::int32_t> sample_payload(Rng& rng) const {
        std::vector<std::int32_t> payload(static_cast<std::size_t>(spec_.prompt_payload_len));
        switch (desc_.family) {
            case TaskFamily::modular_add:
                for (auto& t : payload)
                    t = kTokBase + static_cast<std::int32_t>(rng.below(p_));
                break;
            case TaskFamily::copy:
            case TaskFamily::reverse:
            case TaskFamily::sort:
                for (auto& t : payload)
                    t = kTokBase + static_cast<std::int32_t>(rng.below(alphabet_));
                break;
            case TaskFamily::parity:
                for (auto& t : payload) t = kTokBase + static_cast<std::int32_t>(rng.below(2));
                break;
            case TaskFamily::projection_classify:
                for (auto& t : payload)
                    t = kTokBase + static_cast<std::int32_t>(rng.below(symbols_));
                break;
        }
        return payload;
    }

    // token range used by answers, for label-noise scrambling
    int answer_alphabet() const {
        switch (desc_.family) {
            case TaskFamily::modular_add: return p_;
            case TaskFamily::copy:
            case TaskFamily::reverse:
            case TaskFamily::sort: return alphabet_;
            case TaskFamily::parity: return 2;
            case TaskFamily::projection_classify: return classes_;
        }
        return 2;
    }

private:
    static std::size_t pow_size(int base, int exp) {
        double v = 1.0;
        for (int i = 0; i < exp; ++i) {
            v *= base;
            if (v > 1e15) return static_cast<std::size_t>(1e15);
        }
        return static_cast<std::size_t>(v);
    }

    TaskDescriptor desc_;
    std::size_t vocab_;
    FamilySpec spec_;
    int p_ = 0, distractors_ = 0;
    int n_ = 0, alphabet_ = 0;
    int relevant_ = 0;
    std::vector<int> positions_;
    int symbols_ = 0, len_ = 0, classes_ = 0;
    Matrix scores_;
};

}  // namespace

TaskDataset generate_task(const TaskDescriptor& desc, std::size_t vocab, int test_size) {
    if (test_size < kDefaultTestSize)
        throw ArgumentError("generate_task: test split must hold at least " +
                            std::to_string(kDefaultTestSize) + " examples");
    Generator gen(desc, vocab);
    const std::size_t need = static_cast<std::size_t>(kTrainSize + kValidationSize + test_size);
    if (gen.spec().distinct_prompts < need)
        throw ArgumentError("generate_task: family admits only " +
                            std::to_string(gen.spec().distinct_prompts) +
                            " distinct prompts, need " + std::to_string(need) +
                            " for disjoint splits");

    Rng rng(derive_seed(desc.seed, "task/" + desc.name()));
    std::set<std::vector<std::int32_t>> seen;
    std::vector<Example> examples;
    examples.reserve(need);
    while (examples.size() < need) {
        auto payload = gen.sample_payload(rng);
        if (!seen.insert(payload).second) continue;
        Example e;
        e.prompt.reserve(payload.size() + 2);
        e.prompt.push_back(kTokBos);
        e.prompt.insert(e.prompt.end(), payload.begin(), payload.end());
        e.prompt.push_back(kTokSep);
        e.answer = gen.answer_for(payload);
        examples.push_back(std::move(e));
    }

    if (desc.param("label_noise", 0) != 0) {
        Rng noise(derive_seed(desc.seed, "label_noise/" + desc.name()));
        const int alphabet = gen.answer_alphabet();
        for (Example& e : examples)
            for (auto& t : e.answer)
                t = kTokBase + static_cast<std::int32_t>(noise.below(alphabet));
    }

    TaskDataset ds;
    ds.train.assign(examples.begin(), examples.begin() + kTrainSize);
    ds.validation.assign(examples.begin() + kTrainSize,
                         examples.begin() + kTrainSize + kValidationSize);
    ds.test.assign(examples.begin() + kTrainSize + kValidationSize, examples.end());
    return ds;
}

}  // namespace loramerge

// SPDX-License-Identifier: Apache-2.0
#include "loramerge/train.hpp"

#include <cmath>

namespace loramerge {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ArgumentError("unknown optimizer: " + s);
}

const char* to_string(ModuleCoverage c) {
    switch (c) {
        case ModuleCoverage::full: return "full";
        case ModuleCoverage::attention: return "attention";
        case ModuleCoverage::qv: return "qv";
    }
    return "?";
}

ModuleCoverage coverage_from_string(const std::string& s) {
    if (s == "full") return ModuleCoverage::full;
    if (s == "attention") return ModuleCoverage::attention;
    if (s == "qv") return ModuleCoverage::qv;
    throw ArgumentError("unknown module coverage: " + s);
}

std::vector<ModuleType> coverage_types(ModuleCoverage c) {
    switch (c) {
        case ModuleCoverage::full:
            return {ModuleType::q_proj, ModuleType::k_proj, ModuleType::v_proj,
                    ModuleType::o_proj, ModuleType::gate_proj, ModuleType::up_proj,
                    ModuleType::down_proj};
        case ModuleCoverage::attention:
            return {ModuleType::q_proj, ModuleType::k_proj, ModuleType::v_proj,
                    ModuleType::o_proj};
        case ModuleCoverage::qv: return {ModuleType::q_proj, ModuleType::v_proj};
    }
    return {};
}

namespace {

struct AdamState {
    Matrix m, v;
};

// Clip the concatenated gradient to unit norm when it exceeds clip_norm.
double global_grad_norm(const std::vector<Matrix>& grads) {
    double sq = 0.0;
    for (const Matrix& g : grads)
        for (const double x : g.values()) sq += x * x;
    return std::sqrt(sq);
}

}  // namespace

TrainedLora train_target_lora(const ToyModel& model, const TaskDataset& data,
                              const TrainLoraOptions& options) {
    if (options.steps < 1) throw ArgumentError("train_target_lora: steps must be >= 1");
    if (options.rank < 1) throw ArgumentError("train_target_lora: rank must be >= 1");
    if (data.train.empty() || data.validation.empty())
        throw ArgumentError("train_target_lora: empty split");

    const ModelConfig& cfg = model.config;
    const std::vector<ModuleType> types = coverage_types(options.coverage);
    const double alpha = options.alpha_factor * static_cast<double>(options.rank);
    const double scaling = lora_scaling(alpha, options.rank, LoraVariant::standard);

    // Parameter store per covered module: A ~ N(0, 1/sqrt(fan_in)) as a
    // stand-in for the usual Kaiming init, B = 0.
    std::vector<ModulePath> paths;
    std::vector<Matrix> params;  // [a0, b0, a1, b1, ...]
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (const ModuleType t : types) {
            const ModulePath p{l, t};
            Rng rng(derive_seed(options.seed, "lora_init/" + to_string(p)));
            const double a_std = 1.0 / std::sqrt(static_cast<double>(cfg.in_dim(t)));
            paths.push_back(p);
            params.push_back(Matrix::randn(options.rank, cfg.in_dim(t), a_std, rng));
            params.push_back(Matrix::zeros(cfg.out_dim(t), options.rank));
        }
    }

    // Deterministic batch order: one seeded shuffle, then cyclic slices.
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(options.seed, "batch_order"));
    for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    const int bs = std::min<int>(options.batch_size, static_cast<int>(data.train.size()));
    std::size_t cursor = 0;
    auto next_batch = [&] {
        std::vector<Example> batch;
        batch.reserve(static_cast<std::size_t>(bs));
        for (int i = 0; i < bs; ++i) {
            batch.push_back(data.train[order[cursor]]);
            cursor = (cursor + 1) % order.size();
        }
        return batch;
    };

    auto snapshot_to_adapter = [&](const std::vector<Matrix>& snap) {
        LoraAdapter adapter;
        adapter.name = options.name;
        adapter.alpha = alpha;
        adapter.rank = options.rank;
        adapter.variant = LoraVariant::standard;
        for (std::size_t i = 0; i < paths.size(); ++i) {
            LoraPair pair;
            pair.a = snap[2 * i];
            pair.b = snap[2 * i + 1];
            pair.scaling = scaling;
            adapter.modules.emplace(paths[i], std::move(pair));
        }
        return adapter;
    };

    auto eval_val_loss = [&] {
        Tape tape;
        OverlayNodes overlay;
        for (std::size_t i = 0; i < paths.size(); ++i) {
            const Tape::Id a = tape.constant(params[2 * i]);
            const Tape::Id b = tape.constant(params[2 * i + 1]);
            overlay.emplace(paths[i], tape.scale(tape.matmul(b, a), scaling));
        }
        const Batch vb = Batch::pack(data.validation);
        return tape.value(build_loss(tape, model, &overlay, vb))(0, 0);
    };

    TrainedLora result;
    result.val_loss.push_back(eval_val_loss());
    result.best_val_loss = result.val_loss[0];
    result.best_step = 0;
    std::vector<Matrix> best_params = params;

    std::vector<AdamState> adam(params.size());
    if (options.optimizer == OptimizerKind::adam)
        for (std::size_t i = 0; i < params.size(); ++i)
            adam[i] = {Matrix::zeros(params[i].rows(), params[i].cols()),
                       Matrix::zeros(params[i].rows(), params[i].cols())};

    for (int step = 1; step <= options.steps; ++step) {
        const auto batch_examples = next_batch();
        Tape tape;
        std::vector<Tape::Id> leaves(params.size());
        OverlayNodes overlay;
        for (std::size_t i = 0; i < paths.size(); ++i) {
            leaves[2 * i] = tape.leaf(params[2 * i], true);
            leaves[2 * i + 1] = tape.leaf(params[2 * i + 1], true);
            overlay.emplace(paths[i],
                            tape.scale(tape.matmul(leaves[2 * i + 1], leaves[2 * i]), scaling));
        }
        const Batch tb = Batch::pack(batch_examples);
        const Tape::Id loss = build_loss(tape, model, &overlay, tb);
        const double loss_v = tape.value(loss)(0, 0);
        if (!std::isfinite(loss_v))
            throw NumericError("train_target_lora: non-finite loss at step " +
                               std::to_string(step));
        result.train_loss.push_back(loss_v);

        auto grad_map = tape.backward(loss);
        std::vector<Matrix> grads;
        grads.reserve(params.size());
        for (const Tape::Id id : leaves) grads.push_back(std::move(grad_map.at(id)));

        const double norm = global_grad_norm(grads);
        const double clip = norm > options.clip_norm && norm > 0.0 ? options.clip_norm / norm : 1.0;

        if (options.optimizer == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i)
                axpy_into(params[i], -options.lr * clip, grads[i]);
        } else {
            constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, step);
            const double bc2 = 1.0 - std::pow(b2, step);
            for (std::size_t i = 0; i < params.size(); ++i) {
                Matrix& m = adam[i].m;
                Matrix& v = adam[i].v;
                for (std::size_t j = 0; j < params[i].size(); ++j) {
                    const double g = grads[i].data()[j] * clip;
                    m.data()[j] = b1 * m.data()[j] + (1.0 - b1) * g;
                    v.data()[j] = b2 * v.data()[j] + (1.0 - b2) * g * g;
                    const double mhat = m.data()[j] / bc1;
                    const double vhat = v.data()[j] / bc2;
                    params[i].data()[j] -= options.lr * mhat / (std::sqrt(vhat) + eps);
                }
            }
        }

        const double val = eval_val_loss();
        result.val_loss.push_back(val);
        if (val < result.best_val_loss) {
            result.best_val_loss = val;
            result.best_step = step;
            best_params = params;
        }
    }

    result.adapter = snapshot_to_adapter(best_params);
    return result;
}

TrainedLora train_target_lora(const ToyModel& model, const TaskDataset& data, std::size_t rank,
                              int steps, double lr, std::uint64_t seed) {
    TrainLoraOptions options;
    options.rank = rank;
    options.steps = steps;
    options.lr = lr;
    options.seed = seed;
    return train_target_lora(model, data, options);
}

std::vector<LoraAdapter> build_synthetic_pool(const ToyModel& model,
                                              const std::vector<TaskDescriptor>& descriptors,
                                              const std::vector<std::size_t>& ranks,
                                              const std::vector<ModuleCoverage>& coverages,
                                              std::uint64_t seed,
                                              const TrainLoraOptions& base_options) {
    if (descriptors.empty() || ranks.empty() || coverages.empty())
        throw ArgumentError("build_synthetic_pool: descriptor/rank/coverage lists must be non-empty");
    std::vector<LoraAdapter> pool;
    pool.reserve(descriptors.size());
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
        const TaskDescriptor& desc = descriptors[i];
        TrainLoraOptions options = base_options;
        options.rank = ranks[i % ranks.size()];
        options.coverage = coverages[i % coverages.size()];
        options.seed = derive_seed(seed, "pool_member", i);
        options.name = "p" + std::to_string(i) + "_" + desc.name() + "_r" +
                       std::to_string(options.rank) + "_" + to_string(options.coverage);
        const TaskDataset data = generate_task(desc, model.config.vocab);
        pool.push_back(train_target_lora(model, data, options).adapter);
    }
    return pool;
}

}  // namespace loramerge

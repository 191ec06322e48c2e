// SPDX-License-Identifier: Apache-2.0
#include "loramerge/tuner.hpp"

#include <chrono>
#include <cmath>
#include <set>

#include "loramerge/train.hpp"

namespace loramerge {

const char* to_string(TuneMode m) {
    switch (m) {
        case TuneMode::grad_based: return "grad_based";
        case TuneMode::grad_free: return "grad_free";
        case TuneMode::joint: return "joint";
        case TuneMode::single: return "single";
    }
    return "?";
}

TuneMode tune_mode_from_string(const std::string& s) {
    for (const auto m :
         {TuneMode::grad_based, TuneMode::grad_free, TuneMode::joint, TuneMode::single})
        if (s == to_string(m)) return m;
    throw ArgumentError("unknown tune mode: " + s);
}

const char* to_string(CheckpointRule r) {
    return r == CheckpointRule::best_val_loss ? "best_val_loss" : "best_train_loss_full_100";
}

TuneConfig TuneConfig::defaults(TuneMode mode) {
    TuneConfig cfg;
    cfg.mode = mode;
    switch (mode) {
        case TuneMode::grad_based:
        case TuneMode::single:
            break;  // struct defaults are the grad-based defaults
        case TuneMode::grad_free:
            cfg.granularity = GranularityKind::model;
            cfg.activation = Activation::linear;
            cfg.checkpoint = CheckpointRule::best_train_loss_full_100;
            break;
        case TuneMode::joint:
            cfg.activation = Activation::softmax;
            cfg.init = CoeffInit::zeros;
            break;
    }
    return cfg;
}

const TuneRun& TuneResult::best_run() const {
    if (runs.empty()) throw ContractError("TuneResult: no runs");
    const TuneRun* best = &runs[0];
    for (const TuneRun& r : runs)
        if (r.selected_metric < best->selected_metric) best = &r;
    return *best;
}

namespace {

using Clock = std::chrono::steady_clock;

struct MergeGraph {
    Tape::Id raw = -1;
    OverlayNodes overlay;
};

// Shared subgraph: activated table -> per-module weighted sum of deltas.
// `delta_nodes[i]` maps adapter i's module paths to tape nodes.
MergeGraph build_merge_graph(Tape& tape, Tape::Id raw, Activation activation,
                             const Granularity& granularity,
                             const std::vector<OverlayNodes>& delta_nodes) {
    MergeGraph g;
    g.raw = raw;
    const Tape::Id act = apply_activation_node(tape, raw, activation);
    std::set<ModulePath> paths;
    for (const auto& nodes : delta_nodes)
        for (const auto& [p, id] : nodes) paths.insert(p);
    for (const ModulePath& p : paths) {
        Tape::Id acc = -1;
        const int group = granularity.group_of(p);
        for (std::size_t i = 0; i < delta_nodes.size(); ++i) {
            const auto it = delta_nodes[i].find(p);
            if (it == delta_nodes[i].end()) continue;
            const Tape::Id coeff = tape.entry(act, i, static_cast<std::size_t>(group));
            const Tape::Id term = tape.scalar_mul(coeff, it->second);
            acc = acc < 0 ? term : tape.add(acc, term);
        }
        g.overlay.emplace(p, acc);
    }
    return g;
}

double checked_loss(double v, int step, const char* who) {
    if (!std::isfinite(v))
        throw NumericError(std::string(who) + ": non-finite loss at step " + std::to_string(step));
    return v;
}

}  // namespace

TuneResult tune_gradient_based(const ToyModel& model, std::span<const TaskVectorSet> sets,
                               const TuneConfig& cfg, const TaskDataset& data) {
    if (cfg.mode != TuneMode::grad_based && cfg.mode != TuneMode::single)
        throw ArgumentError("tune_gradient_based: wrong mode " + std::string(to_string(cfg.mode)));
    if (cfg.steps < 1) throw ArgumentError("tune_gradient_based: steps must be >= 1");
    if (sets.empty()) throw ArgumentError("tune_gradient_based: no task-vector sets");
    if (data.train.empty() || data.validation.empty())
        throw ArgumentError("tune_gradient_based: empty split");

    const auto t0 = Clock::now();
    const Granularity gran = Granularity{cfg.granularity, model.config.n_layers};
    CoefficientTable table = CoefficientTable::make(sets.size(), gran, cfg.activation, cfg.init);

    const Batch train_batch = Batch::pack(data.train);
    const Batch val_batch = Batch::pack(data.validation);

    auto val_loss = [&] {
        const TaskVectorSet merged = combine(sets, table);
        Tape tape;
        OverlayNodes nodes = overlay_constants(tape, merged);
        return tape.value(build_loss(tape, model, &nodes, val_batch))(0, 0);
    };

    TuneRun run;
    run.lr = cfg.lr;
    run.val_history.push_back(checked_loss(val_loss(), 0, "tune_gradient_based"));
    run.selected_step = 0;
    run.selected_metric = run.val_history[0];
    Matrix best_raw = table.raw;

    for (int step = 1; step <= cfg.steps; ++step) {
        Tape tape;
        const Tape::Id raw = tape.leaf(table.raw, true);
        std::vector<OverlayNodes> delta_nodes(sets.size());
        for (std::size_t i = 0; i < sets.size(); ++i)
            for (const auto& [p, d] : sets[i].deltas)
                delta_nodes[i].emplace(p, tape.constant(d));
        MergeGraph graph = build_merge_graph(tape, raw, cfg.activation, gran, delta_nodes);
        const Tape::Id loss = build_loss(tape, model, &graph.overlay, train_batch);
        run.train_history.push_back(
            checked_loss(tape.value(loss)(0, 0), step, "tune_gradient_based"));

        auto grads = tape.backward(loss);
        const Matrix& g = grads.at(raw);
        double norm = 0.0;
        for (const double v : g.values()) norm += v * v;
        norm = std::sqrt(norm);
        const double clip = norm > cfg.clip_norm && norm > 0.0 ? cfg.clip_norm / norm : 1.0;
        axpy_into(table.raw, -cfg.lr * clip, g);

        const double val = checked_loss(val_loss(), step, "tune_gradient_based");
        run.val_history.push_back(val);
        if (val < run.selected_metric) {
            run.selected_metric = val;
            run.selected_step = step;
            best_raw = table.raw;
        }
    }

    run.table = CoefficientTable{std::move(best_raw), gran, cfg.activation};
    run.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    TuneResult result;
    result.config = cfg;
    result.runs.push_back(std::move(run));
    return result;
}

TuneResult tune_gradient_free(const ToyModel& model, std::span<const LoraAdapter> adapters,
                              const TuneConfig& cfg, const TaskDataset& data) {
    if (cfg.mode != TuneMode::grad_free)
        throw ArgumentError("tune_gradient_free: wrong mode " + std::string(to_string(cfg.mode)));
    if (cfg.steps < 1) throw ArgumentError("tune_gradient_free: steps must be >= 1");
    if (adapters.empty()) throw ArgumentError("tune_gradient_free: empty pool");

    const auto t0 = Clock::now();
    const std::size_t k = adapters.size();

    // LoraHub-style preprocessing: pad every adapter to the pool max rank.
    std::size_t max_rank = 1;
    for (const LoraAdapter& a : adapters)
        for (const auto& [p, pair] : a.modules) max_rank = std::max(max_rank, pair.a.rows());
    std::vector<TaskVectorSet> sets;
    sets.reserve(k);
    for (const LoraAdapter& a : adapters)
        sets.push_back(materialize_task_vectors(pad_to_rank(a, max_rank)));

    // Objective: mean loss over the full 100 examples.
    std::vector<Example> all(data.train.begin(), data.train.end());
    all.insert(all.end(), data.validation.begin(), data.validation.end());
    const Granularity gran{GranularityKind::model, model.config.n_layers};
    auto objective = [&](const std::vector<double>& theta) {
        CoefficientTable t;
        t.granularity = gran;
        t.activation = Activation::linear;
        t.raw = Matrix(k, 1, std::vector<double>(theta));
        const TaskVectorSet merged = combine(sets, t);
        double obj = forward_loss(model, &merged, all);
        if (cfg.es_l1_reg > 0.0)
            for (const double v : theta) obj += cfg.es_l1_reg * std::fabs(v);
        return obj;
    };

    std::vector<double> parent(k, cfg.init == CoeffInit::zeros ? 0.0
                                                               : 1.0 / static_cast<double>(k));
    double parent_obj = checked_loss(objective(parent), 0, "tune_gradient_free");

    const int lambda = 4 + static_cast<int>(std::floor(3.0 * std::log(static_cast<double>(k))));
    double sigma = cfg.es_sigma0;
    Rng rng(derive_seed(cfg.seed, "es"));

    TuneRun run;
    run.lr = sigma;
    run.selected_step = 0;
    run.selected_metric = parent_obj;
    std::vector<double> best_theta = parent;

    for (int step = 1; step <= cfg.steps; ++step) {
        int successes = 0;
        std::vector<double> gen_best_theta;
        double gen_best_obj = std::numeric_limits<double>::infinity();
        for (int o = 0; o < lambda; ++o) {
            std::vector<double> cand = parent;
            for (double& v : cand) v += sigma * rng.normal();
            const double obj = checked_loss(objective(cand), step, "tune_gradient_free");
            if (obj < parent_obj) ++successes;
            if (obj < gen_best_obj) {
                gen_best_obj = obj;
                gen_best_theta = std::move(cand);
            }
        }
        if (gen_best_obj < parent_obj) {  // elitist
            parent = gen_best_theta;
            parent_obj = gen_best_obj;
        }
        if (parent_obj < run.selected_metric) {
            run.selected_metric = parent_obj;
            run.selected_step = step;
            best_theta = parent;
        }
        run.train_history.push_back(run.selected_metric);  // best-so-far, non-increasing
        // 1/5 success rule
        const double rate = static_cast<double>(successes) / static_cast<double>(lambda);
        sigma *= std::exp(rate - 0.2);
        sigma = std::min(std::max(sigma, 1e-4), 10.0);
    }

    run.table = CoefficientTable{Matrix(k, 1, std::move(best_theta)), gran, Activation::linear};
    run.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    TuneResult result;
    result.config = cfg;
    result.runs.push_back(std::move(run));
    return result;
}

TuneResult tune_joint(const ToyModel& model, std::span<const LoraAdapter> adapters,
                      const TuneConfig& cfg, const TaskDataset& data) {
    if (cfg.mode != TuneMode::joint)
        throw ArgumentError("tune_joint: wrong mode " + std::string(to_string(cfg.mode)));
    if (cfg.activation != Activation::softmax)
        throw ArgumentError("tune_joint: joint tuning requires softmax activation");
    if (cfg.steps < 1) throw ArgumentError("tune_joint: steps must be >= 1");
    if (adapters.empty()) throw ArgumentError("tune_joint: empty pool");
    if (cfg.joint_lrs.empty()) throw ArgumentError("tune_joint: no learning rates");

    const Granularity gran{cfg.granularity, model.config.n_layers};
    const Batch train_batch = Batch::pack(data.train);
    const Batch val_batch = Batch::pack(data.validation);
    const std::size_t k = adapters.size();

    TuneResult result;
    result.config = cfg;

    for (const double lr : cfg.joint_lrs) {
        const auto t0 = Clock::now();
        CoefficientTable table = CoefficientTable::make(k, gran, cfg.activation, cfg.init);
        // mutable copies of every adapter's factors
        std::vector<LoraAdapter> params(adapters.begin(), adapters.end());

        auto val_loss = [&] {
            std::vector<TaskVectorSet> sets;
            sets.reserve(k);
            for (const LoraAdapter& a : params) sets.push_back(materialize_task_vectors(a));
            const TaskVectorSet merged = combine(sets, table);
            Tape tape;
            OverlayNodes nodes = overlay_constants(tape, merged);
            return tape.value(build_loss(tape, model, &nodes, val_batch))(0, 0);
        };

        TuneRun run;
        run.lr = lr;
        run.val_history.push_back(checked_loss(val_loss(), 0, "tune_joint"));
        run.selected_step = 0;
        run.selected_metric = run.val_history[0];
        Matrix best_raw = table.raw;
        std::vector<LoraAdapter> best_params = params;

        for (int step = 1; step <= cfg.steps; ++step) {
            Tape tape;
            const Tape::Id raw = tape.leaf(table.raw, true);
            std::vector<OverlayNodes> delta_nodes(k);
            std::vector<std::vector<std::pair<Tape::Id, Matrix*>>> leaf_params(k);
            for (std::size_t i = 0; i < k; ++i) {
                for (auto& [p, pair] : params[i].modules) {
                    const Tape::Id a = tape.leaf(pair.a, true);
                    const Tape::Id b = tape.leaf(pair.b, true);
                    leaf_params[i].push_back({a, &pair.a});
                    leaf_params[i].push_back({b, &pair.b});
                    delta_nodes[i].emplace(p, tape.scale(tape.matmul(b, a), pair.scaling));
                }
            }
            MergeGraph graph = build_merge_graph(tape, raw, cfg.activation, gran, delta_nodes);
            const Tape::Id loss = build_loss(tape, model, &graph.overlay, train_batch);
            run.train_history.push_back(checked_loss(tape.value(loss)(0, 0), step, "tune_joint"));

            auto grads = tape.backward(loss);
            double norm = 0.0;
            for (const double v : grads.at(raw).values()) norm += v * v;
            for (const auto& leaves : leaf_params)
                for (const auto& [id, target] : leaves)
                    for (const double v : grads.at(id).values()) norm += v * v;
            norm = std::sqrt(norm);
            const double clip = norm > cfg.clip_norm && norm > 0.0 ? cfg.clip_norm / norm : 1.0;

            axpy_into(table.raw, -lr * clip, grads.at(raw));
            for (auto& leaves : leaf_params)
                for (auto& [id, target] : leaves) axpy_into(*target, -lr * clip, grads.at(id));

            const double val = checked_loss(val_loss(), step, "tune_joint");
            run.val_history.push_back(val);
            if (val < run.selected_metric) {
                run.selected_metric = val;
                run.selected_step = step;
                best_raw = table.raw;
                best_params = params;
            }
        }

        run.table = CoefficientTable{std::move(best_raw), gran, cfg.activation};
        run.adapters = std::move(best_params);
        run.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        result.runs.push_back(std::move(run));
    }
    return result;
}

TuneResult tune_single(const ToyModel& model, const LoraAdapter& adapter, const TuneConfig& cfg,
                       const TaskDataset& data) {
    if (cfg.mode != TuneMode::single)
        throw ArgumentError("tune_single: wrong mode " + std::string(to_string(cfg.mode)));
    const TaskVectorSet tvs = materialize_task_vectors(adapter);
    return tune_gradient_based(model, std::span<const TaskVectorSet>(&tvs, 1), cfg, data);
}

LoraAdapter make_untrained_adapter(const ModelConfig& config, std::size_t rank,
                                   std::uint64_t seed, const std::string& name) {
    LoraAdapter adapter;
    adapter.name = name;
    adapter.alpha = 2.0 * static_cast<double>(rank);
    adapter.rank = rank;
    adapter.variant = LoraVariant::standard;
    const double s = lora_scaling(adapter.alpha, rank, adapter.variant);
    for (const ModulePath& p : config.all_module_paths()) {
        Rng rng(derive_seed(seed, "untrained/" + to_string(p)));
        LoraPair pair;
        const double a_std = 1.0 / std::sqrt(static_cast<double>(config.in_dim(p.type)));
        pair.a = Matrix::randn(rank, config.in_dim(p.type), a_std, rng);
        pair.b = Matrix::zeros(config.out_dim(p.type), rank);
        pair.scaling = s;
        adapter.modules.emplace(p, std::move(pair));
    }
    return adapter;
}

}  // namespace loramerge

// SPDX-License-Identifier: Apache-2.0
#include "loramerge/harness.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

namespace loramerge {

namespace fs = std::filesystem;

// --- enum strings -------------------------------------------------------------

const char* to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::simple_average: return "simple_average";
        case MergeMethod::ties: return "ties";
        case MergeMethod::tsv: return "tsv";
        case MergeMethod::adaptive: return "adaptive";
    }
    return "?";
}

MergeMethod merge_method_from_string(const std::string& s) {
    for (const auto m : {MergeMethod::simple_average, MergeMethod::ties, MergeMethod::tsv,
                         MergeMethod::adaptive})
        if (s == to_string(m)) return m;
    throw ArgumentError("unknown merge method: " + s);
}

const char* to_string(TiesCoeff c) {
    switch (c) {
        case TiesCoeff::one: return "1";
        case TiesCoeff::zero_point_three: return "0.3";
        case TiesCoeff::one_over_k: return "1/k";
    }
    return "?";
}

TiesCoeff ties_coeff_from_string(const std::string& s) {
    for (const auto c : {TiesCoeff::one, TiesCoeff::zero_point_three, TiesCoeff::one_over_k})
        if (s == to_string(c)) return c;
    throw ArgumentError("unknown ties coefficient: " + s);
}

double ties_coeff_value(TiesCoeff c, std::size_t k) {
    switch (c) {
        case TiesCoeff::one: return 1.0;
        case TiesCoeff::zero_point_three: return 0.3;
        case TiesCoeff::one_over_k: return 1.0 / static_cast<double>(k);
    }
    return 1.0;
}

// --- JSON round trips -----------------------------------------------------------

void to_json(json& j, const ModelConfig& c) {
    j = json{{"vocab", c.vocab},     {"d_model", c.d_model}, {"n_layers", c.n_layers},
             {"n_heads", c.n_heads}, {"d_ff", c.d_ff},       {"max_seq", c.max_seq}};
}

void from_json(const json& j, ModelConfig& c) {
    c.vocab = j.value("vocab", c.vocab);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq = j.value("max_seq", c.max_seq);
}

void to_json(json& j, const TaskDescriptor& d) {
    json params = json::object();
    for (const auto& [k, v] : d.params) params[k] = v;
    j = json{{"family", to_string(d.family)}, {"params", params}, {"seed", d.seed}};
}

void from_json(const json& j, TaskDescriptor& d) {
    d.family = task_family_from_string(j.at("family").get<std::string>());
    d.params.clear();
    if (j.contains("params"))
        for (const auto& [k, v] : j.at("params").items()) d.params[k] = v.get<int>();
    d.seed = j.value("seed", 0ULL);
}

void to_json(json& j, const TuneConfig& c) {
    j = json{{"mode", to_string(c.mode)},
             {"steps", c.steps},
             {"lr", c.lr},
             {"joint_lrs", c.joint_lrs},
             {"granularity", to_string(c.granularity)},
             {"activation", to_string(c.activation)},
             {"init", to_string(c.init)},
             {"checkpoint", to_string(c.checkpoint)},
             {"clip_norm", c.clip_norm},
             {"es_sigma0", c.es_sigma0},
             {"es_l1_reg", c.es_l1_reg}};
}

void from_json(const json& j, TuneConfig& c) {
    c = TuneConfig::defaults(tune_mode_from_string(j.at("mode").get<std::string>()));
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    if (j.contains("joint_lrs")) c.joint_lrs = j.at("joint_lrs").get<std::vector<double>>();
    if (j.contains("granularity"))
        c.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    if (j.contains("activation"))
        c.activation = activation_from_string(j.at("activation").get<std::string>());
    if (j.contains("init")) c.init = coeff_init_from_string(j.at("init").get<std::string>());
    if (j.contains("checkpoint"))
        c.checkpoint = j.at("checkpoint").get<std::string>() == "best_val_loss"
                           ? CheckpointRule::best_val_loss
                           : CheckpointRule::best_train_loss_full_100;
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.es_sigma0 = j.value("es_sigma0", c.es_sigma0);
    c.es_l1_reg = j.value("es_l1_reg", c.es_l1_reg);
}

void to_json(json& j, const MethodSpec& m) {
    j = json{{"name", m.name},
             {"method", to_string(m.method)},
             {"selection", to_string(m.selection)},
             {"ties_prune_frac", m.ties_prune_frac},
             {"ties_coeff", to_string(m.ties_coeff)},
             {"tsv_q", m.tsv_q},
             {"tune", m.tune}};
}

void from_json(const json& j, MethodSpec& m) {
    if (j.is_string()) {
        m = MethodSpec::preset(j.get<std::string>());
        return;
    }
    if (j.contains("preset")) {
        m = MethodSpec::preset(j.at("preset").get<std::string>());
        if (j.contains("name")) m.name = j.at("name").get<std::string>();
    } else {
        m.name = j.at("name").get<std::string>();
        m.method = merge_method_from_string(j.at("method").get<std::string>());
        if (j.contains("tune")) m.tune = j.at("tune").get<TuneConfig>();
    }
    if (j.contains("selection"))
        m.selection = selection_from_string(j.at("selection").get<std::string>());
    m.ties_prune_frac = j.value("ties_prune_frac", m.ties_prune_frac);
    if (j.contains("ties_coeff"))
        m.ties_coeff = ties_coeff_from_string(j.at("ties_coeff").get<std::string>());
    m.tsv_q = j.value("tsv_q", m.tsv_q);
    if (j.contains("tune") && j.contains("preset")) {
        TuneConfig overridden = m.tune;
        const json& t = j.at("tune");
        if (t.contains("steps")) overridden.steps = t.at("steps").get<int>();
        if (t.contains("lr")) overridden.lr = t.at("lr").get<double>();
        if (t.contains("granularity"))
            overridden.granularity =
                granularity_from_string(t.at("granularity").get<std::string>());
        if (t.contains("activation"))
            overridden.activation = activation_from_string(t.at("activation").get<std::string>());
        if (t.contains("init"))
            overridden.init = coeff_init_from_string(t.at("init").get<std::string>());
        m.tune = overridden;
    }
}

void to_json(json& j, const PoolSpec& p) {
    std::vector<std::string> coverages;
    for (const auto c : p.coverages) coverages.emplace_back(to_string(c));
    j = json{{"directory", p.directory}, {"descriptors", p.descriptors},
             {"ranks", p.ranks},         {"coverages", coverages},
             {"train_steps", p.train_steps}, {"seed", p.seed}};
}

void from_json(const json& j, PoolSpec& p) {
    p.directory = j.value("directory", std::string{});
    if (j.contains("descriptors"))
        p.descriptors = j.at("descriptors").get<std::vector<TaskDescriptor>>();
    if (j.contains("ranks")) p.ranks = j.at("ranks").get<std::vector<std::size_t>>();
    if (j.contains("coverages")) {
        p.coverages.clear();
        for (const auto& s : j.at("coverages"))
            p.coverages.push_back(coverage_from_string(s.get<std::string>()));
    }
    p.train_steps = j.value("train_steps", p.train_steps);
    p.seed = j.value("seed", p.seed);
}

void to_json(json& j, const WarmupSpec& w) {
    j = json{{"task", w.task}, {"steps", w.steps}, {"rank", w.rank}};
}

void from_json(const json& j, WarmupSpec& w) {
    w.task = j.at("task").get<TaskDescriptor>();
    w.steps = j.value("steps", w.steps);
    w.rank = j.value("rank", w.rank);
}

void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"model", c.model},
             {"model_seed", c.model_seed},
             {"tasks", c.tasks},
             {"pool", c.pool},
             {"methods", c.methods},
             {"ks", c.ks},
             {"include_target_lora", c.include_target_lora},
             {"reinit_pool", c.reinit_pool},
             {"seeds", c.seeds},
             {"target_rank", c.target_rank},
             {"target_steps", c.target_steps},
             {"target_lr", c.target_lr},
             {"cache_dir", c.cache_dir},
             {"report_path", c.report_path},
             {"workers", c.workers}};
    if (c.warmup) j["warmup"] = *c.warmup;
}

void from_json(const json& j, ExperimentConfig& c) {
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    c.model_seed = j.value("model_seed", c.model_seed);
    if (j.contains("warmup") && !j.at("warmup").is_null())
        c.warmup = j.at("warmup").get<WarmupSpec>();
    if (j.contains("tasks")) c.tasks = j.at("tasks").get<std::vector<TaskDescriptor>>();
    if (j.contains("pool")) c.pool = j.at("pool").get<PoolSpec>();
    if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<MethodSpec>>();
    if (j.contains("ks")) c.ks = j.at("ks").get<std::vector<std::size_t>>();
    c.include_target_lora = j.value("include_target_lora", c.include_target_lora);
    c.reinit_pool = j.value("reinit_pool", c.reinit_pool);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.target_rank = j.value("target_rank", c.target_rank);
    c.target_steps = j.value("target_steps", c.target_steps);
    c.target_lr = j.value("target_lr", c.target_lr);
    c.cache_dir = j.value("cache_dir", c.cache_dir);
    c.report_path = j.value("report_path", c.report_path);
    c.workers = j.value("workers", c.workers);
}

void to_json(json& j, const SelectionResult& r) {
    j = json{{"strategy", to_string(r.strategy)}, {"names", r.names}, {"scores", r.scores}};
}

void to_json(json& j, const CellResult& c) {
    j = json{{"record", "cell"},
             {"task", c.task},
             {"method", c.method},
             {"k", c.k},
             {"seed", c.seed},
             {"failed", c.failed},
             {"error", c.error},
             {"test_accuracy", c.test_accuracy},
             {"base_accuracy", c.base_accuracy},
             {"target_accuracy", c.target_accuracy},
             {"selection", c.selection},
             {"merged_adapters", c.merged_adapters},
             {"coefficient_distribution", c.coefficient_distribution},
             {"selected_step", c.selected_step},
             {"selected_metric", c.selected_metric},
             {"train_history", c.train_history},
             {"val_history", c.val_history},
             {"wall_seconds", c.wall_seconds},
             {"config_echo", c.config_echo}};
}

void from_json(const json& j, CellResult& c) {
    c.task = j.at("task").get<std::string>();
    c.method = j.at("method").get<std::string>();
    c.k = j.at("k").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.failed = j.at("failed").get<bool>();
    c.error = j.value("error", std::string{});
    c.test_accuracy = j.value("test_accuracy", 0.0);
    c.base_accuracy = j.value("base_accuracy", 0.0);
    c.target_accuracy = j.value("target_accuracy", 0.0);
    if (j.contains("selection")) {
        const json& s = j.at("selection");
        c.selection.strategy = selection_from_string(s.at("strategy").get<std::string>());
        c.selection.names = s.at("names").get<std::vector<std::string>>();
        c.selection.scores = s.at("scores").get<std::vector<double>>();
    }
    if (j.contains("merged_adapters"))
        c.merged_adapters = j.at("merged_adapters").get<std::vector<std::string>>();
    if (j.contains("coefficient_distribution"))
        c.coefficient_distribution =
            j.at("coefficient_distribution").get<std::vector<double>>();
    c.selected_step = j.value("selected_step", 0);
    c.selected_metric = j.value("selected_metric", 0.0);
    if (j.contains("train_history"))
        c.train_history = j.at("train_history").get<std::vector<double>>();
    if (j.contains("val_history"))
        c.val_history = j.at("val_history").get<std::vector<double>>();
    c.wall_seconds = j.value("wall_seconds", 0.0);
    if (j.contains("config_echo")) c.config_echo = j.at("config_echo");
}

// --- presets, suite, pool -------------------------------------------------------

MethodSpec MethodSpec::preset(const std::string& name) {
    MethodSpec m;
    m.name = name;
    if (name == "simple_average") {
        m.method = MergeMethod::simple_average;
        m.selection = SelectionStrategy::random;
    } else if (name == "ties") {
        m.method = MergeMethod::ties;
        m.selection = SelectionStrategy::random;
        m.ties_prune_frac = 0.6;
        m.ties_coeff = TiesCoeff::one_over_k;
    } else if (name == "tsv") {
        m.method = MergeMethod::tsv;
        m.selection = SelectionStrategy::random;
        m.tsv_q = 8;
    } else if (name == "adamerging") {
        m.method = MergeMethod::adaptive;
        m.selection = SelectionStrategy::random;
        m.tune = TuneConfig::defaults(TuneMode::grad_based);
        m.tune.granularity = GranularityKind::module;
        m.tune.activation = Activation::linear;
        m.tune.init = CoeffInit::uniform_1_over_k;
    } else if (name == "pi_tuning") {
        m.method = MergeMethod::adaptive;
        m.selection = SelectionStrategy::quasi_fim;
        m.tune = TuneConfig::defaults(TuneMode::joint);
        m.tune.granularity = GranularityKind::module;
    } else if (name == "lorahub") {
        m.method = MergeMethod::adaptive;
        m.selection = SelectionStrategy::random;
        m.tune = TuneConfig::defaults(TuneMode::grad_free);
    } else if (name == "ours") {
        m.method = MergeMethod::adaptive;
        m.selection = SelectionStrategy::evaluation;
        m.tune = TuneConfig::defaults(TuneMode::grad_based);
        m.tune.granularity = GranularityKind::module;
        m.tune.activation = Activation::leaky_relu;
        m.tune.init = CoeffInit::zeros;
    } else {
        throw ArgumentError("unknown method preset: " + name);
    }
    return m;
}

std::vector<TaskDescriptor> standard_task_suite() {
    auto proj = [](int angle, std::uint64_t seed) {
        return TaskDescriptor{
            TaskFamily::projection_classify,
            {{"symbols", 16}, {"len", 6}, {"classes", 4}, {"world", 0}, {"angle_deg", angle}},
            seed};
    };
    return {
        proj(0, 101),
        proj(30, 102),
        proj(60, 103),
        proj(90, 104),
        {TaskFamily::copy, {{"n", 4}, {"alphabet", 8}}, 105},
        {TaskFamily::copy, {{"n", 5}, {"alphabet", 8}}, 106},
        {TaskFamily::reverse, {{"n", 4}, {"alphabet", 8}}, 107},
        {TaskFamily::sort, {{"n", 4}, {"alphabet", 8}}, 108},
        {TaskFamily::modular_add, {{"p", 7}, {"distractors", 2}}, 109},
        {TaskFamily::modular_add, {{"p", 11}, {"distractors", 2}}, 110},
        {TaskFamily::parity, {{"n", 10}, {"relevant", 2}, {"rule", 0}}, 111},
        {TaskFamily::parity, {{"n", 10}, {"relevant", 3}, {"rule", 1}}, 112},
    };
}

std::vector<TaskDescriptor> standard_pool_descriptors() {
    auto proj = [](int angle, int world, std::uint64_t seed) {
        return TaskDescriptor{
            TaskFamily::projection_classify,
            {{"symbols", 16}, {"len", 6}, {"classes", 4}, {"world", world}, {"angle_deg", angle}},
            seed};
    };
    std::vector<TaskDescriptor> pool;
    // near-transfer neighbours of the projection suite (same world, offset angles)
    for (const int angle : {10, 20, 40, 50, 70, 80, 100}) pool.push_back(proj(angle, 0, 200 + angle));
    // same-family siblings of the sequence tasks at shifted lengths
    pool.push_back({TaskFamily::copy, {{"n", 3}, {"alphabet", 8}}, 301});
    pool.push_back({TaskFamily::copy, {{"n", 6}, {"alphabet", 8}}, 302});
    pool.push_back({TaskFamily::reverse, {{"n", 3}, {"alphabet", 8}}, 303});
    pool.push_back({TaskFamily::reverse, {{"n", 5}, {"alphabet", 8}}, 304});
    pool.push_back({TaskFamily::sort, {{"n", 3}, {"alphabet", 8}}, 305});
    pool.push_back({TaskFamily::sort, {{"n", 5}, {"alphabet", 8}}, 306});
    pool.push_back({TaskFamily::reverse, {{"n", 6}, {"alphabet", 8}}, 314});
    // arithmetic neighbours
    pool.push_back({TaskFamily::modular_add, {{"p", 7}, {"distractors", 3}}, 307});
    pool.push_back({TaskFamily::modular_add, {{"p", 11}, {"distractors", 3}}, 308});
    pool.push_back({TaskFamily::modular_add, {{"p", 5}, {"distractors", 2}}, 309});
    pool.push_back({TaskFamily::modular_add, {{"p", 13}, {"distractors", 2}}, 310});
    // parity rule variants
    pool.push_back({TaskFamily::parity, {{"n", 10}, {"relevant", 2}, {"rule", 2}}, 311});
    pool.push_back({TaskFamily::parity, {{"n", 10}, {"relevant", 3}, {"rule", 3}}, 312});
    pool.push_back({TaskFamily::parity, {{"n", 12}, {"relevant", 2}, {"rule", 0}}, 313});
    // far transfer: unrelated worlds and alphabets
    for (const int world : {7, 8, 9, 10}) pool.push_back(proj(0, world, 400 + world));
    pool.push_back({TaskFamily::copy, {{"n", 4}, {"alphabet", 16}}, 401});
    pool.push_back({TaskFamily::reverse, {{"n", 4}, {"alphabet", 16}}, 402});
    pool.push_back({TaskFamily::sort, {{"n", 4}, {"alphabet", 16}}, 403});
    pool.push_back({TaskFamily::modular_add, {{"p", 23}, {"distractors", 1}}, 404});
    pool.push_back({TaskFamily::parity, {{"n", 14}, {"relevant", 4}, {"rule", 5}}, 405});
    // label-noise junk
    int noise_seed = 500;
    for (TaskDescriptor d : {
             TaskDescriptor{TaskFamily::copy, {{"n", 4}, {"alphabet", 8}}, 0},
             TaskDescriptor{TaskFamily::reverse, {{"n", 4}, {"alphabet", 8}}, 0},
             TaskDescriptor{TaskFamily::sort, {{"n", 4}, {"alphabet", 8}}, 0},
             TaskDescriptor{TaskFamily::modular_add, {{"p", 7}, {"distractors", 2}}, 0},
             TaskDescriptor{TaskFamily::parity, {{"n", 10}, {"relevant", 2}, {"rule", 4}}, 0},
             proj(45, 3, 0),
             proj(135, 4, 0),
             TaskDescriptor{TaskFamily::copy, {{"n", 5}, {"alphabet", 12}}, 0},
             TaskDescriptor{TaskFamily::modular_add, {{"p", 11}, {"distractors", 2}}, 0},
             TaskDescriptor{TaskFamily::sort, {{"n", 5}, {"alphabet", 10}}, 0},
         }) {
        d.params["label_noise"] = 1;
        d.seed = noise_seed++;
        pool.push_back(d);
    }
    return pool;  // 40 descriptors
}

WarmupSpec standard_warmup() {
    WarmupSpec w;
    w.task = TaskDescriptor{TaskFamily::sort, {{"n", 5}, {"alphabet", 12}}, 9999};
    w.steps = 400;
    w.rank = 8;
    return w;
}

// --- cache ----------------------------------------------------------------------

namespace {

std::string fnv_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Identity of the (possibly warmed) base model every artifact is trained on.
json model_identity(const ExperimentConfig& cfg) {
    json j{{"model", cfg.model}, {"model_seed", cfg.model_seed}};
    if (cfg.warmup) j["warmup"] = *cfg.warmup;
    return j;
}

LoraAdapter train_or_load(const fs::path& file, const ToyModel& model, const TaskDataset& data,
                          const TrainLoraOptions& options) {
    if (!fs::exists(file)) {
        const TrainedLora trained = train_target_lora(model, data, options);
        fs::create_directories(file.parent_path());
        save_adapter(trained.adapter, file.string());
    }
    // always read back so every consumer sees the same f32-rounded values
    return load_adapter(file.string(), model.config);
}

ToyModel build_base_model(const ExperimentConfig& cfg);
std::vector<LoraAdapter> build_pool(const ExperimentConfig& cfg, const ToyModel& model);

struct Runtime {
    ExperimentConfig cfg;
    ToyModel model;  // warmed base
    std::vector<LoraAdapter> pool;

    explicit Runtime(const ExperimentConfig& c, bool with_pool = true) : cfg(c) {
        model = build_base_model(cfg);
        if (with_pool) pool = build_pool(cfg, model);
    }
    Runtime(const Runtime&) = delete;
    Runtime& operator=(const Runtime&) = delete;

    std::mutex mu;
    std::map<std::string, LoraAdapter> targets;            // task|seed
    std::map<std::string, std::vector<double>> eval_memo;  // task -> per-pool-adapter score
    std::map<std::string, double> base_acc_memo;           // task
    std::map<std::string, TaskDataset> dataset_memo;       // task

    const TaskDataset& dataset(const TaskDescriptor& task) {
        std::lock_guard lock(mu);
        const std::string key = task.name();
        auto it = dataset_memo.find(key);
        if (it == dataset_memo.end())
            it = dataset_memo.emplace(key, generate_task(task, cfg.model.vocab)).first;
        return it->second;
    }

    double base_accuracy(const TaskDescriptor& task) {
        const TaskDataset& data = dataset(task);
        std::lock_guard lock(mu);
        auto it = base_acc_memo.find(task.name());
        if (it == base_acc_memo.end())
            it = base_acc_memo.emplace(task.name(),
                                       evaluate_accuracy(model, nullptr, data.test)).first;
        return it->second;
    }

    fs::path target_file(const TaskDescriptor& task, std::uint64_t seed) const {
        const std::string id = fnv_hash(json{{"identity", model_identity(cfg)},
                                             {"task", task},
                                             {"rank", cfg.target_rank},
                                             {"steps", cfg.target_steps},
                                             {"lr", cfg.target_lr}}
                                            .dump());
        return fs::path(cfg.cache_dir) / "targets" /
               (id + "_s" + std::to_string(seed) + ".safetensors");
    }

    const LoraAdapter& target(const TaskDescriptor& task, std::uint64_t seed) {
        const std::string key = task.name() + "|" + std::to_string(seed);
        {
            std::lock_guard lock(mu);
            const auto it = targets.find(key);
            if (it != targets.end()) return it->second;
        }
        const TaskDataset& data = dataset(task);
        TrainLoraOptions options;
        options.rank = cfg.target_rank;
        options.steps = cfg.target_steps;
        options.lr = cfg.target_lr;
        options.seed = derive_seed(seed, "target/" + task.name());
        options.name = "target_" + task.name() + "_s" + std::to_string(seed);
        LoraAdapter adapter = train_or_load(target_file(task, seed), model, data, options);
        std::lock_guard lock(mu);
        return targets.emplace(key, std::move(adapter)).first->second;
    }

    // Evaluation-selection scores over the (real) pool for one task; scores
    // are persisted next to the pool cache so repeated invocations skip the
    // per-adapter decoding pass.
    const std::vector<double>& pool_eval_scores(const TaskDescriptor& task) {
        const TaskDataset& data = dataset(task);
        std::lock_guard lock(mu);
        auto it = eval_memo.find(task.name());
        if (it != eval_memo.end()) return it->second;

        std::vector<std::string> pool_names;
        for (const LoraAdapter& a : pool) pool_names.push_back(a.name);
        const fs::path file =
            fs::path(cfg.cache_dir) / "evalscores" /
            (fnv_hash(json{{"identity", model_identity(cfg)},
                           {"pool_names", pool_names},
                           {"task", task}}
                          .dump()) +
             ".json");
        if (fs::exists(file)) {
            std::ifstream in(file);
            json j = json::parse(in);
            auto scores = j.get<std::vector<double>>();
            if (scores.size() == pool.size())
                return eval_memo.emplace(task.name(), std::move(scores)).first->second;
        }
        std::vector<double> scores(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const TaskVectorSet tvs = materialize_task_vectors(pool[i]);
            scores[i] = evaluate_accuracy(model, &tvs, data.train);
        }
        fs::create_directories(file.parent_path());
        std::ofstream out(file);
        out << json(scores).dump() << "\n";
        return eval_memo.emplace(task.name(), std::move(scores)).first->second;
    }
};

ToyModel build_base_model(const ExperimentConfig& cfg) {
    ToyModel cold = build_model(cfg.model, cfg.model_seed);
    cold.config.validate();
    if (!cfg.warmup) return cold;
    const WarmupSpec& w = *cfg.warmup;
    TrainLoraOptions options;
    options.rank = w.rank;
    options.steps = w.steps;
    options.lr = cfg.target_lr;
    options.seed = derive_seed(cfg.model_seed, "warmup/" + w.task.name());
    options.name = "warmup_" + w.task.name();
    const fs::path file = fs::path(cfg.cache_dir) / "warm" /
                          (fnv_hash(json{{"model", cfg.model},
                                         {"model_seed", cfg.model_seed},
                                         {"warmup", w}}
                                        .dump()) +
                           ".safetensors");
    const TaskDataset data = generate_task(w.task, cfg.model.vocab);
    const LoraAdapter warm = train_or_load(file, cold, data, options);
    return merge_into_model(cold, materialize_task_vectors(warm));
}

std::vector<LoraAdapter> build_pool(const ExperimentConfig& cfg, const ToyModel& model) {
    if (!cfg.pool.directory.empty()) {
        std::vector<LoraAdapter> pool;
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(cfg.pool.directory))
            if (entry.path().extension() == ".safetensors") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& file : files) pool.push_back(load_adapter(file.string(), cfg.model));
        if (pool.empty())
            throw ArgumentError("pool directory " + cfg.pool.directory + " holds no adapters");
        return pool;
    }
    if (cfg.pool.descriptors.empty())
        throw ArgumentError("pool spec has neither a directory nor descriptors");

    const fs::path dir =
        fs::path(cfg.cache_dir) /
        ("pool_" + fnv_hash(json{{"identity", model_identity(cfg)}, {"pool", cfg.pool}}.dump()));
    std::vector<LoraAdapter> pool;
    TrainLoraOptions base;
    base.steps = cfg.pool.train_steps;
    base.lr = cfg.target_lr;
    for (std::size_t i = 0; i < cfg.pool.descriptors.size(); ++i) {
        const TaskDescriptor& desc = cfg.pool.descriptors[i];
        TrainLoraOptions options = base;
        options.rank = cfg.pool.ranks[i % cfg.pool.ranks.size()];
        options.coverage = cfg.pool.coverages[i % cfg.pool.coverages.size()];
        options.seed = derive_seed(cfg.pool.seed, "pool_member", i);
        char prefix[8];
        std::snprintf(prefix, sizeof prefix, "p%02zu", i);
        options.name = std::string(prefix) + "_" + desc.name() + "_r" +
                       std::to_string(options.rank) + "_" + to_string(options.coverage);
        const fs::path file = dir / (options.name + ".safetensors");
        const TaskDataset data = generate_task(desc, cfg.model.vocab);
        pool.push_back(train_or_load(file, model, data, options));
    }
    return pool;
}

int resolve_workers(int cfg_workers) {
    if (const char* env = std::getenv("LORAMERGE_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    if (cfg_workers > 0) return cfg_workers;
    return std::max(1u, std::thread::hardware_concurrency());
}

// --- the cell runner -------------------------------------------------------------

struct CellSpec {
    TaskDescriptor task;
    MethodSpec method;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    bool include_target = false;
    bool reinit_pool = false;
};

json cell_echo(const ExperimentConfig& cfg, const CellSpec& spec) {
    json j{{"model", cfg.model},
           {"model_seed", cfg.model_seed},
           {"task", spec.task},
           {"pool", cfg.pool},
           {"method", spec.method},
           {"k", spec.k},
           {"seed", spec.seed},
           {"include_target_lora", spec.include_target},
           {"reinit_pool", spec.reinit_pool},
           {"target_rank", cfg.target_rank},
           {"target_steps", cfg.target_steps},
           {"target_lr", cfg.target_lr},
           {"cache_dir", cfg.cache_dir}};
    if (cfg.warmup) j["warmup"] = *cfg.warmup;
    return j;
}

CellResult run_cell(Runtime& rt, const CellSpec& spec) {
    const auto t0 = std::chrono::steady_clock::now();
    CellResult cell;
    cell.task = spec.task.name();
    cell.method = spec.method.name;
    cell.k = spec.k;
    cell.seed = spec.seed;
    cell.config_echo = cell_echo(rt.cfg, spec);

    try {
        const TaskDataset& data = rt.dataset(spec.task);
        const ToyModel& model = rt.model;
        const std::uint64_t cell_seed = derive_seed(
            spec.seed, spec.task.name() + "|" + spec.method.name + "|k" + std::to_string(spec.k));

        cell.base_accuracy = rt.base_accuracy(spec.task);
        const LoraAdapter& target = rt.target(spec.task, spec.seed);
        {
            const TaskVectorSet ttv = materialize_task_vectors(target);
            cell.target_accuracy = evaluate_accuracy(model, &ttv, data.test);
        }

        const bool joint = spec.method.method == MergeMethod::adaptive &&
                           spec.method.tune.mode == TuneMode::joint;
        // Joint tuning keeps every adapter's parameters trainable; cap k at 20.
        std::size_t k_eff = spec.k;
        if (joint && k_eff > 20) k_eff = 20;
        if (joint && k_eff < 2)
            throw ArgumentError("joint tuning needs k >= 2 (untrained adapter takes a slot)");

        std::size_t select_n = k_eff;
        if (spec.include_target) select_n -= 1;
        if (joint) select_n -= 1;
        if (select_n > rt.pool.size())
            throw ArgumentError("selection needs " + std::to_string(select_n) +
                                " adapters, pool has " + std::to_string(rt.pool.size()));

        // --- selection over the real pool ---
        SelectionResult selection;
        selection.strategy = spec.method.selection;
        if (select_n > 0) {
            switch (spec.method.selection) {
                case SelectionStrategy::random:
                    selection = select_random(rt.pool, select_n,
                                              derive_seed(cell_seed, "selection"));
                    break;
                case SelectionStrategy::evaluation: {
                    const std::vector<double>& scores = rt.pool_eval_scores(spec.task);
                    std::vector<std::size_t> order(rt.pool.size());
                    std::iota(order.begin(), order.end(), 0);
                    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                        if (scores[a] != scores[b]) return scores[a] > scores[b];
                        return rt.pool[a].name < rt.pool[b].name;
                    });
                    selection.strategy = SelectionStrategy::evaluation;
                    for (std::size_t i = 0; i < select_n; ++i) {
                        selection.names.push_back(rt.pool[order[i]].name);
                        selection.scores.push_back(scores[order[i]]);
                    }
                    break;
                }
                default:
                    selection = select_by_similarity(rt.pool, target, spec.method.selection,
                                                     select_n, rt.cfg.model);
                    break;
            }
        }
        cell.selection = selection;

        // --- assemble the member list ---
        std::map<std::string, const LoraAdapter*> by_name;
        for (const LoraAdapter& a : rt.pool) by_name[a.name] = &a;
        std::vector<LoraAdapter> members;
        if (spec.include_target) members.push_back(target);
        for (const std::string& name : selection.names) {
            LoraAdapter member = *by_name.at(name);
            if (spec.reinit_pool)
                member = reinit_matched(member, derive_seed(cell_seed, "reinit/" + name));
            members.push_back(std::move(member));
        }
        LoraAdapter untrained;
        if (joint) {
            untrained = make_untrained_adapter(rt.cfg.model, rt.cfg.target_rank,
                                               derive_seed(cell_seed, "untrained"),
                                               "untrained_" + spec.task.name());
            members.push_back(untrained);
        }
        for (const LoraAdapter& m : members) cell.merged_adapters.push_back(m.name);

        std::vector<TaskVectorSet> sets;
        sets.reserve(members.size());
        for (const LoraAdapter& m : members) sets.push_back(materialize_task_vectors(m));

        // --- merge / tune ---
        TaskVectorSet merged;
        switch (spec.method.method) {
            case MergeMethod::simple_average:
                merged = simple_average(sets);
                break;
            case MergeMethod::ties:
                merged = ties_merge(sets, spec.method.ties_prune_frac,
                                    ties_coeff_value(spec.method.ties_coeff, sets.size()));
                break;
            case MergeMethod::tsv: {
                std::vector<double> weights(sets.size(), 1.0 / static_cast<double>(sets.size()));
                merged = tsv_merge(sets, spec.method.tsv_q, weights);
                break;
            }
            case MergeMethod::adaptive: {
                TuneConfig tune = spec.method.tune;
                tune.seed = derive_seed(cell_seed, "tune");
                switch (tune.mode) {
                    case TuneMode::grad_based:
                    case TuneMode::single: {
                        if (tune.mode == TuneMode::single && sets.size() != 1)
                            throw ArgumentError("single mode needs exactly one adapter");
                        tune.mode = sets.size() == 1 ? tune.mode : TuneMode::grad_based;
                        const TuneResult result =
                            tune_gradient_based(model, sets, tune, data);
                        const TuneRun& run = result.runs[0];
                        merged = combine(sets, run.table);
                        cell.selected_step = run.selected_step;
                        cell.selected_metric = run.selected_metric;
                        cell.train_history = run.train_history;
                        cell.val_history = run.val_history;
                        if (sets.size() >= 2)
                            cell.coefficient_distribution =
                                coefficient_distribution(run.table);
                        break;
                    }
                    case TuneMode::grad_free: {
                        const TuneResult result =
                            tune_gradient_free(model, members, tune, data);
                        const TuneRun& run = result.runs[0];
                        merged = combine(sets, run.table);
                        cell.selected_step = run.selected_step;
                        cell.selected_metric = run.selected_metric;
                        cell.train_history = run.train_history;
                        if (sets.size() >= 2)
                            cell.coefficient_distribution =
                                coefficient_distribution(run.table);
                        break;
                    }
                    case TuneMode::joint: {
                        const TuneResult result = tune_joint(model, members, tune, data);
                        // average the runs' test accuracies (one per learning rate)
                        double acc_sum = 0.0;
                        const TuneRun* best = &result.runs[0];
                        for (const TuneRun& run : result.runs) {
                            std::vector<TaskVectorSet> tuned_sets;
                            for (const LoraAdapter& a : run.adapters)
                                tuned_sets.push_back(materialize_task_vectors(a));
                            const TaskVectorSet m = combine(tuned_sets, run.table);
                            acc_sum += evaluate_accuracy(model, &m, data.test);
                            if (run.selected_metric < best->selected_metric) best = &run;
                        }
                        cell.test_accuracy =
                            acc_sum / static_cast<double>(result.runs.size());
                        cell.selected_step = best->selected_step;
                        cell.selected_metric = best->selected_metric;
                        cell.train_history = best->train_history;
                        cell.val_history = best->val_history;
                        if (members.size() >= 2)
                            cell.coefficient_distribution =
                                coefficient_distribution(best->table);
                        cell.wall_seconds =
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                .count();
                        return cell;  // accuracy already computed per run
                    }
                }
                break;
            }
        }

        cell.test_accuracy = evaluate_accuracy(model, &merged, data.test);
    } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
    }
    cell.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return cell;
}

void run_cells_parallel(Runtime& rt, const std::vector<CellSpec>& specs,
                        std::vector<CellResult>& out) {
    out.resize(specs.size());
    const int workers =
        std::min<int>(resolve_workers(rt.cfg.workers), static_cast<int>(specs.size()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < specs.size(); ++i) out[i] = run_cell(rt, specs[i]);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= specs.size()) return;
            out[i] = run_cell(rt, specs[i]);
        }
    };
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
}

ExperimentConfig resolve_defaults(ExperimentConfig cfg) {
    if (cfg.tasks.empty()) cfg.tasks = standard_task_suite();
    if (cfg.pool.directory.empty() && cfg.pool.descriptors.empty())
        cfg.pool.descriptors = standard_pool_descriptors();
    if (cfg.methods.empty()) cfg.methods = {MethodSpec::preset("ours")};
    if (cfg.ks.empty()) cfg.ks = {10};
    if (cfg.seeds.empty()) cfg.seeds = {1};
    return cfg;
}

json report_header(const ExperimentConfig& cfg, const std::string& kind) {
    return json{{"record", "header"},
                {"kind", kind},
                {"config", cfg},
                {"coefficient_distribution_normalization", "min-max per group"},
                {"created", static_cast<long long>(std::chrono::duration_cast<std::chrono::seconds>(
                                std::chrono::system_clock::now().time_since_epoch())
                                .count())}};
}

}  // namespace

// --- public drivers ------------------------------------------------------------

ExperimentReport run_experiment(const ExperimentConfig& raw_cfg) {
    const ExperimentConfig cfg = resolve_defaults(raw_cfg);
    Runtime rt(cfg);

    std::vector<CellSpec> specs;
    for (const TaskDescriptor& task : cfg.tasks)
        for (const MethodSpec& method : cfg.methods)
            for (const std::size_t k : cfg.ks)
                for (const std::uint64_t seed : cfg.seeds)
                    specs.push_back(CellSpec{task, method, k, seed, cfg.include_target_lora,
                                             cfg.reinit_pool});

    ExperimentReport report;
    report.header = report_header(cfg, "experiment");
    run_cells_parallel(rt, specs, report.cells);
    if (!cfg.report_path.empty()) report.write_jsonl(cfg.report_path);
    return report;
}

CellResult rerun_cell(const json& echo) {
    ExperimentConfig cfg;
    cfg.model = echo.at("model").get<ModelConfig>();
    cfg.model_seed = echo.at("model_seed").get<std::uint64_t>();
    if (echo.contains("warmup")) cfg.warmup = echo.at("warmup").get<WarmupSpec>();
    cfg.pool = echo.at("pool").get<PoolSpec>();
    cfg.target_rank = echo.at("target_rank").get<std::size_t>();
    cfg.target_steps = echo.at("target_steps").get<int>();
    cfg.target_lr = echo.at("target_lr").get<double>();
    cfg.cache_dir = echo.at("cache_dir").get<std::string>();
    cfg.tasks = {echo.at("task").get<TaskDescriptor>()};

    CellSpec spec;
    spec.task = cfg.tasks[0];
    spec.method = echo.at("method").get<MethodSpec>();
    spec.k = echo.at("k").get<std::size_t>();
    spec.seed = echo.at("seed").get<std::uint64_t>();
    spec.include_target = echo.at("include_target_lora").get<bool>();
    spec.reinit_pool = echo.at("reinit_pool").get<bool>();

    Runtime rt(cfg);
    return run_cell(rt, spec);
}

std::vector<double> coefficient_distribution(const CoefficientTable& table) {
    const std::size_t k = table.k();
    if (k < 2) throw ArgumentError("coefficient_distribution: needs k >= 2");
    const Matrix act = apply_activation(table);
    std::vector<double> per_adapter(k, 0.0);
    const std::size_t groups = act.cols();
    for (std::size_t g = 0; g < groups; ++g) {
        double lo = act(0, g), hi = act(0, g);
        for (std::size_t i = 1; i < k; ++i) {
            lo = std::min(lo, act(i, g));
            hi = std::max(hi, act(i, g));
        }
        std::vector<double> norm(k);
        if (hi == lo) {
            std::fill(norm.begin(), norm.end(), 1.0 / static_cast<double>(k));
        } else {
            double sum = 0.0;
            for (std::size_t i = 0; i < k; ++i) sum += (norm[i] = (act(i, g) - lo) / (hi - lo));
            for (std::size_t i = 0; i < k; ++i) norm[i] /= sum;
        }
        for (std::size_t i = 0; i < k; ++i) per_adapter[i] += norm[i];
    }
    for (double& v : per_adapter) v /= static_cast<double>(groups);
    return per_adapter;
}

ExperimentReport inhouse_window_experiment(const ExperimentConfig& raw_cfg, std::size_t k,
                                           const std::vector<int>& omit_ms) {
    ExperimentConfig cfg = resolve_defaults(raw_cfg);
    if (k < 2) throw ArgumentError("inhouse_window_experiment: k must be >= 2");
    int max_omit = 0;
    for (const int m : omit_ms) max_omit = std::max(max_omit, m);
    if (cfg.tasks.size() < k + static_cast<std::size_t>(max_omit))
        throw ArgumentError("inhouse_window_experiment: " + std::to_string(cfg.tasks.size()) +
                            " tasks cannot support k=" + std::to_string(k) + " with omit_m=" +
                            std::to_string(max_omit));

    Runtime rt(cfg, /*with_pool=*/false);
    // In-house pool: every task's target adapter (trained with the first seed).
    const std::uint64_t pool_seed = cfg.seeds.at(0);
    for (const TaskDescriptor& task : cfg.tasks) rt.pool.push_back(rt.target(task, pool_seed));

    const MethodSpec ours = MethodSpec::preset("ours");
    ExperimentReport report;
    report.header = report_header(cfg, "inhouse_window");

    for (std::size_t ti = 0; ti < cfg.tasks.size(); ++ti) {
        const TaskDescriptor& task = cfg.tasks[ti];
        const TaskDataset& data = rt.dataset(task);

        // rank the *other* tasks' adapters on this task's 100 examples
        std::vector<Example> hundred(data.train.begin(), data.train.end());
        hundred.insert(hundred.end(), data.validation.begin(), data.validation.end());
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t i = 0; i < rt.pool.size(); ++i) {
            if (i == ti) continue;
            const TaskVectorSet tvs = materialize_task_vectors(rt.pool[i]);
            ranked.push_back({evaluate_accuracy(rt.model, &tvs, hundred), i});
        }
        std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return rt.pool[a.second].name < rt.pool[b.second].name;
        });

        for (const std::uint64_t seed : cfg.seeds) {
            const LoraAdapter& own = rt.target(task, seed);
            auto run_window = [&](const std::string& method_name, int omit_m, bool reinit) {
                CellResult cell;
                cell.task = task.name();
                cell.method = method_name;
                cell.k = k;
                cell.seed = seed;
                cell.selection.strategy = SelectionStrategy::evaluation;
                const auto t0 = std::chrono::steady_clock::now();
                try {
                    const std::uint64_t cell_seed =
                        derive_seed(seed, task.name() + "|" + method_name);
                    std::vector<LoraAdapter> members{own};
                    for (std::size_t j = static_cast<std::size_t>(omit_m);
                         j < static_cast<std::size_t>(omit_m) + k - 1; ++j) {
                        LoraAdapter member = rt.pool[ranked.at(j).second];
                        if (reinit)
                            member = reinit_matched(
                                member, derive_seed(cell_seed, "reinit/" + member.name));
                        cell.selection.names.push_back(member.name);
                        cell.selection.scores.push_back(ranked.at(j).first);
                        members.push_back(std::move(member));
                    }
                    for (const LoraAdapter& m : members)
                        cell.merged_adapters.push_back(m.name);
                    std::vector<TaskVectorSet> sets;
                    for (const LoraAdapter& m : members)
                        sets.push_back(materialize_task_vectors(m));
                    TuneConfig tune = ours.tune;
                    tune.seed = derive_seed(cell_seed, "tune");
                    const TuneResult result = tune_gradient_based(rt.model, sets, tune, data);
                    const TuneRun& run = result.runs[0];
                    const TaskVectorSet merged = combine(sets, run.table);
                    cell.test_accuracy = evaluate_accuracy(rt.model, &merged, data.test);
                    cell.base_accuracy = rt.base_accuracy(task);
                    {
                        const TaskVectorSet ttv = materialize_task_vectors(own);
                        cell.target_accuracy = evaluate_accuracy(rt.model, &ttv, data.test);
                    }
                    cell.selected_step = run.selected_step;
                    cell.selected_metric = run.selected_metric;
                    cell.train_history = run.train_history;
                    cell.val_history = run.val_history;
                    cell.coefficient_distribution = coefficient_distribution(run.table);
                    json echo = cell_echo(cfg, CellSpec{task, ours, k, seed, true, reinit});
                    echo["window_omit"] = omit_m;
                    echo["inhouse"] = true;
                    cell.config_echo = echo;
                } catch (const std::exception& e) {
                    cell.failed = true;
                    cell.error = e.what();
                }
                cell.wall_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                report.cells.push_back(std::move(cell));
            };

            for (const int omit_m : omit_ms) {
                char name[48];
                std::snprintf(name, sizeof name, "ours_window_m%02d", omit_m);
                run_window(name, omit_m, /*reinit=*/false);
            }
            run_window("inhouse_reinit_baseline", 0, /*reinit=*/true);
        }
    }
    if (!cfg.report_path.empty()) report.write_jsonl(cfg.report_path);
    return report;
}

ExperimentReport sweep_design_space(const ExperimentConfig& raw_cfg,
                                    const DesignSpaceAxes& axes) {
    if (axes.granularities.empty() || axes.selections.empty() || axes.activations.empty() ||
        axes.ks.empty())
        throw ArgumentError("sweep_design_space: every axis must be non-empty");
    ExperimentConfig cfg = resolve_defaults(raw_cfg);
    cfg.methods.clear();
    for (const SelectionStrategy sel : axes.selections) {
        for (const GranularityKind gran : axes.granularities) {
            for (const Activation act : axes.activations) {
                MethodSpec m = MethodSpec::preset("ours");
                m.selection = sel;
                m.tune.granularity = gran;
                m.tune.activation = act;
                m.name = std::string("sweep_") + to_string(sel) + "_" + to_string(gran) + "_" +
                         to_string(act);
                cfg.methods.push_back(std::move(m));
            }
        }
    }
    cfg.ks.assign(axes.ks.begin(), axes.ks.end());
    ExperimentReport report = run_experiment(cfg);
    report.header["kind"] = "design_space_sweep";
    if (!cfg.report_path.empty()) report.write_jsonl(cfg.report_path);
    return report;
}

ExperimentReport ties_grid(const ExperimentConfig& raw_cfg,
                           const std::vector<double>& prune_fracs,
                           const std::vector<TiesCoeff>& coeffs) {
    ExperimentConfig cfg = resolve_defaults(raw_cfg);
    ExperimentReport report;
    report.header = report_header(cfg, "ties_grid");
    for (const bool with_target : {false, true}) {
        ExperimentConfig variant = cfg;
        variant.include_target_lora = with_target;
        variant.report_path.clear();
        variant.methods.clear();
        for (const double prune : prune_fracs) {
            for (const TiesCoeff coeff : coeffs) {
                MethodSpec m = MethodSpec::preset("ties");
                m.ties_prune_frac = prune;
                m.ties_coeff = coeff;
                char name[64];
                std::snprintf(name, sizeof name, "ties_p%.1f_c%s%s", prune, to_string(coeff),
                              with_target ? "__with_target" : "__without_target");
                m.name = name;
                variant.methods.push_back(std::move(m));
            }
        }
        ExperimentReport part = run_experiment(variant);
        for (CellResult& cell : part.cells) report.cells.push_back(std::move(cell));
    }
    if (!cfg.report_path.empty()) report.write_jsonl(cfg.report_path);
    return report;
}

// --- report I/O and aggregation ---------------------------------------------------

bool ExperimentReport::has_failures() const {
    for (const CellResult& c : cells)
        if (c.failed) return true;
    return false;
}

void ExperimentReport::write_jsonl(const std::string& path) const {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("report: cannot write " + path);
    out << header.dump() << "\n";
    for (const CellResult& cell : cells) {
        json j = cell;
        out << j.dump() << "\n";
    }
}

ExperimentReport ExperimentReport::read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("report: cannot open " + path);
    ExperimentReport report;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        const std::string record = j.value("record", "cell");
        if (record == "header")
            report.header = j;
        else
            report.cells.push_back(j.get<CellResult>());
    }
    return report;
}

json ExperimentReport::summarize(const std::vector<double>& buckets) const {
    struct Agg {
        int n = 0, failed = 0;
        double acc = 0, base = 0, target = 0;
        double rel_base = 0;
        int rel_base_n = 0;
        double rel_target = 0;
        int rel_target_n = 0;
        int beat_base = 0, beat_target = 0;
        std::vector<int> bucket_counts;
    };
    std::map<std::pair<std::string, std::size_t>, Agg> groups;
    for (const CellResult& c : cells) {
        Agg& a = groups[{c.method, c.k}];
        if (a.bucket_counts.empty()) a.bucket_counts.assign(buckets.size() + 2, 0);
        if (c.failed) {
            ++a.failed;
            continue;
        }
        ++a.n;
        a.acc += c.test_accuracy;
        a.base += c.base_accuracy;
        a.target += c.target_accuracy;
        if (c.base_accuracy > 0.0) {
            const double rel = (c.test_accuracy - c.base_accuracy) / c.base_accuracy;
            a.rel_base += rel;
            ++a.rel_base_n;
            // bucket 0: <= 0; bucket i: (b_{i-1}, b_i]; last: > b_last
            std::size_t b = 0;
            if (rel > 0.0) {
                b = 1;
                while (b <= buckets.size() && rel > buckets[b - 1]) ++b;
            }
            ++a.bucket_counts[b];
        }
        if (c.target_accuracy > 0.0) {
            a.rel_target += (c.test_accuracy - c.target_accuracy) / c.target_accuracy;
            ++a.rel_target_n;
        }
        if (c.test_accuracy > c.base_accuracy) ++a.beat_base;
        if (c.test_accuracy > c.target_accuracy) ++a.beat_target;
    }

    json out = json::array();
    for (const auto& [key, a] : groups) {
        json row{{"method", key.first},
                 {"k", key.second},
                 {"cells", a.n},
                 {"failed", a.failed},
                 {"mean_test_accuracy", a.n ? a.acc / a.n : 0.0},
                 {"mean_base_accuracy", a.n ? a.base / a.n : 0.0},
                 {"mean_target_accuracy", a.n ? a.target / a.n : 0.0},
                 {"outperformed_base", a.beat_base},
                 {"outperformed_target", a.beat_target}};
        if (a.rel_base_n)
            row["mean_rel_improvement_vs_base"] = a.rel_base / a.rel_base_n;
        else
            row["mean_rel_improvement_vs_base"] = nullptr;
        if (a.rel_target_n)
            row["mean_rel_improvement_vs_target"] = a.rel_target / a.rel_target_n;
        else
            row["mean_rel_improvement_vs_target"] = nullptr;
        json bucket_obj = json::object();
        for (std::size_t b = 0; b < a.bucket_counts.size(); ++b) {
            std::string label;
            if (b == 0)
                label = "<=0";
            else if (b <= buckets.size())
                label = "<=" + std::to_string(buckets[b - 1]);
            else
                label = ">" + std::to_string(buckets.back());
            bucket_obj[label] = a.bucket_counts[b];
        }
        row["rel_improvement_buckets"] = bucket_obj;
        out.push_back(std::move(row));
    }
    return out;
}

std::string ExperimentReport::summarize_csv(const std::vector<double>& buckets) const {
    const json rows = summarize(buckets);
    std::string csv =
        "method,k,cells,failed,mean_test_accuracy,mean_base_accuracy,mean_target_accuracy,"
        "mean_rel_improvement_vs_base,mean_rel_improvement_vs_target,outperformed_base,"
        "outperformed_target\n";
    for (const json& row : rows) {
        auto num = [&](const char* key) {
            return row.at(key).is_null() ? std::string{}
                                         : std::to_string(row.at(key).get<double>());
        };
        csv += row.at("method").get<std::string>();
        csv += "," + std::to_string(row.at("k").get<std::size_t>());
        csv += "," + std::to_string(row.at("cells").get<int>());
        csv += "," + std::to_string(row.at("failed").get<int>());
        csv += "," + std::to_string(row.at("mean_test_accuracy").get<double>());
        csv += "," + std::to_string(row.at("mean_base_accuracy").get<double>());
        csv += "," + std::to_string(row.at("mean_target_accuracy").get<double>());
        csv += "," + num("mean_rel_improvement_vs_base");
        csv += "," + num("mean_rel_improvement_vs_target");
        csv += "," + std::to_string(row.at("outperformed_base").get<int>());
        csv += "," + std::to_string(row.at("outperformed_target").get<int>());
        csv += "\n";
    }
    return csv;
}

}  // namespace loramerge

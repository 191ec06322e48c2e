// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "loramerge/harness.hpp"

using namespace loramerge;
namespace fs = std::filesystem;

namespace {

const ModelConfig kSmall{/*vocab=*/32, /*d_model=*/32, /*n_layers=*/2, /*n_heads=*/2,
                         /*d_ff=*/64, /*max_seq=*/24};

std::string fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "loramerge_harness_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

ExperimentConfig tiny_config(const std::string& tag) {
    ExperimentConfig cfg;
    cfg.model = kSmall;
    cfg.model_seed = 6;
    cfg.warmup.reset();
    cfg.tasks = {
        {TaskFamily::projection_classify,
         {{"symbols", 8}, {"len", 4}, {"classes", 4}, {"world", 5}}, 5},
        {TaskFamily::copy, {{"n", 3}, {"alphabet", 8}}, 7},
    };
    cfg.pool.descriptors = {
        {TaskFamily::projection_classify,
         {{"symbols", 8}, {"len", 4}, {"classes", 4}, {"world", 5}, {"angle_deg", 20}}, 21},
        {TaskFamily::copy, {{"n", 4}, {"alphabet", 8}}, 22},
        {TaskFamily::sort, {{"n", 3}, {"alphabet", 8}}, 23},
        {TaskFamily::parity, {{"n", 10}, {"relevant", 2}}, 24},
        {TaskFamily::modular_add, {{"p", 7}, {"distractors", 2}}, 25},
    };
    cfg.pool.ranks = {2, 4};
    cfg.pool.coverages = {ModuleCoverage::full, ModuleCoverage::attention};
    cfg.pool.train_steps = 40;
    cfg.target_steps = 60;
    cfg.target_rank = 4;
    cfg.ks = {2};
    cfg.seeds = {1};
    cfg.cache_dir = fresh_dir(tag);
    MethodSpec ours = MethodSpec::preset("ours");
    ours.tune.steps = 8;
    cfg.methods = {MethodSpec::preset("simple_average"), ours};
    return cfg;
}

json strip_volatile(const ExperimentReport& report) {
    json cells = json::array();
    for (const CellResult& c : report.cells) {
        json j = c;
        j.erase("wall_seconds");
        cells.push_back(std::move(j));
    }
    return cells;
}

}  // namespace

TEST_CASE("coefficient_distribution: stated pipeline") {
    const Granularity g{GranularityKind::model, 2};

    SUBCASE("all-equal group degenerates to 1/k") {
        CoefficientTable t = CoefficientTable::make(4, g, Activation::linear, CoeffInit::uniform_1_over_k);
        const auto dist = coefficient_distribution(t);
        for (const double v : dist) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }

    SUBCASE("worked example: activated [2,1] -> [1,0]") {
        CoefficientTable t = CoefficientTable::make(2, g, Activation::linear, CoeffInit::zeros);
        t.raw(0, 0) = 2.0;
        t.raw(1, 0) = 1.0;
        const auto dist = coefficient_distribution(t);
        CHECK(dist[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(dist[1] == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("random tables: non-negative, sums to 1") {
        const Granularity gm{GranularityKind::module, 3};
        Rng rng(9);
        for (int rep = 0; rep < 20; ++rep) {
            CoefficientTable t =
                CoefficientTable::make(5, gm, Activation::leaky_relu, CoeffInit::zeros);
            for (auto& v : t.raw.values()) v = rng.normal(0.0, 1.0);
            const auto dist = coefficient_distribution(t);
            double sum = 0.0;
            for (const double v : dist) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
    }

    SUBCASE("k=1 is rejected") {
        CoefficientTable t = CoefficientTable::make(1, g, Activation::linear, CoeffInit::zeros);
        CHECK_THROWS_AS(coefficient_distribution(t), ArgumentError);
    }
}

TEST_CASE("presets expand to the documented configurations") {
    const MethodSpec ada = MethodSpec::preset("adamerging");
    CHECK(ada.selection == SelectionStrategy::random);
    CHECK(ada.tune.mode == TuneMode::grad_based);
    CHECK(ada.tune.granularity == GranularityKind::module);
    CHECK(ada.tune.activation == Activation::linear);
    CHECK(ada.tune.init == CoeffInit::uniform_1_over_k);

    const MethodSpec pi = MethodSpec::preset("pi_tuning");
    CHECK(pi.selection == SelectionStrategy::quasi_fim);
    CHECK(pi.tune.mode == TuneMode::joint);
    CHECK(pi.tune.granularity == GranularityKind::module);
    CHECK(pi.tune.activation == Activation::softmax);
    CHECK(pi.tune.init == CoeffInit::zeros);
    CHECK(pi.tune.joint_lrs == std::vector<double>{1e-4, 5e-5});

    const MethodSpec lh = MethodSpec::preset("lorahub");
    CHECK(lh.selection == SelectionStrategy::random);
    CHECK(lh.tune.mode == TuneMode::grad_free);
    CHECK(lh.tune.granularity == GranularityKind::model);
    CHECK(lh.tune.activation == Activation::linear);
    CHECK(lh.tune.init == CoeffInit::zeros);
    CHECK(lh.tune.checkpoint == CheckpointRule::best_train_loss_full_100);

    const MethodSpec ours = MethodSpec::preset("ours");
    CHECK(ours.selection == SelectionStrategy::evaluation);
    CHECK(ours.tune.mode == TuneMode::grad_based);
    CHECK(ours.tune.granularity == GranularityKind::module);
    CHECK(ours.tune.activation == Activation::leaky_relu);
    CHECK(ours.tune.init == CoeffInit::zeros);
    CHECK(ours.tune.lr == 5e-2);
    CHECK(ours.tune.steps == 100);

    CHECK_THROWS_AS(MethodSpec::preset("nonsense"), ArgumentError);
}

TEST_CASE("standard suite and pool have the documented sizes") {
    CHECK(standard_task_suite().size() == 12);
    CHECK(standard_pool_descriptors().size() == 40);
    int noise = 0;
    for (const auto& d : standard_pool_descriptors())
        if (d.param("label_noise", 0) != 0) ++noise;
    CHECK(noise == 10);
}

TEST_CASE("config JSON round trip") {
    ExperimentConfig cfg = tiny_config("json_roundtrip");
    cfg.warmup = standard_warmup();
    cfg.include_target_lora = true;
    json j = cfg;
    const ExperimentConfig back = j.get<ExperimentConfig>();
    json j2 = back;
    CHECK(j == j2);
}

TEST_CASE("run_experiment: completeness, baselines, determinism, rerun"
          * doctest::timeout(600)) {
    ExperimentConfig cfg = tiny_config("exp_main");
    ExperimentReport report = run_experiment(cfg);

    // every (task, method, k, seed) appears exactly once
    CHECK(report.cells.size() == 2 * 2 * 1 * 1);
    std::set<std::string> keys;
    for (const CellResult& c : report.cells) {
        CHECK(!c.failed);
        keys.insert(c.task + "|" + c.method + "|" + std::to_string(c.k) + "|" +
                    std::to_string(c.seed));
    }
    CHECK(keys.size() == report.cells.size());

    // baselines agree across methods for the same (task, seed)
    for (const CellResult& a : report.cells)
        for (const CellResult& b : report.cells)
            if (a.task == b.task && a.seed == b.seed) {
                CHECK(a.base_accuracy == b.base_accuracy);
                CHECK(a.target_accuracy == b.target_accuracy);
            }

    // determinism: identical rerun modulo wall clock (cache warm now)
    ExperimentReport again = run_experiment(cfg);
    CHECK(strip_volatile(report) == strip_volatile(again));

    // rerun a single cell from its embedded echo
    const CellResult* ours_cell = nullptr;
    for (const CellResult& c : report.cells)
        if (c.method == "ours") ours_cell = &c;
    REQUIRE(ours_cell != nullptr);
    const CellResult rerun = rerun_cell(ours_cell->config_echo);
    CHECK(rerun.test_accuracy == ours_cell->test_accuracy);
    CHECK(rerun.selected_metric == ours_cell->selected_metric);

    // adaptive cells carry a coefficient distribution over merged adapters
    CHECK(ours_cell->coefficient_distribution.size() == ours_cell->merged_adapters.size());
    double sum = 0.0;
    for (const double v : ours_cell->coefficient_distribution) sum += v;
    CHECK(std::fabs(sum - 1.0) < 1e-9);
}

TEST_CASE("run_experiment: simple averaging composition identity" * doctest::timeout(600)) {
    // Build a small on-disk pool, then check the report cell equals the
    // direct load -> average -> fold -> evaluate pipeline.
    ExperimentConfig cfg = tiny_config("exp_compose");
    cfg.pool.descriptors.resize(3);
    cfg.methods = {MethodSpec::preset("simple_average")};
    cfg.ks = {3};  // k = |pool|
    ExperimentReport report = run_experiment(cfg);
    REQUIRE(report.cells.size() == 2);
    const CellResult& cell = report.cells[0];
    REQUIRE(!cell.failed);

    // reproduce by hand from the cached pool files
    ToyModel model = build_model(cfg.model, cfg.model_seed);
    std::vector<LoraAdapter> pool;
    for (const auto& entry : fs::recursive_directory_iterator(cfg.cache_dir)) {
        if (entry.path().extension() != ".safetensors") continue;
        if (entry.path().string().find("pool_") == std::string::npos) continue;
        pool.push_back(load_adapter(entry.path().string(), cfg.model));
    }
    REQUIRE(pool.size() == 3);
    std::vector<TaskVectorSet> sets;
    for (const auto& a : pool) sets.push_back(materialize_task_vectors(a));
    const TaskVectorSet merged = simple_average(sets);
    const ToyModel folded = merge_into_model(model, merged);
    const TaskDataset data = generate_task(cfg.tasks[0], cfg.model.vocab);
    const double direct = evaluate_accuracy(folded, nullptr, data.test);
    CHECK(cell.test_accuracy == direct);
}

TEST_CASE("run_experiment: oversized k is recorded as a failed cell, sweep continues"
          * doctest::timeout(600)) {
    ExperimentConfig cfg = tiny_config("exp_failure");
    cfg.methods = {MethodSpec::preset("simple_average")};
    cfg.ks = {99, 2};
    ExperimentReport report = run_experiment(cfg);
    CHECK(report.cells.size() == 4);
    int failed = 0, ok = 0;
    for (const CellResult& c : report.cells) (c.failed ? failed : ok)++;
    CHECK(failed == 2);
    CHECK(ok == 2);
    CHECK(report.has_failures());
}

TEST_CASE("report: JSONL round trip and summary recomputation" * doctest::timeout(600)) {
    ExperimentConfig cfg = tiny_config("exp_report");
    ExperimentReport report = run_experiment(cfg);
    const std::string path = cfg.cache_dir + "/report.jsonl";
    report.write_jsonl(path);
    const ExperimentReport back = ExperimentReport::read_jsonl(path);
    CHECK(back.cells.size() == report.cells.size());
    CHECK(strip_volatile(back) == strip_volatile(report));

    const json summary = report.summarize();
    for (const json& row : summary) {
        const std::string method = row.at("method").get<std::string>();
        const std::size_t k = row.at("k").get<std::size_t>();
        double acc = 0.0;
        int n = 0, beat_base = 0;
        for (const CellResult& c : report.cells) {
            if (c.method != method || c.k != k || c.failed) continue;
            acc += c.test_accuracy;
            ++n;
            if (c.test_accuracy > c.base_accuracy) ++beat_base;
        }
        REQUIRE(n == row.at("cells").get<int>());
        CHECK(row.at("mean_test_accuracy").get<double>() ==
              doctest::Approx(acc / n).epsilon(1e-12));
        CHECK(row.at("outperformed_base").get<int>() == beat_base);
    }
    CHECK(!report.summarize_csv().empty());
}

TEST_CASE("ties_grid: 18 aggregate variants" * doctest::timeout(900)) {
    ExperimentConfig cfg = tiny_config("exp_ties_grid");
    cfg.tasks.resize(1);
    cfg.pool.descriptors.resize(3);
    cfg.ks = {2};
    ExperimentReport report = ties_grid(cfg);
    // 9 grid points x {with, without} target, 1 task, 1 seed
    CHECK(report.cells.size() == 18);
    std::set<std::string> methods;
    for (const CellResult& c : report.cells) {
        CHECK(!c.failed);
        methods.insert(c.method);
    }
    CHECK(methods.size() == 18);
    int with = 0;
    for (const std::string& m : methods)
        if (m.find("__with_target") != std::string::npos) ++with;
    CHECK(with == 9);
}

TEST_CASE("sweep_design_space: degenerate axes equal one run_experiment cell"
          * doctest::timeout(600)) {
    ExperimentConfig cfg = tiny_config("exp_sweep");
    cfg.tasks.resize(1);
    DesignSpaceAxes axes;
    axes.granularities = {GranularityKind::module};
    axes.selections = {SelectionStrategy::evaluation};
    axes.activations = {Activation::leaky_relu};
    axes.ks = {2};
    ExperimentReport sweep = sweep_design_space(cfg, axes);
    CHECK(sweep.cells.size() == 1);  // tasks x seeds x |axes product|
    REQUIRE(!sweep.cells[0].failed);

    ExperimentConfig direct_cfg = cfg;
    MethodSpec ours = MethodSpec::preset("ours");
    ours.name = sweep.cells[0].method;
    direct_cfg.methods = {ours};
    direct_cfg.ks = {2};
    ExperimentReport direct = run_experiment(direct_cfg);
    CHECK(sweep.cells[0].test_accuracy == direct.cells[0].test_accuracy);

    DesignSpaceAxes empty;
    CHECK_THROWS_AS(sweep_design_space(cfg, empty), ArgumentError);
}

TEST_CASE("inhouse_window_experiment: window plumbing" * doctest::timeout(900)) {
    ExperimentConfig cfg = tiny_config("exp_window");
    cfg.tasks = {
        {TaskFamily::projection_classify,
         {{"symbols", 8}, {"len", 4}, {"classes", 4}, {"world", 5}, {"angle_deg", 0}}, 51},
        {TaskFamily::projection_classify,
         {{"symbols", 8}, {"len", 4}, {"classes", 4}, {"world", 5}, {"angle_deg", 20}}, 52},
        {TaskFamily::projection_classify,
         {{"symbols", 8}, {"len", 4}, {"classes", 4}, {"world", 5}, {"angle_deg", 40}}, 53},
        {TaskFamily::copy, {{"n", 3}, {"alphabet", 8}}, 54},
    };
    MethodSpec ours = MethodSpec::preset("ours");
    ours.tune.steps = 8;
    cfg.methods = {ours};

    ExperimentReport report = inhouse_window_experiment(cfg, /*k=*/2, {0, 1});
    // per task and seed: two window cells plus the reinit baseline
    CHECK(report.cells.size() == 4 * 3);
    for (const CellResult& c : report.cells) {
        INFO(c.method, " on ", c.task, ": ", c.error);
        CHECK(!c.failed);
        CHECK(c.merged_adapters.size() == 2);
    }
    // omit_m=1 drops the top-ranked other-task adapter
    const CellResult* m0 = nullptr;
    const CellResult* m1 = nullptr;
    for (const CellResult& c : report.cells) {
        if (c.task != report.cells[0].task) continue;
        if (c.method == "ours_window_m00") m0 = &c;
        if (c.method == "ours_window_m01") m1 = &c;
    }
    REQUIRE(m0);
    REQUIRE(m1);
    CHECK(m0->selection.names[0] != m1->selection.names[0]);

    CHECK_THROWS_AS(inhouse_window_experiment(cfg, 4, {0, 5}), ArgumentError);
}

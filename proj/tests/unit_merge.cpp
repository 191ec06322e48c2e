// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "loramerge/merge.hpp"
#include "loramerge/selection.hpp"
#include "loramerge/train.hpp"

using namespace loramerge;

namespace {

const ModelConfig kSmall{/*vocab=*/32, /*d_model=*/32, /*n_layers=*/2, /*n_heads=*/2,
                         /*d_ff=*/64, /*max_seq=*/24};

TaskVectorSet single_module_set(const std::string& name, std::vector<double> values,
                                std::size_t rows, std::size_t cols) {
    TaskVectorSet s;
    s.name = name;
    s.deltas.emplace(ModulePath{0, ModuleType::q_proj}, Matrix(rows, cols, std::move(values)));
    return s;
}

// Literal three-step reference: trim (full stable sort by magnitude, lower
// flat index survives threshold ties), elect the dominant sign from the
// trimmed sum, mean over sign-agreeing nonzero entries, then scale. Kept
// separate from the production path on purpose.
Matrix ties_reference_module(const std::vector<Matrix>& deltas, double prune_frac, double coeff) {
    std::vector<Matrix> trimmed;
    for (const Matrix& d : deltas) {
        Matrix t = d;
        const std::size_t total = t.size();
        const auto keep = static_cast<std::size_t>(
            std::ceil((1.0 - prune_frac) * static_cast<double>(total)));
        std::vector<std::size_t> idx(total);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return std::fabs(t.data()[a]) > std::fabs(t.data()[b]);
        });
        // stable sort keeps equal magnitudes in flat-index order already
        for (std::size_t i = keep; i < total; ++i) t.data()[idx[i]] = 0.0;
        trimmed.push_back(std::move(t));
    }
    Matrix out(deltas[0].rows(), deltas[0].cols());
    for (std::size_t e = 0; e < out.size(); ++e) {
        double sum = 0.0;
        for (const Matrix& t : trimmed) sum += t.data()[e];
        const double sign = sum >= 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        int n = 0;
        for (const Matrix& t : trimmed) {
            const double v = t.data()[e];
            if (v == 0.0) continue;
            if ((v > 0.0) == (sign > 0.0)) {
                acc += v;
                ++n;
            }
        }
        out.data()[e] = n > 0 ? coeff * acc / n : 0.0;
    }
    return out;
}

}  // namespace

TEST_CASE("granularity group indices") {
    const Granularity model = Granularity::of(GranularityKind::model, kSmall);
    const Granularity layer = Granularity::of(GranularityKind::layer, kSmall);
    const Granularity sub = Granularity::of(GranularityKind::sublayer, kSmall);
    const Granularity mod = Granularity::of(GranularityKind::module, kSmall);
    CHECK(model.group_count() == 1);
    CHECK(layer.group_count() == 2);
    CHECK(sub.group_count() == 4);
    CHECK(mod.group_count() == 14);

    const ModulePath qp{1, ModuleType::q_proj};
    const ModulePath up{1, ModuleType::up_proj};
    CHECK(model.group_of(qp) == 0);
    CHECK(layer.group_of(qp) == 1);
    CHECK(sub.group_of(qp) == 2);
    CHECK(sub.group_of(up) == 3);
    CHECK(mod.group_of(qp) == 7);
    CHECK(mod.group_of(up) == 7 + 5);
}

TEST_CASE("apply_activation: definitions") {
    const Granularity g = Granularity::of(GranularityKind::model, kSmall);

    CoefficientTable zeros = CoefficientTable::make(4, g, Activation::softmax, CoeffInit::zeros);
    Matrix act = apply_activation(zeros);
    for (std::size_t r = 0; r < 4; ++r) CHECK(act(r, 0) == doctest::Approx(0.25).epsilon(1e-15));

    CoefficientTable lr = CoefficientTable::make(2, g, Activation::leaky_relu, CoeffInit::zeros);
    lr.raw(0, 0) = -1.0;
    lr.raw(1, 0) = 0.5;
    Matrix lact = apply_activation(lr);
    CHECK(lact(0, 0) == -0.01);
    CHECK(lact(1, 0) == 0.5);

    CoefficientTable lin = CoefficientTable::make(2, g, Activation::linear, CoeffInit::zeros);
    lin.raw(0, 0) = 0.837;
    lin.raw(1, 0) = -2.25;
    CHECK(apply_activation(lin) == lin.raw);
}

TEST_CASE("softmax activation: column stochastic within 1e-12") {
    const Granularity g = Granularity::of(GranularityKind::module, kSmall);
    CoefficientTable t = CoefficientTable::make(5, g, Activation::softmax, CoeffInit::zeros);
    Rng rng(3);
    for (auto& v : t.raw.values()) v = rng.normal(0.0, 2.0);
    Matrix act = apply_activation(t);
    for (std::size_t c = 0; c < act.cols(); ++c) {
        double sum = 0.0;
        for (std::size_t r = 0; r < act.rows(); ++r) {
            CHECK(act(r, c) >= 0.0);
            sum += act(r, c);
        }
        CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("combine: identities and module-level steering") {
    const Granularity model_g = Granularity::of(GranularityKind::model, kSmall);

    TaskVectorSet a = single_module_set("a", {1, 2, 3, 4}, 2, 2);
    TaskVectorSet b = a;
    b.name = "b";

    SUBCASE("affine identity with two equal sets") {
        CoefficientTable t = CoefficientTable::make(2, model_g, Activation::linear,
                                                    CoeffInit::zeros);
        t.raw(0, 0) = 0.5;
        t.raw(1, 0) = 0.5;
        std::vector<TaskVectorSet> sets{a, b};
        TaskVectorSet merged = combine(sets, t);
        CHECK(sub(merged.deltas.begin()->second, a.deltas.begin()->second).max_abs() < 1e-15);
    }

    SUBCASE("zero raw under linear gives a zero set") {
        CoefficientTable t = CoefficientTable::make(2, model_g, Activation::linear,
                                                    CoeffInit::zeros);
        std::vector<TaskVectorSet> sets{a, b};
        TaskVectorSet merged = combine(sets, t);
        for (const auto& [p, d] : merged.deltas) CHECK(d.max_abs() == 0.0);
    }

    SUBCASE("module-granularity one-hot selects one module of one adapter") {
        TaskVectorSet c;
        c.name = "c";
        c.deltas.emplace(ModulePath{0, ModuleType::q_proj}, Matrix::filled(2, 2, 5.0));
        c.deltas.emplace(ModulePath{1, ModuleType::k_proj}, Matrix::filled(2, 2, 7.0));
        TaskVectorSet d;
        d.name = "d";
        d.deltas.emplace(ModulePath{0, ModuleType::q_proj}, Matrix::filled(2, 2, -1.0));

        const Granularity mod_g = Granularity::of(GranularityKind::module, kSmall);
        CoefficientTable t = CoefficientTable::make(2, mod_g, Activation::linear,
                                                    CoeffInit::zeros);
        t.raw(0, static_cast<std::size_t>(mod_g.group_of({0, ModuleType::q_proj}))) = 1.0;
        std::vector<TaskVectorSet> sets{c, d};
        TaskVectorSet merged = combine(sets, t);
        CHECK(merged.deltas.at({0, ModuleType::q_proj}) == Matrix::filled(2, 2, 5.0));
        CHECK(merged.deltas.at({1, ModuleType::k_proj}).max_abs() == 0.0);
    }
}

TEST_CASE("combine: linear in deltas under linear activation") {
    Rng rng(5);
    const Granularity g = Granularity::of(GranularityKind::layer, kSmall);
    CoefficientTable t = CoefficientTable::make(3, g, Activation::linear, CoeffInit::zeros);
    for (auto& v : t.raw.values()) v = rng.normal(0.0, 1.0);

    std::vector<TaskVectorSet> sets;
    for (int i = 0; i < 3; ++i) {
        TaskVectorSet s;
        s.name = "s" + std::to_string(i);
        s.deltas.emplace(ModulePath{0, ModuleType::v_proj}, Matrix::randn(4, 4, 1.0, rng));
        s.deltas.emplace(ModulePath{1, ModuleType::up_proj}, Matrix::randn(4, 4, 1.0, rng));
        sets.push_back(std::move(s));
    }
    TaskVectorSet merged = combine(sets, t);
    std::vector<TaskVectorSet> scaled = sets;
    for (auto& s : scaled)
        for (auto& [p, d] : s.deltas) d = scale(d, 2.5);
    TaskVectorSet merged_scaled = combine(scaled, t);
    for (const auto& [p, d] : merged.deltas)
        CHECK(sub(scale(d, 2.5), merged_scaled.deltas.at(p)).max_abs() < 1e-12);
}

TEST_CASE("simple_average: selector and arithmetic") {
    TaskVectorSet a = single_module_set("a", {2}, 1, 1);
    TaskVectorSet b = single_module_set("b", {4}, 1, 1);
    std::vector<TaskVectorSet> sets{a, b};

    TaskVectorSet uniform = simple_average(sets);
    CHECK(uniform.deltas.begin()->second(0, 0) == doctest::Approx(3.0).epsilon(1e-15));

    std::vector<double> onehot{0.0, 1.0};
    TaskVectorSet picked = simple_average(sets, &onehot);
    CHECK(picked.deltas.begin()->second(0, 0) == 4.0);

    std::vector<double> bad{1.0};
    CHECK_THROWS_AS(simple_average(sets, &bad), ArgumentError);

    std::vector<TaskVectorSet> same{a, a, a};
    TaskVectorSet merged = simple_average(same);
    CHECK(merged.deltas.begin()->second(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("simple_average equals combine with uniform raw at model granularity") {
    Rng rng(6);
    std::vector<TaskVectorSet> sets;
    for (int i = 0; i < 4; ++i) {
        TaskVectorSet s;
        s.name = "s" + std::to_string(i);
        s.deltas.emplace(ModulePath{0, ModuleType::q_proj}, Matrix::randn(3, 5, 1.0, rng));
        sets.push_back(std::move(s));
    }
    const Granularity g = Granularity::of(GranularityKind::model, kSmall);
    CoefficientTable t = CoefficientTable::make(4, g, Activation::linear,
                                                CoeffInit::uniform_1_over_k);
    TaskVectorSet via_combine = combine(sets, t);
    TaskVectorSet via_average = simple_average(sets);
    for (const auto& [p, d] : via_combine.deltas)
        CHECK(d == via_average.deltas.at(p));  // exactly
}

TEST_CASE("granularity nesting: replicated model table equals module table") {
    Rng rng(8);
    std::vector<TaskVectorSet> sets;
    for (int i = 0; i < 2; ++i) {
        TaskVectorSet s;
        s.name = "s" + std::to_string(i);
        for (const auto& p : kSmall.all_module_paths())
            s.deltas.emplace(p, Matrix::randn(2, 2, 1.0, rng));
        sets.push_back(std::move(s));
    }
    const Granularity mg = Granularity::of(GranularityKind::model, kSmall);
    const Granularity md = Granularity::of(GranularityKind::module, kSmall);
    CoefficientTable tm = CoefficientTable::make(2, mg, Activation::linear, CoeffInit::zeros);
    tm.raw(0, 0) = 0.7;
    tm.raw(1, 0) = -0.2;
    CoefficientTable tmod = CoefficientTable::make(2, md, Activation::linear, CoeffInit::zeros);
    for (std::size_t g = 0; g < tmod.raw.cols(); ++g) {
        tmod.raw(0, g) = 0.7;
        tmod.raw(1, g) = -0.2;
    }
    TaskVectorSet a = combine(sets, tm);
    TaskVectorSet b = combine(sets, tmod);
    for (const auto& [p, d] : a.deltas) CHECK(d == b.deltas.at(p));
}

TEST_CASE("ties_merge: spec walkthrough on a 1x2 module") {
    TaskVectorSet v1 = single_module_set("v1", {1, -2}, 1, 2);
    TaskVectorSet v2 = single_module_set("v2", {3, 0.5}, 1, 2);
    std::vector<TaskVectorSet> sets{v1, v2};
    TaskVectorSet merged = ties_merge(sets, 0.5, 1.0);
    const Matrix& m = merged.deltas.begin()->second;
    CHECK(m(0, 0) == 3.0);
    CHECK(m(0, 1) == -2.0);
}

TEST_CASE("ties_merge: identity and opposite-sign election") {
    TaskVectorSet v1 = single_module_set("v1", {1, -2, 0.5, 0}, 2, 2);
    std::vector<TaskVectorSet> one{v1};
    TaskVectorSet same = ties_merge(one, 0.0, 1.0);
    CHECK(same.deltas.begin()->second == v1.deltas.begin()->second);

    TaskVectorSet neg = v1;
    neg.name = "neg";
    for (auto& [p, d] : neg.deltas) d = scale(d, -1.0);
    std::vector<TaskVectorSet> pair{v1, neg};
    TaskVectorSet merged = ties_merge(pair, 0.0, 1.0);
    // zero sums elect positive; mean over agreeing adapters returns the
    // positive entries
    const Matrix& m = merged.deltas.begin()->second;
    const Matrix& orig = v1.deltas.begin()->second;
    for (std::size_t e = 0; e < m.size(); ++e)
        CHECK(m.data()[e] == std::fabs(orig.data()[e]));
}

TEST_CASE("ties_merge: argument guards") {
    std::vector<TaskVectorSet> none;
    CHECK_THROWS_AS(ties_merge(none, 0.2, 1.0), ArgumentError);
    TaskVectorSet v1 = single_module_set("v1", {1}, 1, 1);
    std::vector<TaskVectorSet> one{v1};
    CHECK_THROWS_AS(ties_merge(one, 1.0, 1.0), ArgumentError);
}

TEST_CASE("ties_merge matches the literal three-step reference on random fixtures") {
    Rng rng(17);
    int fixtures = 0;
    for (int adapters = 1; adapters <= 3; ++adapters) {
        for (const double prune : {0.0, 1.0 / 3.0, 2.0 / 3.0}) {
            for (int rep = 0; rep < 60; ++rep) {
                const std::size_t rows = 1 + rng.below(3);
                const std::size_t cols = 1 + rng.below(3);
                std::vector<TaskVectorSet> sets;
                std::vector<Matrix> deltas;
                for (int a = 0; a < adapters; ++a) {
                    Matrix d(rows, cols);
                    for (auto& v : d.values())
                        v = static_cast<double>(static_cast<int>(rng.below(5))) - 2.0;
                    deltas.push_back(d);
                    sets.push_back(single_module_set("a" + std::to_string(a),
                                                     std::vector<double>(d.values().begin(),
                                                                         d.values().end()),
                                                     rows, cols));
                }
                const double coeff = rep % 2 == 0 ? 1.0 : 0.3;
                TaskVectorSet merged = ties_merge(sets, prune, coeff);
                Matrix expect = ties_reference_module(deltas, prune, coeff);
                CHECK(merged.deltas.begin()->second == expect);
                ++fixtures;
            }
        }
    }
    CHECK(fixtures >= 500);
}

TEST_CASE("tsv_merge: diagonal closed form and guards") {
    TaskVectorSet d = single_module_set("d", {3, 0, 0, 1}, 2, 2);
    std::vector<TaskVectorSet> sets{d};
    TaskVectorSet merged = tsv_merge(sets, 1, {1.0});
    const Matrix& m = merged.deltas.begin()->second;
    CHECK(m(0, 0) == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(std::fabs(m(1, 1)) < 1e-10);

    CHECK_THROWS_AS(tsv_merge(sets, 3, {1.0}), ArgumentError);
    CHECK_THROWS_AS(tsv_merge(sets, 1, {1.0, 2.0}), ArgumentError);
}

TEST_CASE("tsv_merge: zero weights give a zero set, low rank is identity") {
    Rng rng(9);
    Matrix low = matmul(Matrix::randn(6, 2, 1.0, rng), Matrix::randn(2, 5, 1.0, rng));
    TaskVectorSet s;
    s.name = "low";
    s.deltas.emplace(ModulePath{0, ModuleType::q_proj}, low);
    std::vector<TaskVectorSet> sets{s};

    TaskVectorSet zeroed = tsv_merge(sets, 2, {0.0});
    CHECK(zeroed.deltas.begin()->second.max_abs() == 0.0);

    TaskVectorSet same = tsv_merge(sets, 2, {1.0});
    CHECK(sub(same.deltas.begin()->second, low).frobenius_norm() < 1e-8);
}

TEST_CASE("tsv_merge at full rank reproduces simple averaging") {
    Rng rng(11);
    std::vector<TaskVectorSet> sets;
    for (int i = 0; i < 3; ++i) {
        TaskVectorSet s;
        s.name = "s" + std::to_string(i);
        s.deltas.emplace(ModulePath{0, ModuleType::q_proj}, Matrix::randn(5, 4, 1.0, rng));
        sets.push_back(std::move(s));
    }
    std::vector<double> alphas{1.0 / 3, 1.0 / 3, 1.0 / 3};
    TaskVectorSet tsv = tsv_merge(sets, 4, alphas);
    TaskVectorSet avg = simple_average(sets);
    for (const auto& [p, d] : tsv.deltas)
        CHECK(sub(d, avg.deltas.at(p)).frobenius_norm() < 1e-8);
}

TEST_CASE("merge_into_model: fold equivalence and inverse") {
    ToyModel model = build_model(kSmall, 4);
    Rng rng(3);
    TaskVectorSet overlay;
    overlay.name = "ov";
    for (const auto& [p, w] : model.weights)
        overlay.deltas.emplace(p, Matrix::randn(w.rows(), w.cols(), 0.02, rng));

    ToyModel folded = merge_into_model(model, overlay);
    CHECK(model.weights.at({0, ModuleType::q_proj}) ==
          build_model(kSmall, 4).weights.at({0, ModuleType::q_proj}));  // untouched

    TaskDescriptor desc{TaskFamily::copy, {{"n", 3}, {"alphabet", 8}}, 5};
    TaskDataset data = generate_task(desc, kSmall.vocab);
    const double via_overlay = forward_loss(model, &overlay, data.validation);
    const double via_fold = forward_loss(folded, nullptr, data.validation);
    CHECK(via_overlay == doctest::Approx(via_fold).epsilon(1e-10));

    TaskVectorSet negated = overlay;
    for (auto& [p, d] : negated.deltas) d = scale(d, -1.0);
    ToyModel restored = merge_into_model(folded, negated);
    for (const auto& [p, w] : restored.weights)
        CHECK(sub(w, model.weights.at(p)).max_abs() < 1e-12);

    TaskVectorSet empty;
    ToyModel same = merge_into_model(model, empty);
    for (const auto& [p, w] : same.weights) CHECK(w == model.weights.at(p));
}

TEST_CASE("select_random: permutation, determinism, frequency sanity") {
    std::vector<LoraAdapter> pool(4);
    for (int i = 0; i < 4; ++i) pool[static_cast<std::size_t>(i)].name = "a" + std::to_string(i);

    SelectionResult full = select_random(pool, 4, 3);
    std::set<std::string> names(full.names.begin(), full.names.end());
    CHECK(names.size() == 4);

    CHECK(select_random(pool, 2, 9).names == select_random(pool, 2, 9).names);
    CHECK_THROWS_AS(select_random(pool, 5, 1), ArgumentError);

    std::map<std::string, int> freq;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) freq[select_random(pool, 1, 1000 + i).names[0]]++;
    // 3 sigma around draws/4 for a binomial(draws, 1/4)
    const double sigma = std::sqrt(draws * 0.25 * 0.75);
    for (const auto& [name, count] : freq)
        CHECK(std::fabs(count - draws / 4.0) < 3.0 * sigma);
}

TEST_CASE("select_by_similarity: self, negation, clamp orthogonality") {
    const ModelConfig cfg = kSmall;
    auto make = [&](const std::string& name, double fill) {
        LoraAdapter a;
        a.name = name;
        a.alpha = 2;
        a.rank = 2;
        LoraPair pair;
        pair.a = Matrix::filled(2, cfg.d_model, fill);
        pair.b = Matrix::filled(cfg.d_model, 2, 1.0);
        pair.scaling = 1.0;
        a.modules.emplace(ModulePath{0, ModuleType::q_proj}, pair);
        return a;
    };
    LoraAdapter ref = make("ref", 0.5);
    LoraAdapter same = make("same", 0.5);
    LoraAdapter neg = make("neg", -0.5);
    std::vector<LoraAdapter> pool{same, neg};

    for (const auto metric : {SelectionStrategy::cosine, SelectionStrategy::abs,
                              SelectionStrategy::clamp, SelectionStrategy::quasi_fim}) {
        SelectionResult r = select_by_similarity(pool, ref, metric, 2, cfg);
        const double self_score = r.names[0] == "same" ? r.scores[0] : r.scores[1];
        CHECK(self_score == doctest::Approx(1.0).epsilon(1e-12));
    }

    SelectionResult cos = select_by_similarity(pool, ref, SelectionStrategy::cosine, 2, cfg);
    const double neg_cos = cos.names[0] == "neg" ? cos.scores[0] : cos.scores[1];
    CHECK(neg_cos == doctest::Approx(-1.0).epsilon(1e-12));
    for (const auto metric : {SelectionStrategy::abs, SelectionStrategy::quasi_fim}) {
        SelectionResult r = select_by_similarity(pool, ref, metric, 2, cfg);
        const double neg_score = r.names[0] == "neg" ? r.scores[0] : r.scores[1];
        CHECK(neg_score == doctest::Approx(1.0).epsilon(1e-12));
    }

    // clamp: ref [1,-1], candidate [-1,1] -> both clamp to disjoint支持 -> 0
    auto tiny = [&](const std::string& name, double first, double second) {
        LoraAdapter a;
        a.name = name;
        a.alpha = 1;
        a.rank = 1;
        LoraPair pair;
        pair.a = Matrix(1, cfg.d_model);
        pair.a(0, 0) = first;
        pair.a(0, 1) = second;
        pair.b = Matrix(cfg.d_model, 1);
        pair.b(0, 0) = 1.0;
        pair.scaling = 1.0;
        a.modules.emplace(ModulePath{0, ModuleType::q_proj}, pair);
        return a;
    };
    LoraAdapter pref = tiny("pref", 1.0, -1.0);
    std::vector<LoraAdapter> pool2{tiny("flip", -1.0, 1.0)};
    SelectionResult r = select_by_similarity(pool2, pref, SelectionStrategy::clamp, 1, cfg);
    CHECK(r.scores[0] == 0.0);
}

TEST_CASE("select_by_similarity: scores invariant to positive rescaling") {
    Rng rng(4);
    auto rand_adapter = [&](const std::string& name, double mult) {
        LoraAdapter a;
        a.name = name;
        a.alpha = 2;
        a.rank = 2;
        Rng local(derive_seed(4, name));
        LoraPair pair;
        pair.a = Matrix::randn(2, kSmall.d_model, 0.1, local);
        pair.b = Matrix::randn(kSmall.d_model, 2, 0.1, local);
        pair.scaling = mult;
        a.modules.emplace(ModulePath{1, ModuleType::v_proj}, pair);
        return a;
    };
    LoraAdapter ref = rand_adapter("ref", 1.0);
    std::vector<LoraAdapter> pool{rand_adapter("x", 1.0)};
    std::vector<LoraAdapter> pool_scaled{rand_adapter("x", 3.0)};
    for (const auto metric : {SelectionStrategy::cosine, SelectionStrategy::abs,
                              SelectionStrategy::clamp, SelectionStrategy::quasi_fim}) {
        const double s1 = select_by_similarity(pool, ref, metric, 1, kSmall).scores[0];
        const double s2 = select_by_similarity(pool_scaled, ref, metric, 1, kSmall).scores[0];
        CHECK(s1 == doctest::Approx(s2).epsilon(1e-9));
    }
}

TEST_CASE("select_by_evaluation: planted target ranks first, ties break by name") {
    ToyModel model = build_model(kSmall, 6);
    TaskDescriptor desc{TaskFamily::copy, {{"n", 3}, {"alphabet", 8}}, 5};
    TaskDataset data = generate_task(desc, kSmall.vocab);

    TrainLoraOptions o;
    o.steps = 150;
    o.rank = 4;
    o.seed = 3;
    o.name = "target";
    auto trained = train_target_lora(model, data, o);

    std::vector<LoraAdapter> pool;
    pool.push_back(trained.adapter);
    // zero adapters score exactly base accuracy and tie; names break ties
    for (const std::string& name : {"zc", "za", "zb"}) {
        LoraAdapter z;
        z.name = name;
        z.alpha = 2;
        z.rank = 2;
        LoraPair pair;
        pair.a = Matrix(2, kSmall.d_model);
        pair.b = Matrix(kSmall.d_model, 2);
        pair.scaling = 1.0;
        z.modules.emplace(ModulePath{0, ModuleType::q_proj}, pair);
        pool.push_back(z);
    }

    SelectionResult r = select_by_evaluation(pool, model, data.train, 3);
    CHECK(r.names[0] == "target");
    CHECK(r.names[1] == "za");
    CHECK(r.names[2] == "zb");
    CHECK(r.scores[0] > r.scores[1]);

    // score equals an independent evaluation of the same adapter
    auto tvs = materialize_task_vectors(trained.adapter);
    CHECK(r.scores[0] == evaluate_accuracy(model, &tvs, data.train));

    // pool order never changes the selected set
    std::vector<LoraAdapter> shuffled{pool[2], pool[0], pool[3], pool[1]};
    SelectionResult r2 = select_by_evaluation(shuffled, model, data.train, 3);
    CHECK(r2.names == r.names);

    SelectionResult k1 = select_by_evaluation(pool, model, data.train, 1);
    CHECK(k1.names == std::vector<std::string>{"target"});
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "lorarank/search.hpp"

using namespace lorarank;

namespace {

ModelConfig search_model_config() {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.hidden_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.mlp_dim = 32;
    cfg.max_seq_len = 32;
    cfg.seed = 7;
    cfg.targets = {TargetModule::Q, TargetModule::V};
    return cfg;
}

SearchConfig small_search_config() {
    SearchConfig cfg;
    cfg.search_epochs = 2;
    cfg.finetune_epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 7;
    cfg.space = {2, 4, 8};
    return cfg;
}

std::vector<std::pair<std::string, std::vector<double>>> snapshot(FrozenTransformer& model) {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (auto& [name, tensor] : model.named_tensors()) out.emplace_back(name, tensor.data());
    return out;
}

// Plain linear softmax classifier; convex in its weight matrix.
struct LinearToy final : TrainableModel {
    Tensor x;
    Tensor w;
    std::vector<int> targets;

    LinearToy(Tensor x_, Tensor w_, std::vector<int> t)
        : x(std::move(x_)), w(std::move(w_)), targets(std::move(t)) {
        w.set_requires_grad(true);
    }

    Tensor batch_loss(const std::vector<const Example*>&) override {
        return cross_entropy_loss(matmul(x, w), targets);
    }
    std::vector<TensorPtr> weight_params() override { return {w.impl()}; }
    std::vector<TensorPtr> alpha_params() override { return {}; }
};

// Single supernet module whose outer ring carries all the signal: only the
// full-rank window can reduce the loss.
struct DominanceToy final : TrainableModel {
    SuperLoraModule mod;
    Tensor x;
    std::vector<int> targets;

    DominanceToy()
        : mod(make_module(), RankSearchSpace({2, 4}), "toy", 0.0, dummy_rng()),
          x(Tensor::from({1, 4}, {1, 0, 0, 1})),
          targets({0}) {
        // Identity A; B routes the outer rows (0 and 3) into the correct
        // logit. The central window alone contributes nothing.
        auto& wa = mod.w_a().mut_data();
        std::fill(wa.begin(), wa.end(), 0.0);
        for (std::size_t i = 0; i < 4; ++i) wa[i * 4 + i] = 1.0;
        auto& wb = mod.w_b().mut_data();
        std::fill(wb.begin(), wb.end(), 0.0);
        wb[0 * 2 + 0] = 3.0;
        wb[3 * 2 + 0] = 3.0;
    }

    static Tensor make_module() { return Tensor::zeros({4, 2}); }
    static RngStream& dummy_rng() {
        static RngStream rng(1);
        return rng;
    }

    Tensor batch_loss(const std::vector<const Example*>&) override {
        return cross_entropy_loss(supernet_forward(x, mod), targets);
    }
    std::vector<TensorPtr> weight_params() override {
        return {mod.w_a().impl(), mod.w_b().impl()};
    }
    std::vector<TensorPtr> alpha_params() override { return {mod.alphas().impl()}; }
};

}  // namespace

TEST_CASE("weight_step with zero learning rate changes nothing and returns the loss") {
    Tensor x = Tensor::from({2, 3}, {1, 0, 2, -1, 1, 0});
    Tensor w = Tensor::from({3, 2}, {0.5, -0.2, 0.1, 0.3, -0.4, 0.2});
    LinearToy toy(x, w, {0, 1});

    SearchConfig cfg;
    cfg.weight_opt = OptimizerConfig{OptKind::Sgd, 0.0};
    SearchState state;
    BiLevelStepper stepper(toy, cfg, state);

    const auto before = toy.w.data();
    const double loss = stepper.weight_step({});
    CHECK(loss > 0.0);
    CHECK(toy.w.data() == before);
    CHECK(state.step == 1);
}

TEST_CASE("a single SGD step matches the closed-form update and decreases the loss") {
    Tensor x = Tensor::from({2, 3}, {1.0, 0.5, -1.0, 0.2, -0.3, 0.8});
    Tensor w = Tensor::from({3, 2}, {0.3, -0.1, 0.2, 0.4, -0.5, 0.1});
    std::vector<int> targets = {0, 1};
    LinearToy toy(x, w, targets);

    const double lr = 0.1;
    SearchConfig cfg;
    cfg.weight_opt = OptimizerConfig{OptKind::Sgd, lr};
    SearchState state;
    BiLevelStepper stepper(toy, cfg, state);

    // Analytic oracle: dW = X^T (softmax(XW) - onehot) / batch, W' = W - lr dW.
    auto eval = [&](const std::vector<double>& wv) {
        double loss = 0.0;
        std::vector<double> probs(2 * 2);
        for (int r = 0; r < 2; ++r) {
            double logits[2] = {0, 0};
            for (int j = 0; j < 2; ++j)
                for (int p = 0; p < 3; ++p) logits[j] += x.at(r, p) * wv[p * 2 + j];
            const double mx = std::max(logits[0], logits[1]);
            const double z = std::exp(logits[0] - mx) + std::exp(logits[1] - mx);
            for (int j = 0; j < 2; ++j) probs[r * 2 + j] = std::exp(logits[j] - mx) / z;
            loss -= std::log(probs[r * 2 + targets[r]]);
        }
        return std::make_pair(loss / 2.0, probs);
    };
    const auto [loss_before, probs] = eval(toy.w.data());
    std::vector<double> expected = toy.w.data();
    for (int p = 0; p < 3; ++p)
        for (int j = 0; j < 2; ++j) {
            double g = 0.0;
            for (int r = 0; r < 2; ++r) {
                const double indicator = targets[r] == j ? 1.0 : 0.0;
                g += x.at(r, p) * (probs[r * 2 + j] - indicator) / 2.0;
            }
            expected[p * 2 + j] -= lr * g;
        }

    const double reported = stepper.weight_step({});
    CHECK(reported == Catch::Approx(loss_before).margin(1e-12));
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(toy.w.data()[i] == Catch::Approx(expected[i]).margin(1e-12));
    CHECK(eval(toy.w.data()).first < loss_before);
}

TEST_CASE("alpha_step increases the alpha of the dominating rank") {
    DominanceToy toy;
    SearchConfig cfg;
    cfg.alpha_opt = OptimizerConfig{OptKind::Sgd, 0.5};
    SearchState state;
    BiLevelStepper stepper(toy, cfg, state);

    const auto wa_before = toy.mod.w_a().data();
    const auto wb_before = toy.mod.w_b().data();
    const double a2_before = toy.mod.alphas().at(0);
    const double a4_before = toy.mod.alphas().at(1);

    stepper.alpha_step({});

    CHECK(toy.mod.w_a().data() == wa_before);  // bit-exact freeze
    CHECK(toy.mod.w_b().data() == wb_before);
    CHECK(toy.mod.alphas().at(1) > a4_before);  // full-rank alpha strictly rises
    CHECK(toy.mod.alphas().at(0) < a2_before);
}

TEST_CASE("alpha_step with zero learning rate changes nothing") {
    DominanceToy toy;
    SearchConfig cfg;
    cfg.alpha_opt = OptimizerConfig{OptKind::Sgd, 0.0};
    SearchState state;
    BiLevelStepper stepper(toy, cfg, state);
    const auto before = toy.mod.alphas().data();
    stepper.alpha_step({});
    CHECK(toy.mod.alphas().data() == before);
}

TEST_CASE("alpha_step without architectural parameters is a state error") {
    Tensor x = Tensor::from({1, 2}, {1, 0});
    Tensor w = Tensor::zeros({2, 2});
    LinearToy toy(x, w, {0});
    SearchConfig cfg;
    SearchState state;
    BiLevelStepper stepper(toy, cfg, state);
    CHECK_THROWS_AS(stepper.alpha_step({}), StateError);
}

TEST_CASE("bi-level steps touch disjoint parameter groups over a 50-step run") {
    FrozenTransformer model(search_model_config());
    SearchConfig cfg = small_search_config();
    model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)}, cfg.lora_alpha,
                          cfg.seed);
    auto bundle = gen_task("copy", 60, cfg.seed);
    TransformerTask task(model);
    SearchState state;
    BiLevelStepper stepper(task, cfg, state);

    auto weight_names = [&] {
        std::map<std::string, bool> names;
        for (auto* lin : model.adaptable_modules()) {
            names[lin->name + ".w_a"] = true;
            names[lin->name + ".w_b"] = true;
        }
        return names;
    }();

    auto batches = batch_iter(bundle.train, cfg.batch_size, cfg.seed, 0);
    std::size_t executed = 0;
    for (std::size_t i = 0; executed < 50; ++i) {
        const auto& idx = batches[i % batches.size()];
        std::vector<const Example*> batch;
        for (auto j : idx) batch.push_back(&bundle.train.examples[j]);

        auto before = snapshot(model);
        stepper.weight_step(batch);
        ++executed;
        auto after = snapshot(model);
        for (std::size_t t = 0; t < before.size(); ++t) {
            const auto& name = before[t].first;
            const bool may_change = weight_names.count(name) > 0;
            if (!may_change) {
                REQUIRE(after[t].second == before[t].second);  // alphas + frozen bit-exact
            }
        }

        before = std::move(after);
        stepper.alpha_step(batch);
        ++executed;
        after = snapshot(model);
        for (std::size_t t = 0; t < before.size(); ++t) {
            const auto& name = before[t].first;
            const bool is_alpha = name.size() > 7 &&
                                  name.compare(name.size() - 7, 7, ".alphas") == 0;
            if (!is_alpha) {
                REQUIRE(after[t].second == before[t].second);  // weights + frozen bit-exact
            }
        }

        // Alphas stay on the simplex after every step.
        for (auto* mod : model.supernet_modules()) {
            Tape::Scope scope;
            Tensor p = softmax_alphas(mod->alphas());
            double sum = 0.0;
            for (double v : p.data()) {
                REQUIRE(v > 0.0);
                REQUIRE(v < 1.0);
                sum += v;
            }
            REQUIRE(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("frozen weights are bit-identical after a full search run") {
    FrozenTransformer model(search_model_config());
    SearchConfig cfg = small_search_config();
    model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)}, cfg.lora_alpha,
                          cfg.seed);
    auto frozen_before = [&] {
        std::vector<std::vector<double>> out;
        for (auto& [name, tensor] : model.named_tensors(true)) out.push_back(tensor.data());
        return out;
    }();

    auto bundle = gen_task("copy", 60, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    RankMap map = driver.run_search();
    CHECK(map.size() == model.supernet_modules().size());

    auto frozen_after = [&] {
        std::vector<std::vector<double>> out;
        for (auto& [name, tensor] : model.named_tensors(true)) out.push_back(tensor.data());
        return out;
    }();
    CHECK(frozen_before == frozen_after);
}

TEST_CASE("singleton search space yields the trivial map and immobile alphas") {
    ModelConfig mc = search_model_config();
    FrozenTransformer model(mc);
    SearchConfig cfg = small_search_config();
    cfg.space = {8};
    cfg.search_epochs = 1;
    model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)}, cfg.lora_alpha,
                          cfg.seed);
    auto bundle = gen_task("copy", 60, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    RankMap map = driver.run_search();
    for (const auto& e : map.entries) {
        CHECK(e.rank == 8);
        CHECK(e.alphas == std::vector<double>{1.0});
    }
    for (auto* mod : model.supernet_modules()) {
        CHECK(mod->alphas().data() == std::vector<double>{0.0});  // never moved
    }
}

TEST_CASE("run_search is deterministic under a fixed seed") {
    auto run = [] {
        FrozenTransformer model(search_model_config());
        SearchConfig cfg = small_search_config();
        model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)},
                              cfg.lora_alpha, cfg.seed);
        auto bundle = gen_task("copy", 60, cfg.seed);
        SearchDriver driver(model, bundle, cfg);
        RankMap map = driver.run_search();
        std::vector<double> weights;
        for (auto& [name, tensor] : model.named_tensors())
            weights.insert(weights.end(), tensor.data().begin(), tensor.data().end());
        std::vector<double> curves;
        for (const auto& row : driver.state().rows) {
            curves.push_back(row.train_loss);
            curves.push_back(row.val_loss);
            curves.push_back(row.eval_ppl);
        }
        return std::make_tuple(map.as_map(), weights, curves);
    };
    auto [m1, w1, c1] = run();
    auto [m2, w2, c2] = run();
    CHECK(m1 == m2);
    CHECK(w1 == w2);
    CHECK(c1 == c2);
}

TEST_CASE("searched ranks are valid members of the space") {
    FrozenTransformer model(search_model_config());
    SearchConfig cfg = small_search_config();
    cfg.search_epochs = 3;
    model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)}, cfg.lora_alpha,
                          cfg.seed);
    auto bundle = gen_task("copy", 80, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    RankMap map = driver.run_search();
    RankSearchSpace space{std::vector<std::size_t>(cfg.space)};
    for (const auto& e : map.entries) CHECK(space.contains(e.rank));

    // Alpha history rows lie on the simplex.
    for (const auto& epoch_row : driver.state().alpha_history) {
        for (const auto& dist : epoch_row) {
            double sum = 0.0;
            for (double v : dist) sum += v;
            CHECK(sum == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("zero finetune epochs reports the warm-start perplexity") {
    FrozenTransformer model(search_model_config());
    SearchConfig cfg = small_search_config();
    cfg.search_epochs = 1;
    cfg.finetune_epochs = 0;
    model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)}, cfg.lora_alpha,
                          cfg.seed);
    auto bundle = gen_task("copy", 60, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    RankMap map = driver.run_search();
    const double ppl = driver.run_finetune(map);
    // The model now carries the extracted warm-start adapters; evaluating it
    // directly must agree.
    CHECK(ppl == Catch::Approx(eval_perplexity(model, bundle.eval_split)).epsilon(1e-12));
    CHECK(model.supernet_modules().empty());
}

TEST_CASE("singleton space with reinit reproduces plain LoRA fine-tuning bit-exactly") {
    SearchConfig cfg = small_search_config();
    cfg.space = {4};
    cfg.search_epochs = 1;
    cfg.finetune_epochs = 2;
    cfg.reinit_after_search = true;
    auto bundle = gen_task("copy", 60, cfg.seed);

    // Searched path: supernet over the singleton space, then reinitialized
    // fixed-rank fine-tuning.
    FrozenTransformer searched(search_model_config());
    searched.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)},
                             cfg.lora_alpha, cfg.seed);
    SearchDriver searched_driver(searched, bundle, cfg);
    RankMap map = searched_driver.run_search();
    const double searched_ppl = searched_driver.run_finetune(map);

    // Baseline: plain LoRA at rank 4 on a fresh frozen model.
    FrozenTransformer baseline(search_model_config());
    SearchConfig base_cfg = cfg;
    base_cfg.search_epochs = 0;
    SearchDriver base_driver(baseline, bundle, base_cfg);
    RankMap uniform;
    for (auto* lin : baseline.adaptable_modules())
        uniform.add({lin->name, 4, {}, {}});
    const double base_ppl = base_driver.run_finetune(uniform);

    CHECK(searched_ppl == base_ppl);
    // Adapter weights agree bit-exactly.
    auto searched_mods = searched.adaptable_modules();
    auto base_mods = baseline.adaptable_modules();
    REQUIRE(searched_mods.size() == base_mods.size());
    for (std::size_t i = 0; i < searched_mods.size(); ++i) {
        REQUIRE(searched_mods[i]->adapter.has_value());
        REQUIRE(base_mods[i]->adapter.has_value());
        CHECK(searched_mods[i]->adapter->w_a.data() == base_mods[i]->adapter->w_a.data());
        CHECK(searched_mods[i]->adapter->w_b.data() == base_mods[i]->adapter->w_b.data());
    }
}

TEST_CASE("finetune on a fixed-adapter model validates rank agreement") {
    FrozenTransformer model(search_model_config());
    model.attach_adapters(4, 0.0, 7);
    SearchConfig cfg = small_search_config();
    cfg.finetune_epochs = 0;
    auto bundle = gen_task("copy", 60, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    RankMap wrong;
    for (auto* lin : model.adaptable_modules()) wrong.add({lin->name, 8, {}, {}});
    CHECK_THROWS_AS(driver.run_finetune(wrong), ValueError);
}

TEST_CASE("non-finite losses abort with diagnostics after invoking the hook") {
    FrozenTransformer model(search_model_config());
    SearchConfig cfg = small_search_config();
    model.attach_supernet(RankSearchSpace{std::vector<std::size_t>(cfg.space)}, cfg.lora_alpha,
                          cfg.seed);
    // Corrupt one adapter weight so the very first forward yields NaN.
    model.supernet_modules().front()->w_a().set(0, std::nan(""));
    auto bundle = gen_task("copy", 60, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    std::string hook_message;
    driver.abort_hook = [&](const std::string& reason) { hook_message = reason; };
    CHECK_THROWS_MATCHES(driver.run_search(), NumericError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("step") &&
                             Catch::Matchers::ContainsSubstring("batch")));
    CHECK_FALSE(hook_message.empty());
}

TEST_CASE("run_search requires supernet attachments") {
    FrozenTransformer model(search_model_config());
    SearchConfig cfg = small_search_config();
    auto bundle = gen_task("copy", 60, cfg.seed);
    SearchDriver driver(model, bundle, cfg);
    CHECK_THROWS_AS(driver.run_search(), StateError);
}

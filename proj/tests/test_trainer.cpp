#include <doctest.h>

#include <cmath>

#include "mergeforge/errors.hpp"
#include "mergeforge/evaluation.hpp"
#include "mergeforge/optim.hpp"
#include "mergeforge/trainer.hpp"
#include "test_util.hpp"

using namespace mergeforge;

TEST_SUITE_BEGIN("trainer");

TEST_CASE("an empty train split returns the base bitwise") {
    ModelConfig config = mftest::micro_config();
    ParameterSet base = init_model(config, 1);
    TaskDataset task;
    task.task_id = "empty";
    TrainConfig tc;
    tc.epochs = 3;
    ParameterSet out = finetune(config, base, task, tc);
    CHECK(out.flatten() == base.flatten());
}

TEST_CASE("training twice with the same seed gives identical checkpoints") {
    ModelConfig config = mftest::micro_config();
    ParameterSet base = init_model(config, 2);
    DatasetSizes sizes;
    sizes.train = 12;
    sizes.validation = 4;
    sizes.test = 4;
    TaskDataset task = make_classification_task("parity", 5, sizes);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = 123;
    ParameterSet a = finetune(config, base, task, tc);
    ParameterSet b = finetune(config, base, task, tc);
    CHECK(a.flatten() == b.flatten());
}

TEST_CASE("task vector reconstruction is bitwise exact") {
    ModelConfig config = mftest::micro_config();
    ParameterSet base = init_model(config, 3);
    ParameterSet tuned = init_model(config, 4);

    // Adversarial coordinates where fl(b + fl(t - b)) != t without care.
    base.param(0, 0).at(0) = 1.0;
    tuned.param(0, 0).at(0) = -1.0 + std::ldexp(1.0, -53);
    base.param(0, 0).at(1) = 0.1;
    tuned.param(0, 0).at(1) = -0.30000000000000004;

    TaskVector tau(base, tuned);
    ParameterSet rebuilt = reconstruct(base, tau);
    CHECK(rebuilt.flatten() == tuned.flatten());
}

TEST_CASE("task vector of identical checkpoints is zero") {
    ModelConfig config = mftest::micro_config();
    ParameterSet base = init_model(config, 5);
    TaskVector tau(base, base);
    for (double v : tau.flatten()) CHECK(v == 0.0);
    CHECK(tau.norm() == 0.0);
}

TEST_CASE("task vector norm matches a flat-array oracle") {
    ModelConfig config = mftest::micro_config();
    ParameterSet base = init_model(config, 6);
    ParameterSet tuned = init_model(config, 7);
    TaskVector tau(base, tuned);

    auto fb = base.flatten();
    auto ft = tuned.flatten();
    double s = 0.0;
    for (size_t i = 0; i < fb.size(); ++i) {
        const double d = ft[i] - fb[i];
        s += d * d;
    }
    CHECK(tau.norm() == doctest::Approx(std::sqrt(s)).epsilon(1e-12));
}

TEST_CASE("manifest mismatch is rejected") {
    ParameterSet a = init_model(mftest::micro_config(), 1);
    ParameterSet b = init_model(mftest::tiny_config(), 1);
    CHECK_THROWS_AS(task_vector(a, b), ContractViolation);
}

TEST_CASE("prompt positions receive exactly zero logit gradient") {
    ModelConfig config = mftest::micro_config();
    ParameterSet params = init_model(config, 8);
    LanguageModel model(config, params);

    CompletionItem item = completion_item({"abc", "xy"});
    Tape tape;
    // Full-row forward so every position's logits are on the tape.
    NodeId lp = model.forward_log_probs(tape, item.input);
    const int64_t total = static_cast<int64_t>(item.input.size());
    Tensor onehot({total, config.vocab_size});
    for (size_t r = 0; r < item.rows.size(); ++r)
        onehot.at(item.rows[r], item.targets[r]) = 1.0;
    NodeId loss = tape.multiply_scalar(tape.sum(tape.multiply(lp, tape.constant(onehot))),
                                       -1.0 / static_cast<double>(item.targets.size()));
    auto grads = tape.backward(loss);

    // The logits feed log_softmax; walk one node back from the output.
    const NodeId logits = tape.node(lp).a;
    const Tensor& g = grads[static_cast<size_t>(logits)];
    REQUIRE(!g.empty());
    const int32_t first_answer_row = item.rows.front();
    for (int64_t r = 0; r < first_answer_row; ++r)
        for (int64_t c = 0; c < g.cols(); ++c) CHECK(g.at(r, c) == 0.0);
    // ...and the answer rows do receive gradient.
    double answer_mass = 0.0;
    for (int64_t c = 0; c < g.cols(); ++c) answer_mass += std::abs(g.at(first_answer_row, c));
    CHECK(answer_mass > 0.0);
}

TEST_CASE("Adam reproduces the published update rule on one parameter") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam adam(cfg, 1);
    std::vector<double> x = {0.0};

    // Step 1, gradient 0.5, computed by hand from the update rule.
    double m = 0.0, v = 0.0;
    std::vector<double> g = {0.5};
    m = 0.9 * m + 0.1 * g[0];
    v = 0.999 * v + 0.001 * g[0] * g[0];
    double want = 0.0 - 0.1 * (m / (1 - 0.9)) / (std::sqrt(v / (1 - 0.999)) + 1e-8);
    adam.step(x, g);
    CHECK(x[0] == doctest::Approx(want).epsilon(1e-15));

    // Step 2, gradient -0.25.
    g[0] = -0.25;
    m = 0.9 * m + 0.1 * g[0];
    v = 0.999 * v + 0.001 * g[0] * g[0];
    want = x[0] - 0.1 * (m / (1 - 0.9 * 0.9)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    adam.step(x, g);
    CHECK(x[0] == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("fine-tuning drives the loss down on a small task") {
    ModelConfig config = mftest::micro_config();
    ParameterSet base = init_model(config, 9);
    DatasetSizes sizes;
    sizes.train = 24;
    sizes.validation = 8;
    sizes.test = 8;
    TaskDataset task = make_classification_task("parity", 17, sizes);
    TrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 8;
    tc.learning_rate = 1e-3;
    tc.seed = 2;
    TrainLog log;
    finetune(config, base, task, tc, &log);
    REQUIRE(log.epoch_loss.size() == 8);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());
    for (double l : log.epoch_loss) CHECK(std::isfinite(l));
}

// Regression gate, thresholds frozen from a reference run of this recipe.
TEST_CASE("parity fine-tune reaches 95% test accuracy" * doctest::timeout(600)) {
    ModelConfig config;  // default model
    ParameterSet base = init_model(config, 1);
    TaskDataset task = make_classification_task("parity", 7);
    TrainConfig tc;
    tc.seed = 7;
    ParameterSet tuned = finetune(config, base, task, tc);
    PerfResult result = perf(LanguageModel(config, tuned), task, MetricKind::accuracy);
    CHECK(result.value >= 0.95);
    CHECK(result.n_examples == 100);
}

TEST_SUITE_END();

#include <doctest.h>

#include <cmath>
#include <memory>

#include "core/nn.hpp"

using namespace mf;
using namespace mf::nn;

namespace {

// Central-difference gradient check of mean cross-entropy through `net`.
// Perturbs `samples` randomly chosen parameters.
void gradient_check(Sequential& net, const Tensor& input, const std::vector<int>& labels,
                    int samples, Rng& pick, double tolerance = 1e-3) {
    std::vector<ParamRef> params;
    net.collect_params("net", params);
    Rng fwd_rng(0);

    zero_grads(params);
    Tensor logits = net.forward(input, false, fwd_rng);
    SoftmaxLoss loss = softmax_cross_entropy(logits, labels);
    net.backward(loss.dlogits);

    int checked = 0;
    int attempts = 0;
    while (checked < samples && attempts < samples * 20) {
        ++attempts;
        auto& p = params[pick.uniform_int(static_cast<int>(params.size()))];
        std::size_t i = static_cast<std::size_t>(pick.uniform_int(static_cast<int>(p.value->size())));
        double analytic = p.grad->v[i];

        double h = 1e-5 * std::max(1.0, std::fabs(p.value->v[i]));
        double saved = p.value->v[i];
        p.value->v[i] = saved + h;
        double up = softmax_cross_entropy(net.forward(input, false, fwd_rng), labels).loss;
        p.value->v[i] = saved - h;
        double down = softmax_cross_entropy(net.forward(input, false, fwd_rng), labels).loss;
        p.value->v[i] = saved;

        double numeric = (up - down) / (2.0 * h);
        double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
        if (std::fabs(analytic) < 1e-10 && std::fabs(numeric) < 1e-10) continue;  // inactive unit
        CHECK(std::fabs(analytic - numeric) / denom < tolerance);
        ++checked;
    }
    CHECK(checked == samples);
}

Tensor random_input(const std::vector<int>& shape, Rng& rng) {
    Tensor t(shape);
    for (double& v : t.v) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("gradient check: conv / depthwise / dense / pool stack") {
    Rng init(7);
    Sequential net;
    net.add(std::make_unique<Conv2D>(1, 4, 3, 2, 1, init));
    net.add(std::make_unique<ReLU>());
    net.add(std::make_unique<DepthwiseConv2D>(4, 3, 2, 1, init));
    net.add(std::make_unique<ReLU>());
    net.add(std::make_unique<Conv2D>(4, 6, 1, 1, 0, init));
    net.add(std::make_unique<ReLU>());
    net.add(std::make_unique<GlobalAvgPool2D>());
    net.add(std::make_unique<Dense>(6, 2, init));

    Rng data(21);
    Tensor x = random_input({3, 1, 12, 10}, data);
    std::vector<int> labels = {0, 1, 0};
    Rng pick(5);
    gradient_check(net, x, labels, 40, pick);
}

TEST_CASE("gradient check: 1-d conv branch") {
    Rng data(3);
    Tensor x = random_input({2, 3, 16}, data);
    struct Reshape : Layer {
        std::vector<int> in_shape;
        Tensor forward(const Tensor& t, bool, Rng&) override {
            in_shape = t.shape;
            Tensor out = t;
            out.shape = {t.dim(0), static_cast<int>(t.size()) / t.dim(0)};
            return out;
        }
        Tensor backward(const Tensor& dy) override {
            Tensor dx = dy;
            dx.shape = in_shape;
            return dx;
        }
    };
    Sequential full;
    Rng init2(11);
    full.add(std::make_unique<Conv1D>(3, 5, 3, 1, init2));
    full.add(std::make_unique<ReLU>());
    full.add(std::make_unique<MaxPool1D>());
    full.add(std::make_unique<Conv1D>(5, 4, 3, 1, init2));
    full.add(std::make_unique<ReLU>());
    full.add(std::make_unique<MaxPool1D>());
    full.add(std::make_unique<Reshape>());
    full.add(std::make_unique<Dense>(4 * 4, 2, init2));

    std::vector<int> labels = {1, 0};
    Rng pick(9);
    gradient_check(full, x, labels, 30, pick);
}

TEST_CASE("softmax cross-entropy probabilities sum to one") {
    Tensor logits({2, 2});
    logits.v = {3.0, -1.0, 0.5, 0.5};
    SoftmaxLoss loss = softmax_cross_entropy(logits, {0, 1});
    CHECK(loss.probs.v[0] + loss.probs.v[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(loss.probs.v[2] + loss.probs.v[3] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(loss.loss > 0.0);
}

TEST_CASE("dropout is identity in inference mode and rescales in training") {
    Dropout drop(0.5);
    Tensor x({1, 100});
    for (std::size_t i = 0; i < x.size(); ++i) x.v[i] = 1.0;
    Rng rng(3);
    Tensor eval_out = drop.forward(x, false, rng);
    CHECK(eval_out.v == x.v);
    Tensor train_out = drop.forward(x, true, rng);
    int zeros = 0;
    for (double v : train_out.v) {
        if (v == 0.0) ++zeros;
        else CHECK(v == doctest::Approx(2.0));
    }
    CHECK(zeros > 10);
    CHECK(zeros < 90);
}

TEST_CASE("stratified batches contain every class") {
    Rng rng(17);
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) labels.push_back(i < 44 ? 0 : 1);  // imbalanced
    auto batches = make_batches(50, labels, 8, true, rng);
    int total = 0;
    for (const auto& batch : batches) {
        total += static_cast<int>(batch.size());
        if (batch.size() == 8) {
            bool has0 = false, has1 = false;
            for (int i : batch) (labels[i] == 1 ? has1 : has0) = true;
            CHECK(has0);
            CHECK(has1);
        }
    }
    CHECK(total == 50);

    // unstratified covers every sample exactly once
    auto plain = make_batches(50, labels, 8, false, rng);
    std::vector<int> seen(50, 0);
    for (const auto& batch : plain) {
        for (int i : batch) seen[i] += 1;
    }
    for (int s : seen) CHECK(s == 1);
}

namespace {

// One-parameter toy model for exercising the training loop.
struct ToyState {
    Tensor w{std::vector<int>{1}};
    Tensor g{std::vector<int>{1}};
    std::vector<double> scripted_val_losses;
    int eval_calls = 0;

    std::vector<ParamRef> params() { return {{"w", &w, &g}}; }
};

}  // namespace

TEST_CASE("training loop: early stopping on scripted validation losses") {
    ToyState toy;
    toy.scripted_val_losses = {1.0, 0.9, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8};

    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.early_stop = EarlyStopMonitor::validation_loss;
    cfg.early_stop_patience = 10;
    cfg.early_stop_tolerance = 0.001;
    cfg.seed = 1;

    TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>&, Rng&) {
        toy.g.v[0] = 0.1;
        return 0.5;
    };
    hooks.evaluate = [&](const std::vector<int>&) {
        double loss = toy.eval_calls < static_cast<int>(toy.scripted_val_losses.size())
                          ? toy.scripted_val_losses[toy.eval_calls]
                          : 0.8;
        toy.eval_calls += 1;
        return std::make_pair(loss, 0.5);
    };
    std::vector<int> labels(8, 0);
    TrainLog log = train_classifier(cfg, 8, labels, {0, 1}, toy.params(), hooks);
    CHECK(log.early_stopped);
    // best at epoch 3 (loss 0.8); patience 10 more epochs -> stop at epoch 13
    CHECK(log.epochs.size() == 13);
}

TEST_CASE("training loop: weight averaging window and fallbacks") {
    // swa_start beyond the final epoch leaves last-epoch weights in place
    ToyState toy;
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 2;
    cfg.swa_start_epoch = 99;
    cfg.seed = 3;
    cfg.learning_rate = 1.0;
    cfg.optimizer = OptimizerKind::momentum_sgd;

    TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>&, Rng&) {
        toy.g.v[0] = 1.0;  // constant slope: deterministic trajectory
        return 1.0;
    };
    hooks.evaluate = [&](const std::vector<int>&) { return std::make_pair(1.0, 0.5); };
    std::vector<int> labels(4, 0);
    TrainLog log = train_classifier(cfg, 4, labels, {}, toy.params(), hooks);
    CHECK_FALSE(log.swa_applied);
    double without_swa = toy.w.v[0];

    // averaging from epoch 2 ends at the running mean of epochs 2..4
    ToyState toy2;
    cfg.swa_start_epoch = 2;
    TrainLog log2 = train_classifier(cfg, 4, labels, {}, toy2.params(), hooks);
    CHECK(log2.swa_applied);
    CHECK(toy2.w.v[0] != without_swa);

    // fine-tune with zero epochs leaves weights untouched
    ToyState toy3;
    cfg.swa_start_epoch = 0;
    cfg.fine_tune_epochs = 0;
    cfg.fine_tune_learning_rate = 0.1;
    train_classifier(cfg, 4, labels, {}, toy3.params(), hooks);
    CHECK(toy3.w.v[0] == without_swa);
}

TEST_CASE("training loop: non-finite loss aborts with diagnostics") {
    ToyState toy;
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 5;
    TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>&, Rng&) {
        return std::numeric_limits<double>::quiet_NaN();
    };
    hooks.evaluate = [&](const std::vector<int>&) { return std::make_pair(1.0, 0.5); };
    std::vector<int> labels(4, 0);
    CHECK_THROWS_WITH(train_classifier(cfg, 4, labels, {}, toy.params(), hooks),
                      doctest::Contains("non-finite"));
}

TEST_CASE("optimizers are deterministic under a fixed seed") {
    auto run = [](std::uint64_t seed) {
        Rng init(seed);
        Sequential net;
        net.add(std::make_unique<Dense>(4, 8, init));
        net.add(std::make_unique<ReLU>());
        net.add(std::make_unique<Dense>(8, 2, init));
        std::vector<ParamRef> params;
        net.collect_params("n", params);

        Rng data(99);
        Tensor x = random_input({16, 4}, data);
        std::vector<int> labels;
        for (int i = 0; i < 16; ++i) labels.push_back(i % 2);

        TrainConfig cfg;
        cfg.epochs = 5;
        cfg.batch_size = 4;
        cfg.seed = 1234;
        TrainHooks hooks;
        hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) {
            Tensor batch({static_cast<int>(idx.size()), 4});
            std::vector<int> bl;
            for (std::size_t i = 0; i < idx.size(); ++i) {
                std::copy(x.v.begin() + idx[i] * 4, x.v.begin() + idx[i] * 4 + 4,
                          batch.v.begin() + i * 4);
                bl.push_back(labels[idx[i]]);
            }
            Tensor logits = net.forward(batch, true, rng);
            SoftmaxLoss loss = softmax_cross_entropy(logits, bl);
            net.backward(loss.dlogits);
            return loss.loss;
        };
        hooks.evaluate = [&](const std::vector<int>&) { return std::make_pair(0.0, 0.5); };
        TrainLog log = train_classifier(cfg, 16, labels, {}, params, hooks);
        std::vector<double> losses;
        for (const auto& e : log.epochs) losses.push_back(e.train_loss);
        return losses;
    };
    CHECK(run(4) == run(4));
    CHECK(run(4) != run(5));
}

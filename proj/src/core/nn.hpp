#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "core/rng.hpp"

namespace mf::nn {

// Dense row-major tensor, double precision throughout: gradient checks stay
// clean and training trajectories are bit-stable under a fixed seed.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        v.assign(n, 0.0);
    }

    std::size_t size() const { return v.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }
};

struct ParamRef {
    std::string name;
    Tensor* value = nullptr;
    Tensor* grad = nullptr;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, bool train, Rng& rng) = 0;
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) { (void)prefix; (void)out; }
};

// conv weights (out_ch, in_ch, k, k); im2col + GEMM.
class Conv2D : public Layer {
public:
    Conv2D(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& init_rng);
    Conv2D(int in_ch, int out_ch, int kernel, int stride, int pad, Rng&& init_rng)
        : Conv2D(in_ch, out_ch, kernel, stride, pad, init_rng) {}
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

    Tensor weight, bias, grad_weight, grad_bias;
    int in_ch, out_ch, kernel, stride, pad;

private:
    Tensor input_;
    int out_h_ = 0, out_w_ = 0;
};

// Per-channel k x k convolution; weights (ch, k, k).
class DepthwiseConv2D : public Layer {
public:
    DepthwiseConv2D(int channels, int kernel, int stride, int pad, Rng& init_rng);
    DepthwiseConv2D(int channels, int kernel, int stride, int pad, Rng&& init_rng)
        : DepthwiseConv2D(channels, kernel, stride, pad, init_rng) {}
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

    Tensor weight, bias, grad_weight, grad_bias;
    int channels, kernel, stride, pad;

private:
    Tensor input_;
    int out_h_ = 0, out_w_ = 0;
};

class Dense : public Layer {
public:
    Dense(int in_dim, int out_dim, Rng& init_rng);
    Dense(int in_dim, int out_dim, Rng&& init_rng) : Dense(in_dim, out_dim, init_rng) {}
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

    Tensor weight, bias, grad_weight, grad_bias;  // weight (out, in)
    int in_dim, out_dim;

private:
    Tensor input_;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;

private:
    std::vector<bool> active_;
};

// (N, C, H, W) -> (N, C)
class GlobalAvgPool2D : public Layer {
public:
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;

private:
    std::vector<int> in_shape_;
};

class Dropout : public Layer {
public:
    explicit Dropout(double rate) : rate_(rate) {}
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;
    double rate() const { return rate_; }
    void set_rate(double r) { rate_ = r; }

private:
    double rate_;
    std::vector<double> mask_;
    bool train_pass_ = false;
};

// 1-D convolution along the last axis of (N, C, L); weights (out_ch, in_ch, k).
class Conv1D : public Layer {
public:
    Conv1D(int in_ch, int out_ch, int kernel, int pad, Rng& init_rng);
    Conv1D(int in_ch, int out_ch, int kernel, int pad, Rng&& init_rng)
        : Conv1D(in_ch, out_ch, kernel, pad, init_rng) {}
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;

    Tensor weight, bias, grad_weight, grad_bias;
    int in_ch, out_ch, kernel, pad;

private:
    Tensor input_;
    int out_len_ = 0;
};

// Max pooling of width 2 along the last axis of (N, C, L); trailing odd
// element is dropped.
class MaxPool1D : public Layer {
public:
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;

private:
    std::vector<int> in_shape_;
    std::vector<int> argmax_;
};

class Sequential : public Layer {
public:
    Sequential() = default;
    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
    Tensor forward(const Tensor& x, bool train, Rng& rng) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
    std::size_t size() const { return layers_.size(); }
    Layer& at(std::size_t i) { return *layers_[i]; }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Losses

struct SoftmaxLoss {
    double loss = 0.0;
    Tensor probs;    // (N, K)
    Tensor dlogits;  // mean-reduced gradient
};

SoftmaxLoss softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Elementwise smooth-L1 (Huber, beta = 1); returns mean-reduced loss over the
// leading dimension count given by `normalizer`.
double smooth_l1(const Tensor& pred, const Tensor& target, Tensor& grad, double normalizer);

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(std::vector<ParamRef>& params) = 0;
    double learning_rate = 1e-3;
};

class Adam : public Optimizer {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(std::vector<ParamRef>& params) override;

private:
    double beta1_, beta2_, eps_;
    long long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

class MomentumSgd : public Optimizer {
public:
    explicit MomentumSgd(double lr, double momentum = 0.9);
    void step(std::vector<ParamRef>& params) override;

private:
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

void zero_grads(std::vector<ParamRef>& params);

// Uniform running average of weights, accumulated once per epoch from the
// configured start epoch onward.
class WeightAverager {
public:
    void accumulate(const std::vector<ParamRef>& params);
    bool apply(std::vector<ParamRef>& params) const;  // false if nothing accumulated
    int count() const { return count_; }

private:
    std::vector<std::vector<double>> avg_;
    int count_ = 0;
};

std::vector<double> snapshot_params(const std::vector<ParamRef>& params);
void restore_params(std::vector<ParamRef>& params, const std::vector<double>& snapshot);

// ---------------------------------------------------------------------------
// Training loop

enum class OptimizerKind { adaptive_moment, momentum_sgd };
enum class EarlyStopMonitor { none, validation_loss, validation_auc };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adaptive_moment;
    double learning_rate = 1e-3;
    double plateau_factor = 0.0;   // 0 disables the schedule
    int plateau_patience = 5;
    int epochs = 25;
    int batch_size = 16;
    EarlyStopMonitor early_stop = EarlyStopMonitor::none;
    int early_stop_patience = 10;
    double early_stop_tolerance = 0.001;
    int swa_start_epoch = 0;       // 1-based; 0 disables SWA
    bool stratified_batches = false;
    double fine_tune_learning_rate = 0.0;
    int fine_tune_epochs = 0;
    std::uint64_t seed = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auc = 0.5;
    double learning_rate = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    bool early_stopped = false;
    bool swa_applied = false;
    int fine_tune_epochs_run = 0;
};

struct TrainHooks {
    // Runs forward+backward on a batch of sample indices and returns the loss.
    // Gradients are zeroed by the loop before each call.
    std::function<double(const std::vector<int>&, Rng&)> run_batch;
    // Mean loss and AUC over a fixed index set (inference mode).
    std::function<std::pair<double, double>(const std::vector<int>&)> evaluate;
};

// Epoch-driven training shared by all classification heads: shuffled or
// class-stratified batches, plateau schedule, early stopping with best-weight
// restore, optional weight averaging and an optional fine-tune pass.
TrainLog train_classifier(const TrainConfig& cfg, int train_count, const std::vector<int>& train_labels,
                          const std::vector<int>& val_indices, std::vector<ParamRef> params,
                          const TrainHooks& hooks);

// Batches for one epoch. With stratification every full batch contains at
// least one sample of each class present.
std::vector<std::vector<int>> make_batches(int count, const std::vector<int>& labels, int batch_size,
                                           bool stratified, Rng& rng);

double he_scale(int fan_in);

}  // namespace mf::nn

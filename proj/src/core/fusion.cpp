#include "core/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "core/errors.hpp"
#include "core/evalkit.hpp"
#include "core/strutil.hpp"

namespace mf {

void FusionConfig::validate() const {
    if (n < 1 || n > 5) throw ConfigError("fusion n must lie in {1..5}");
}

std::string FusionLayout::describe(FusionTarget target) const {
    std::string out = "target=" + to_string(target);
    out += ";n=" + std::to_string(n);
    out += ";density=" + std::string(density_slot ? "1" : "0");
    out += ";views=L-CC,L-MLO,R-CC,R-MLO;slots=confidence_desc;pad=trailing_zero";
    return out;
}

std::vector<const Detection*> retained_detections(const std::vector<Detection>& detections,
                                                  const FusionConfig& cfg) {
    std::vector<const Detection*> kept;
    for (const Detection& d : detections) {
        if (cfg.target == FusionTarget::malignancy && !is_malignant_class(d.cls)) continue;
        kept.push_back(&d);
        if (static_cast<int>(kept.size()) == cfg.n) break;
    }
    return kept;
}

FusionVector build_score_vector(const FusionInputs& inputs, const FusionConfig& cfg) {
    cfg.validate();
    if (cfg.include_density && !inputs.p_density.has_value()) {
        throw DataError("fusion configured with a density slot but no density score present");
    }
    FusionVector w;
    w.layout.density_slot = cfg.include_density;
    w.layout.n = cfg.n;
    w.values.reserve(static_cast<std::size_t>(w.layout.score_size()));
    if (cfg.include_density) w.values.push_back(*inputs.p_density);
    for (int v = 0; v < kNumViews; ++v) w.values.push_back(inputs.p_findings[v]);
    for (int v = 0; v < kNumViews; ++v) {
        auto kept = retained_detections(inputs.detections[v], cfg);
        for (const Detection* d : kept) w.values.push_back(d->confidence);
        for (int pad = static_cast<int>(kept.size()); pad < cfg.n; ++pad) w.values.push_back(0.0);
    }
    return w;
}

std::vector<double> FeatureBundle::flatten() const {
    std::vector<double> flat;
    if (density_branch) flat.insert(flat.end(), density_branch->begin(), density_branch->end());
    for (const auto& f : findings_branches) flat.insert(flat.end(), f.begin(), f.end());
    for (const auto& f : localizer_branches) flat.insert(flat.end(), f.begin(), f.end());
    return flat;
}

FeatureBundle FeatureBundle::unflatten(const std::vector<double>& flat, const FusionLayout& layout,
                                       int feature_width) {
    FeatureBundle b;
    b.layout = layout;
    b.feature_width = feature_width;
    std::size_t fw = static_cast<std::size_t>(feature_width);
    std::size_t expected = (layout.density_slot ? kNumViews * fw : 0) + kNumViews * fw +
                           static_cast<std::size_t>(kNumViews) * layout.n * fw;
    if (flat.size() != expected) throw DataError("feature bundle has unexpected length");
    std::size_t pos = 0;
    if (layout.density_slot) {
        b.density_branch = std::vector<double>(flat.begin(), flat.begin() + kNumViews * fw);
        pos += kNumViews * fw;
    }
    for (int v = 0; v < kNumViews; ++v) {
        b.findings_branches[v].assign(flat.begin() + pos, flat.begin() + pos + fw);
        pos += fw;
    }
    for (int s = 0; s < kNumViews * layout.n; ++s) {
        b.localizer_branches.emplace_back(flat.begin() + pos, flat.begin() + pos + fw);
        pos += fw;
    }
    b.presence.assign(b.localizer_branches.size(), false);
    return b;
}

FeatureBundle build_feature_bundle(const FusionInputs& inputs, const FusionConfig& cfg,
                                   int feature_width) {
    cfg.validate();
    FeatureBundle b;
    b.layout.density_slot = cfg.include_density;
    b.layout.n = cfg.n;
    b.feature_width = feature_width;
    auto check = [&](const std::vector<double>& f, const std::string& branch, int expected) {
        if (static_cast<int>(f.size()) != expected) {
            throw DataError("feature length mismatch in " + branch + " branch: expected " +
                            std::to_string(expected) + ", got " + std::to_string(f.size()));
        }
    };
    if (cfg.include_density) {
        if (!inputs.density_feature) throw DataError("fusion configured with a density branch but no density feature present");
        check(*inputs.density_feature, "density", kNumViews * feature_width);
        b.density_branch = *inputs.density_feature;
    }
    for (int v = 0; v < kNumViews; ++v) {
        check(inputs.findings_features[v], "findings", feature_width);
        b.findings_branches[v] = inputs.findings_features[v];
    }
    for (int v = 0; v < kNumViews; ++v) {
        check(inputs.background_features[v], "localizer background", feature_width);
        auto kept = retained_detections(inputs.detections[v], cfg);
        for (const Detection* d : kept) {
            check(d->feature, "localizer detection", feature_width);
            b.localizer_branches.push_back(d->feature);
            b.presence.push_back(true);
        }
        for (int pad = static_cast<int>(kept.size()); pad < cfg.n; ++pad) {
            b.localizer_branches.push_back(inputs.background_features[v]);
            b.presence.push_back(false);
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer Normalizer::fit(const std::vector<std::vector<double>>& training_vectors) {
    if (training_vectors.empty()) throw DataError("normalizer fit requires at least one vector");
    Normalizer n;
    n.min_ = training_vectors[0];
    n.max_ = training_vectors[0];
    for (const auto& v : training_vectors) {
        if (v.size() != n.min_.size()) throw DataError("normalizer fit: dimension mismatch");
        for (std::size_t i = 0; i < v.size(); ++i) {
            n.min_[i] = std::min(n.min_[i], v[i]);
            n.max_[i] = std::max(n.max_[i], v[i]);
        }
    }
    return n;
}

std::vector<double> Normalizer::apply(const std::vector<double>& v) const {
    if (v.size() != min_.size()) throw DataError("normalizer apply: dimension mismatch");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double span = max_[i] - min_[i];
        if (span <= 0.0) {
            out[i] = 0.0;
        } else {
            out[i] = std::clamp(2.0 * (v[i] - min_[i]) / span - 1.0, -1.0, 1.0);
        }
    }
    return out;
}

std::vector<double> Normalizer::pack() const {
    std::vector<double> blob;
    blob.push_back(static_cast<double>(min_.size()));
    blob.insert(blob.end(), min_.begin(), min_.end());
    blob.insert(blob.end(), max_.begin(), max_.end());
    return blob;
}

Normalizer Normalizer::unpack(const std::vector<double>& blob) {
    if (blob.empty()) throw DataError("malformed normalizer blob");
    auto dim = static_cast<std::size_t>(blob[0]);
    if (blob.size() != 1 + 2 * dim) throw DataError("malformed normalizer blob");
    Normalizer n;
    n.min_.assign(blob.begin() + 1, blob.begin() + 1 + dim);
    n.max_.assign(blob.begin() + 1 + dim, blob.end());
    return n;
}

// ---------------------------------------------------------------------------
// Score-fusion heads

namespace {

std::shared_ptr<nn::Sequential> build_mlp(int input_dim, const std::vector<int>& hidden,
                                          std::uint64_t seed) {
    auto net = std::make_shared<nn::Sequential>();
    Rng rng(seed);
    int prev = input_dim;
    for (int h : hidden) {
        net->add(std::make_unique<nn::Dense>(prev, h, rng));
        net->add(std::make_unique<nn::ReLU>());
        prev = h;
    }
    net->add(std::make_unique<nn::Dense>(prev, 2, rng));
    return net;
}

double mlp_predict(nn::Sequential& net, const std::vector<double>& x) {
    Rng rng(0);
    nn::Tensor in({1, static_cast<int>(x.size())});
    in.v = x;
    nn::Tensor logits = net.forward(in, false, rng);
    double z0 = logits.v[0], z1 = logits.v[1];
    double m = std::max(z0, z1);
    double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
    return e1 / (e0 + e1);
}

double validation_auc_of(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<ScoredSample> samples;
    samples.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        samples.push_back({std::to_string(i), scores[i], labels[i]});
    }
    bool has_pos = false, has_neg = false;
    for (int l : labels) (l == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) return 0.5;
    return roc_auc(samples).auc;
}

nn::TrainLog train_mlp(nn::Sequential& net, const std::vector<FusionVector>& train_vectors,
                       const std::vector<int>& train_labels,
                       const std::vector<FusionVector>& val_vectors,
                       const std::vector<int>& val_labels, std::uint64_t seed) {
    nn::TrainConfig cfg;
    cfg.optimizer = nn::OptimizerKind::adaptive_moment;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 200;
    cfg.batch_size = 16;
    cfg.early_stop = nn::EarlyStopMonitor::validation_loss;
    cfg.early_stop_patience = 15;
    cfg.early_stop_tolerance = 1e-4;
    cfg.seed = seed;

    int dim = static_cast<int>(train_vectors[0].values.size());
    auto gather = [&](const std::vector<FusionVector>& vecs, const std::vector<int>& idx) {
        nn::Tensor x({static_cast<int>(idx.size()), dim});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy(vecs[idx[i]].values.begin(), vecs[idx[i]].values.end(),
                      x.data() + i * static_cast<std::size_t>(dim));
        }
        return x;
    };

    std::vector<nn::ParamRef> params;
    net.collect_params("mlp", params);
    nn::TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) {
        std::vector<int> labels;
        for (int i : idx) labels.push_back(train_labels[i]);
        nn::Tensor logits = net.forward(gather(train_vectors, idx), true, rng);
        nn::SoftmaxLoss loss = nn::softmax_cross_entropy(logits, labels);
        net.backward(loss.dlogits);
        return loss.loss;
    };
    hooks.evaluate = [&](const std::vector<int>& idx) {
        Rng rng(0);
        std::vector<int> labels;
        for (int i : idx) labels.push_back(val_labels[i]);
        nn::Tensor logits = net.forward(gather(val_vectors, idx), false, rng);
        nn::SoftmaxLoss loss = nn::softmax_cross_entropy(logits, labels);
        std::vector<double> scores;
        for (std::size_t i = 0; i < idx.size(); ++i) scores.push_back(loss.probs.v[i * 2 + 1]);
        return std::make_pair(loss.loss, validation_auc_of(scores, labels));
    };

    std::vector<int> val_idx(val_vectors.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = static_cast<int>(i);
    return nn::train_classifier(cfg, static_cast<int>(train_vectors.size()), train_labels, val_idx,
                                params, hooks);
}

}  // namespace

double ScoreFusionHead::predict(const FusionVector& w) const {
    if (static_cast<int>(w.values.size()) != layout.score_size() || w.layout.n != layout.n ||
        w.layout.density_slot != layout.density_slot) {
        throw DataError("fusion vector layout does not match the trained head (" +
                        layout.describe(target) + ")");
    }
    switch (kind) {
        case ScoreHeadKind::mlp: return mlp_predict(*mlp, w.values);
        case ScoreHeadKind::svm_rbf: return svm.predict_probability(w.values);
        default: return forest.predict_probability(w.values);
    }
}

Checkpoint ScoreFusionHead::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "score_fusion_head";
    ckpt.config["kind"] = to_string(kind);
    ckpt.config["target"] = to_string(target);
    ckpt.config["layout.density"] = layout.density_slot ? "1" : "0";
    ckpt.config["layout.n"] = std::to_string(layout.n);
    ckpt.config["grid_choice"] = grid_choice;
    ckpt.config["input_dim"] = std::to_string(input_dim);
    if (kind == ScoreHeadKind::mlp) {
        std::string hs;
        for (int h : mlp_hidden) hs += (hs.empty() ? "" : ",") + std::to_string(h);
        ckpt.config["mlp_hidden"] = hs;
        std::vector<nn::ParamRef> params;
        mlp->collect_params("mlp", params);
        for (const auto& p : params) ckpt.put(p.name, p.value->shape, p.value->v);
    } else if (kind == ScoreHeadKind::svm_rbf) {
        auto blob = svm.pack();
        ckpt.put("svm", {static_cast<int>(blob.size())}, blob);
    } else {
        auto blob = forest.pack();
        ckpt.put("forest", {static_cast<int>(blob.size())}, blob);
    }
    return ckpt;
}

ScoreFusionHead ScoreFusionHead::from_checkpoint(const Checkpoint& ckpt) {
    ScoreFusionHead head;
    std::string kind = ckpt.config.at("kind");
    head.kind = kind == "mlp" ? ScoreHeadKind::mlp
                : kind == "svm_rbf" ? ScoreHeadKind::svm_rbf
                                    : ScoreHeadKind::random_forest;
    head.target = ckpt.config.at("target") == "lesion" ? FusionTarget::lesion : FusionTarget::malignancy;
    head.layout.density_slot = ckpt.config.at("layout.density") == "1";
    head.layout.n = static_cast<int>(parse_int(ckpt.config.at("layout.n"), "layout.n"));
    head.grid_choice = ckpt.config.count("grid_choice") ? ckpt.config.at("grid_choice") : "";
    head.input_dim = static_cast<int>(parse_int(ckpt.config.at("input_dim"), "input_dim"));
    if (head.kind == ScoreHeadKind::mlp) {
        head.mlp_hidden.clear();
        std::string hs = ckpt.config.at("mlp_hidden");
        if (!hs.empty()) {
            for (const auto& part : split(hs, ',')) {
                head.mlp_hidden.push_back(static_cast<int>(parse_int(trim(part), "mlp_hidden")));
            }
        }
        head.mlp = build_mlp(head.input_dim, head.mlp_hidden, 0);
        std::vector<nn::ParamRef> params;
        head.mlp->collect_params("mlp", params);
        for (auto& p : params) {
            p.value->v = ckpt.get(p.name);
        }
    } else if (head.kind == ScoreHeadKind::svm_rbf) {
        head.svm = SvmRbf::unpack(ckpt.get("svm"));
    } else {
        head.forest = RandomForest::unpack(ckpt.get("forest"));
    }
    return head;
}

ScoreFusionTraining train_score_fusion(const std::vector<FusionVector>& train_vectors,
                                       const std::vector<int>& train_labels,
                                       const std::vector<FusionVector>& val_vectors,
                                       const std::vector<int>& val_labels, ScoreHeadKind kind,
                                       std::uint64_t seed) {
    if (train_vectors.empty() || val_vectors.empty()) throw DataError("empty fusion training data");
    bool has_pos = false, has_neg = false;
    for (int l : train_labels) (l == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DataError("score fusion requires both classes in training labels");
    const FusionLayout layout = train_vectors[0].layout;
    for (const auto& v : train_vectors) {
        if (v.layout.n != layout.n || v.layout.density_slot != layout.density_slot) {
            throw DataError("fusion vectors disagree on layout");
        }
    }
    int dim = static_cast<int>(train_vectors[0].values.size());

    ScoreFusionTraining result;
    double best_auc = -1.0;

    auto consider = [&](ScoreFusionHead&& head, const std::string& description) {
        std::vector<double> scores;
        scores.reserve(val_vectors.size());
        for (const auto& v : val_vectors) scores.push_back(head.predict(v));
        double auc = validation_auc_of(scores, val_labels);
        result.grid_log.push_back({description, auc});
        if (auc > best_auc) {
            best_auc = auc;
            head.grid_choice = description;
            result.head = std::move(head);
        }
    };

    if (kind == ScoreHeadKind::mlp) {
        std::vector<std::vector<int>> hidden_grid = {{}, {dim}, {dim / 2}};
        for (const auto& hidden : hidden_grid) {
            ScoreFusionHead head;
            head.kind = kind;
            head.layout = layout;
            head.input_dim = dim;
            head.mlp_hidden = hidden;
            head.mlp = build_mlp(dim, hidden, seed);
            train_mlp(*head.mlp, train_vectors, train_labels, val_vectors, val_labels, seed);
            std::string desc = "mlp layers=[" + std::to_string(dim);
            for (int h : hidden) desc += "," + std::to_string(h);
            desc += ",2]";
            consider(std::move(head), desc);
        }
    } else if (kind == ScoreHeadKind::svm_rbf) {
        std::vector<std::vector<double>> x;
        for (const auto& v : train_vectors) x.push_back(v.values);
        for (double c : {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 500.0, 1000.0}) {
            ScoreFusionHead head;
            head.kind = kind;
            head.layout = layout;
            head.input_dim = dim;
            SvmRbf::Options opt;
            opt.C = c;
            opt.seed = seed;
            head.svm.fit(x, train_labels, opt);
            consider(std::move(head), "svm_rbf C=" + format_double(c));
        }
    } else {
        std::vector<std::vector<double>> x;
        for (const auto& v : train_vectors) x.push_back(v.values);
        for (int trees : {3, 5, 7, 10, 15, 20}) {
            ScoreFusionHead head;
            head.kind = kind;
            head.layout = layout;
            head.input_dim = dim;
            RandomForest::Options opt;
            opt.n_trees = trees;
            opt.seed = seed;
            head.forest.fit(x, train_labels, opt);
            consider(std::move(head), "random_forest trees=" + std::to_string(trees));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Embedding network

namespace {

void add_branch_blocks(nn::Sequential& branch, int in_ch, int mid_ch, int blocks, Rng& rng) {
    int prev = in_ch;
    for (int b = 0; b < blocks; ++b) {
        branch.add(std::make_unique<nn::Conv1D>(prev, mid_ch, 3, 1, rng));
        branch.add(std::make_unique<nn::ReLU>());
        branch.add(std::make_unique<nn::MaxPool1D>());
        prev = mid_ch;
    }
}

int pooled_length(int length, int blocks) {
    for (int b = 0; b < blocks; ++b) length /= 2;
    return length;
}

}  // namespace

EmbeddingNet::EmbeddingNet(const EmbeddingNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    Rng density_rng = rng.fork(rng_tag("density"));
    Rng findings_rng = rng.fork(rng_tag("findings"));
    Rng localizer_rng = rng.fork(rng_tag("localizer"));
    Rng head_rng = rng.fork(rng_tag("head"));

    if (cfg.include_density) add_branch_blocks(density_branch_, kNumViews, cfg.branch_channels, 2, density_rng);
    add_branch_blocks(findings_branch_, kNumViews, cfg.branch_channels, 2, findings_rng);
    add_branch_blocks(localizer_branch_, kNumViews * cfg.n, cfg.branch_channels, 3, localizer_rng);

    branch_flat_[0] = cfg.include_density ? cfg.branch_channels * pooled_length(cfg.feature_width, 2) : 0;
    branch_flat_[1] = cfg.branch_channels * pooled_length(cfg.feature_width, 2);
    branch_flat_[2] = cfg.branch_channels * pooled_length(cfg.feature_width, 3);

    int concat = branch_flat_[0] + branch_flat_[1] + branch_flat_[2];
    head_.add(std::make_unique<nn::Dense>(concat, cfg.head_hidden, head_rng));
    head_.add(std::make_unique<nn::ReLU>());
    head_.add(std::make_unique<nn::Dropout>(cfg.head_dropout));
    head_.add(std::make_unique<nn::Dense>(cfg.head_hidden, 2, head_rng));
}

nn::Tensor EmbeddingNet::branch_input(const std::vector<const FeatureBundle*>& batch, int which) const {
    int n = static_cast<int>(batch.size());
    int fw = cfg_.feature_width;
    int channels = which == 2 ? kNumViews * cfg_.n : kNumViews;
    nn::Tensor x({n, channels, fw});
    for (int i = 0; i < n; ++i) {
        const FeatureBundle& b = *batch[i];
        for (int c = 0; c < channels; ++c) {
            const double* src = nullptr;
            if (which == 0) {
                src = b.density_branch->data() + static_cast<std::size_t>(c) * fw;
            } else if (which == 1) {
                src = b.findings_branches[c].data();
            } else {
                src = b.localizer_branches[c].data();
            }
            std::copy(src, src + fw, x.data() + (static_cast<std::size_t>(i) * channels + c) * fw);
        }
    }
    return x;
}

nn::Tensor EmbeddingNet::forward(const std::vector<const FeatureBundle*>& batch, bool train, Rng& rng) {
    int n = static_cast<int>(batch.size());
    for (const auto* b : batch) {
        if (b->layout.n != cfg_.n || b->layout.density_slot != cfg_.include_density ||
            b->feature_width != cfg_.feature_width) {
            throw DataError("feature bundle layout does not match the embedding network");
        }
    }
    int concat = branch_flat_[0] + branch_flat_[1] + branch_flat_[2];
    nn::Tensor joined({n, concat});
    int offset = 0;
    auto run_branch = [&](nn::Sequential& branch, int which, int flat) {
        if (flat == 0) return;
        nn::Tensor y = branch.forward(branch_input(batch, which), train, rng);
        for (int i = 0; i < n; ++i) {
            std::copy(y.data() + static_cast<std::size_t>(i) * flat,
                      y.data() + static_cast<std::size_t>(i + 1) * flat,
                      joined.data() + static_cast<std::size_t>(i) * concat + offset);
        }
        offset += flat;
    };
    if (cfg_.include_density) run_branch(density_branch_, 0, branch_flat_[0]);
    run_branch(findings_branch_, 1, branch_flat_[1]);
    run_branch(localizer_branch_, 2, branch_flat_[2]);

    nn::Tensor activated = concat_relu_.forward(joined, train, rng);
    return head_.forward(activated, train, rng);
}

void EmbeddingNet::backward(const nn::Tensor& dlogits) {
    nn::Tensor djoined = concat_relu_.backward(head_.backward(dlogits));
    int n = djoined.dim(0);
    int concat = branch_flat_[0] + branch_flat_[1] + branch_flat_[2];
    int offset = 0;
    auto back_branch = [&](nn::Sequential& branch, int flat) {
        if (flat == 0) return;
        nn::Tensor dy({n, flat});
        // Restore the branch's pooled shape for its backward pass.
        for (int i = 0; i < n; ++i) {
            std::copy(djoined.data() + static_cast<std::size_t>(i) * concat + offset,
                      djoined.data() + static_cast<std::size_t>(i) * concat + offset + flat,
                      dy.data() + static_cast<std::size_t>(i) * flat);
        }
        dy.shape = {n, cfg_.branch_channels, flat / cfg_.branch_channels};
        branch.backward(dy);
        offset += flat;
    };
    if (cfg_.include_density) back_branch(density_branch_, branch_flat_[0]);
    back_branch(findings_branch_, branch_flat_[1]);
    back_branch(localizer_branch_, branch_flat_[2]);
}

std::vector<nn::ParamRef> EmbeddingNet::params() {
    std::vector<nn::ParamRef> out;
    if (cfg_.include_density) density_branch_.collect_params("density_branch", out);
    findings_branch_.collect_params("findings_branch", out);
    localizer_branch_.collect_params("localizer_branch", out);
    head_.collect_params("head", out);
    return out;
}

double EmbeddingNet::predict(const FeatureBundle& normalized_bundle) {
    Rng rng(0);
    nn::Tensor logits = forward({&normalized_bundle}, false, rng);
    double z0 = logits.v[0], z1 = logits.v[1];
    double m = std::max(z0, z1);
    double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
    return e1 / (e0 + e1);
}

Checkpoint EmbeddingNet::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "embedding_net";
    ckpt.config["feature_width"] = std::to_string(cfg_.feature_width);
    ckpt.config["n"] = std::to_string(cfg_.n);
    ckpt.config["include_density"] = cfg_.include_density ? "1" : "0";
    ckpt.config["branch_channels"] = std::to_string(cfg_.branch_channels);
    ckpt.config["head_hidden"] = std::to_string(cfg_.head_hidden);
    ckpt.config["head_dropout"] = format_double(cfg_.head_dropout);
    auto params = const_cast<EmbeddingNet*>(this)->params();
    for (const auto& p : params) ckpt.put(p.name, p.value->shape, p.value->v);
    return ckpt;
}

EmbeddingNet EmbeddingNet::from_checkpoint(const Checkpoint& ckpt) {
    EmbeddingNetConfig cfg;
    cfg.feature_width = static_cast<int>(parse_int(ckpt.config.at("feature_width"), "feature_width"));
    cfg.n = static_cast<int>(parse_int(ckpt.config.at("n"), "n"));
    cfg.include_density = ckpt.config.at("include_density") == "1";
    cfg.branch_channels = static_cast<int>(parse_int(ckpt.config.at("branch_channels"), "branch_channels"));
    cfg.head_hidden = static_cast<int>(parse_int(ckpt.config.at("head_hidden"), "head_hidden"));
    cfg.head_dropout = parse_double(ckpt.config.at("head_dropout"), "head_dropout");
    EmbeddingNet net(cfg, 0);
    auto params = net.params();
    for (auto& p : params) p.value->v = ckpt.get(p.name);
    return net;
}

FeatureFusionTraining train_feature_fusion(const std::vector<FeatureBundle>& train_bundles,
                                           const std::vector<int>& train_labels,
                                           const std::vector<FeatureBundle>& val_bundles,
                                           const std::vector<int>& val_labels,
                                           const EmbeddingNetConfig& net_cfg,
                                           const nn::TrainConfig& train_cfg) {
    if (train_bundles.empty() || val_bundles.empty()) throw DataError("empty fusion training data");
    bool has_pos = false, has_neg = false;
    for (int l : train_labels) (l == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DataError("feature fusion requires both classes in training labels");

    FeatureFusionTraining result;
    result.net = std::make_shared<EmbeddingNet>(net_cfg, train_cfg.seed);
    EmbeddingNet& net = *result.net;

    nn::TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) {
        std::vector<const FeatureBundle*> batch;
        std::vector<int> labels;
        for (int i : idx) {
            batch.push_back(&train_bundles[i]);
            labels.push_back(train_labels[i]);
        }
        nn::Tensor logits = net.forward(batch, true, rng);
        nn::SoftmaxLoss loss = nn::softmax_cross_entropy(logits, labels);
        net.backward(loss.dlogits);
        return loss.loss;
    };
    hooks.evaluate = [&](const std::vector<int>& idx) {
        Rng rng(0);
        std::vector<const FeatureBundle*> batch;
        std::vector<int> labels;
        for (int i : idx) {
            batch.push_back(&val_bundles[i]);
            labels.push_back(val_labels[i]);
        }
        nn::Tensor logits = net.forward(batch, false, rng);
        nn::SoftmaxLoss loss = nn::softmax_cross_entropy(logits, labels);
        std::vector<double> scores;
        for (std::size_t i = 0; i < idx.size(); ++i) scores.push_back(loss.probs.v[i * 2 + 1]);
        return std::make_pair(loss.loss, validation_auc_of(scores, labels));
    };

    std::vector<int> val_idx(val_bundles.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = static_cast<int>(i);
    result.log = nn::train_classifier(train_cfg, static_cast<int>(train_bundles.size()), train_labels,
                                      val_idx, net.params(), hooks);

    std::vector<double> scores;
    for (const auto& b : val_bundles) scores.push_back(net.predict(b));
    result.validation_auc = validation_auc_of(scores, val_labels);
    return result;
}

double ensemble_max(const FusionInputs& inputs, FusionTarget target) {
    if (target == FusionTarget::lesion) {
        double best = inputs.p_findings[0];
        for (int v = 1; v < kNumViews; ++v) best = std::max(best, inputs.p_findings[v]);
        return best;
    }
    double best = 0.0;  // no malignant detection anywhere scores 0
    for (int v = 0; v < kNumViews; ++v) {
        for (const Detection& d : inputs.detections[v]) {
            if (is_malignant_class(d.cls)) best = std::max(best, d.confidence);
        }
    }
    return best;
}

}  // namespace mf

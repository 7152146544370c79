#include "core/taskmodels.hpp"

#include <algorithm>
#include <cmath>

#include "core/errors.hpp"
#include "core/image.hpp"
#include "core/strutil.hpp"

namespace mf {

namespace {

constexpr int kDetectorClasses = kNumLesionClasses + 1;  // + background
constexpr int kBackgroundClass = kNumLesionClasses;

double input_scale(const PreprocessProfile& profile) {
    return profile.intensity_mode == IntensityMode::rescale_0_255 ? 1.0 / 255.0 : 1.0;
}

void save_backbone_config(Checkpoint& ckpt, const std::string& prefix, const BackboneConfig& cfg) {
    ckpt.config[prefix + ".stem_channels"] = std::to_string(cfg.stem_channels);
    std::string stages;
    for (int c : cfg.stage_channels) stages += (stages.empty() ? "" : ",") + std::to_string(c);
    ckpt.config[prefix + ".stage_channels"] = stages;
    ckpt.config[prefix + ".feature_width"] = std::to_string(cfg.feature_width);
    ckpt.config[prefix + ".target_height"] = std::to_string(cfg.input_profile.target_height);
    ckpt.config[prefix + ".target_width"] = std::to_string(cfg.input_profile.target_width);
    ckpt.config[prefix + ".intensity_mode"] = std::to_string(static_cast<int>(cfg.input_profile.intensity_mode));
    ckpt.config[prefix + ".scale_factor"] = format_double(cfg.input_profile.scale_factor);
}

BackboneConfig load_backbone_config(const Checkpoint& ckpt, const std::string& prefix) {
    BackboneConfig cfg;
    auto get = [&](const std::string& key) {
        auto it = ckpt.config.find(prefix + "." + key);
        if (it == ckpt.config.end()) throw DataError("checkpoint missing config key " + prefix + "." + key);
        return it->second;
    };
    cfg.stem_channels = static_cast<int>(parse_int(get("stem_channels"), "stem_channels"));
    cfg.stage_channels.clear();
    for (const auto& part : split(get("stage_channels"), ',')) {
        cfg.stage_channels.push_back(static_cast<int>(parse_int(trim(part), "stage_channels")));
    }
    cfg.feature_width = static_cast<int>(parse_int(get("feature_width"), "feature_width"));
    cfg.input_profile.target_height = static_cast<int>(parse_int(get("target_height"), "target_height"));
    cfg.input_profile.target_width = static_cast<int>(parse_int(get("target_width"), "target_width"));
    cfg.input_profile.intensity_mode =
        static_cast<IntensityMode>(parse_int(get("intensity_mode"), "intensity_mode"));
    cfg.input_profile.scale_factor = parse_double(get("scale_factor"), "scale_factor");
    return cfg;
}

void save_params(Checkpoint& ckpt, std::vector<nn::ParamRef> params) {
    for (const auto& p : params) ckpt.put(p.name, p.value->shape, p.value->v);
}

void load_params(const Checkpoint& ckpt, std::vector<nn::ParamRef> params) {
    for (auto& p : params) {
        const auto& data = ckpt.get(p.name);
        if (ckpt.shape(p.name) != p.value->shape) {
            throw DataError("checkpoint array '" + p.name + "' has incompatible shape");
        }
        p.value->v = data;
    }
}

void copy_params(std::vector<nn::ParamRef> dst, std::vector<nn::ParamRef> src,
                 const std::string& dst_prefix, const std::string& src_prefix) {
    for (auto& d : dst) {
        std::string suffix = d.name.substr(dst_prefix.size());
        for (const auto& s : src) {
            if (s.name.substr(src_prefix.size()) == suffix) {
                if (s.value->shape != d.value->shape) {
                    throw DataError("weight transfer shape mismatch at " + d.name);
                }
                d.value->v = s.value->v;
                break;
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(const BackboneConfig& cfg, Rng init_rng) : cfg_(cfg) {
    int prev = cfg.stem_channels;
    trunk_.add(std::make_unique<nn::Conv2D>(1, prev, 3, 2, 1, init_rng));
    trunk_.add(std::make_unique<nn::ReLU>());
    for (int ch : cfg.stage_channels) {
        trunk_.add(std::make_unique<nn::DepthwiseConv2D>(prev, 3, 2, 1, init_rng));
        trunk_.add(std::make_unique<nn::ReLU>());
        trunk_.add(std::make_unique<nn::Conv2D>(prev, ch, 1, 1, 0, init_rng));
        trunk_.add(std::make_unique<nn::ReLU>());
        prev = ch;
    }
    trunk_.add(std::make_unique<nn::Conv2D>(prev, cfg.feature_width, 1, 1, 0, init_rng));
    trunk_.add(std::make_unique<nn::ReLU>());
}

nn::Tensor Backbone::forward_map(const nn::Tensor& x, bool train, Rng& rng) {
    return trunk_.forward(x, train, rng);
}

nn::Tensor Backbone::backward_map(const nn::Tensor& dmap) {
    return trunk_.backward(dmap);
}

nn::Tensor Backbone::forward_features(const nn::Tensor& x, bool train, Rng& rng) {
    return gap_.forward(trunk_.forward(x, train, rng), train, rng);
}

nn::Tensor Backbone::backward_features(const nn::Tensor& dfeat) {
    return trunk_.backward(gap_.backward(dfeat));
}

void Backbone::collect_params(const std::string& prefix, std::vector<nn::ParamRef>& out) {
    trunk_.collect_params(prefix, out);
}

nn::Tensor batch_tensor(const std::vector<const Image*>& images, double scale) {
    if (images.empty()) throw DataError("empty batch");
    int h = images[0]->height, w = images[0]->width;
    nn::Tensor x({static_cast<int>(images.size()), 1, h, w});
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->height != h || images[i]->width != w) {
            throw DataError("batch images disagree in size");
        }
        double* dst = x.data() + i * static_cast<std::size_t>(h) * w;
        for (std::size_t p = 0; p < images[i]->size(); ++p) dst[p] = images[i]->pix[p] * scale;
    }
    return x;
}

// ---------------------------------------------------------------------------
// DensityViewModel

DensityViewModel::DensityViewModel(const BackboneConfig& cfg, std::uint64_t seed)
    : backbone(cfg, Rng(seed).fork(rng_tag("backbone"))),
      dropout(0.001),
      head(cfg.feature_width, 2, Rng(seed).fork(rng_tag("head"))) {}

DensityViewModel::Output DensityViewModel::forward(const nn::Tensor& x, bool train, Rng& rng) {
    Output out;
    out.features = backbone.forward_features(x, train, rng);
    out.logits = head.forward(dropout.forward(out.features, train, rng), train, rng);
    return out;
}

void DensityViewModel::backward(const nn::Tensor& dlogits) {
    backbone.backward_features(dropout.backward(head.backward(dlogits)));
}

std::vector<nn::ParamRef> DensityViewModel::params() {
    std::vector<nn::ParamRef> out;
    backbone.collect_params("backbone", out);
    head.collect_params("head", out);
    return out;
}

Checkpoint DensityViewModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "density_view";
    save_backbone_config(ckpt, "backbone_config", backbone.config());
    save_params(ckpt, const_cast<DensityViewModel*>(this)->params());
    return ckpt;
}

DensityViewModel DensityViewModel::from_checkpoint(const Checkpoint& ckpt) {
    DensityViewModel model(load_backbone_config(ckpt, "backbone_config"), 0);
    load_params(ckpt, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// DensityPatientModel

DensityPatientModel::DensityPatientModel(const BackboneConfig& cfg, std::uint64_t seed)
    : head(cfg.feature_width * kNumViews, 2, Rng(seed).fork(rng_tag("head"))), branch_config(cfg) {
    for (int v = 0; v < kNumViews; ++v) {
        branches[v] = std::make_unique<Backbone>(cfg, Rng(seed).fork(rng_tag("branch"), v));
        branch_dropout[v] = std::make_unique<nn::Dropout>(0.5);
    }
}

DensityPatientModel::Output DensityPatientModel::forward(const std::array<nn::Tensor, kNumViews>& views,
                                                         bool train, Rng& rng) {
    int n = views[0].dim(0);
    int fw = branch_config.feature_width;
    Output out;
    out.features = nn::Tensor({n, fw * kNumViews});
    for (int v = 0; v < kNumViews; ++v) {
        nn::Tensor f = branch_dropout[v]->forward(branches[v]->forward_features(views[v], train, rng),
                                                  train, rng);
        for (int i = 0; i < n; ++i) {
            std::copy(f.data() + static_cast<std::size_t>(i) * fw,
                      f.data() + static_cast<std::size_t>(i + 1) * fw,
                      out.features.data() + (static_cast<std::size_t>(i) * kNumViews + v) * fw);
        }
    }
    out.logits = head.forward(out.features, train, rng);
    return out;
}

void DensityPatientModel::backward(const nn::Tensor& dlogits) {
    nn::Tensor dconcat = head.backward(dlogits);
    int n = dconcat.dim(0);
    int fw = branch_config.feature_width;
    for (int v = 0; v < kNumViews; ++v) {
        nn::Tensor df({n, fw});
        for (int i = 0; i < n; ++i) {
            std::copy(dconcat.data() + (static_cast<std::size_t>(i) * kNumViews + v) * fw,
                      dconcat.data() + (static_cast<std::size_t>(i) * kNumViews + v + 1) * fw,
                      df.data() + static_cast<std::size_t>(i) * fw);
        }
        branches[v]->backward_features(branch_dropout[v]->backward(df));
    }
}

std::vector<nn::ParamRef> DensityPatientModel::params() {
    std::vector<nn::ParamRef> out;
    for (int v = 0; v < kNumViews; ++v) {
        branches[v]->collect_params("branch" + std::to_string(v), out);
    }
    head.collect_params("head", out);
    return out;
}

void DensityPatientModel::init_branches_from(const DensityViewModel& view_model) {
    auto& vm = const_cast<DensityViewModel&>(view_model);
    std::vector<nn::ParamRef> src;
    vm.backbone.collect_params("src", src);
    for (int v = 0; v < kNumViews; ++v) {
        std::vector<nn::ParamRef> dst;
        branches[v]->collect_params("dst", dst);
        copy_params(dst, src, "dst", "src");
    }
}

Checkpoint DensityPatientModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "density_patient";
    save_backbone_config(ckpt, "backbone_config", branch_config);
    save_params(ckpt, const_cast<DensityPatientModel*>(this)->params());
    return ckpt;
}

DensityPatientModel DensityPatientModel::from_checkpoint(const Checkpoint& ckpt) {
    DensityPatientModel model(load_backbone_config(ckpt, "backbone_config"), 0);
    load_params(ckpt, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// PatchClassifier

PatchClassifier::PatchClassifier(const BackboneConfig& cfg, std::uint64_t seed)
    : backbone(cfg, Rng(seed).fork(rng_tag("backbone"))),
      head(cfg.feature_width, 2, Rng(seed).fork(rng_tag("head"))) {}

nn::Tensor PatchClassifier::forward(const nn::Tensor& x, bool train, Rng& rng) {
    return head.forward(backbone.forward_features(x, train, rng), train, rng);
}

void PatchClassifier::backward(const nn::Tensor& dlogits) {
    backbone.backward_features(head.backward(dlogits));
}

std::vector<nn::ParamRef> PatchClassifier::params() {
    std::vector<nn::ParamRef> out;
    backbone.collect_params("backbone", out);
    head.collect_params("head", out);
    return out;
}

Checkpoint PatchClassifier::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "patch";
    save_backbone_config(ckpt, "backbone_config", backbone.config());
    save_params(ckpt, const_cast<PatchClassifier*>(this)->params());
    return ckpt;
}

PatchClassifier PatchClassifier::from_checkpoint(const Checkpoint& ckpt) {
    PatchClassifier model(load_backbone_config(ckpt, "backbone_config"), 0);
    load_params(ckpt, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// FindingsModel

FindingsModel::FindingsModel(const BackboneConfig& cfg, std::uint64_t seed)
    : backbone(cfg, Rng(seed).fork(rng_tag("backbone"))),
      hidden(cfg.feature_width, cfg.feature_width, Rng(seed).fork(rng_tag("hidden"))),
      dropout(0.5),
      head(cfg.feature_width, 2, Rng(seed).fork(rng_tag("head"))) {}

FindingsModel::Output FindingsModel::forward(const nn::Tensor& x, bool train, Rng& rng) {
    Output out;
    out.features = backbone.forward_features(x, train, rng);
    nn::Tensor h = hidden_relu.forward(hidden.forward(out.features, train, rng), train, rng);
    out.logits = head.forward(dropout.forward(h, train, rng), train, rng);
    return out;
}

void FindingsModel::backward(const nn::Tensor& dlogits) {
    nn::Tensor dh = dropout.backward(head.backward(dlogits));
    backbone.backward_features(hidden.backward(hidden_relu.backward(dh)));
}

std::vector<nn::ParamRef> FindingsModel::params() {
    std::vector<nn::ParamRef> out;
    backbone.collect_params("backbone", out);
    hidden.collect_params("hidden", out);
    head.collect_params("head", out);
    return out;
}

void FindingsModel::init_backbone_from(const PatchClassifier& patch_model) {
    auto& pm = const_cast<PatchClassifier&>(patch_model);
    std::vector<nn::ParamRef> src, dst;
    pm.backbone.collect_params("src", src);
    backbone.collect_params("dst", dst);
    copy_params(dst, src, "dst", "src");
}

Checkpoint FindingsModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "findings";
    save_backbone_config(ckpt, "backbone_config", backbone.config());
    save_params(ckpt, const_cast<FindingsModel*>(this)->params());
    return ckpt;
}

FindingsModel FindingsModel::from_checkpoint(const Checkpoint& ckpt) {
    FindingsModel model(load_backbone_config(ckpt, "backbone_config"), 0);
    load_params(ckpt, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// Localizer

Localizer::Localizer(const LocalizerConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      trunk_(cfg.backbone, Rng(seed).fork(rng_tag("trunk"))),
      cls_head_(cfg.backbone.feature_width, cfg.anchors.per_cell() * kDetectorClasses, 1, 1, 0,
                Rng(seed).fork(rng_tag("cls"))),
      box_head_(cfg.backbone.feature_width, cfg.anchors.per_cell() * 4, 1, 1, 0,
                Rng(seed).fork(rng_tag("box"))) {}

std::vector<nn::ParamRef> Localizer::params() {
    std::vector<nn::ParamRef> out;
    trunk_.collect_params("trunk", out);
    cls_head_.collect_params("cls_head", out);
    box_head_.collect_params("box_head", out);
    return out;
}

std::vector<BBox> Localizer::anchor_boxes(int map_h, int map_w) const {
    std::vector<BBox> anchors;
    anchors.reserve(static_cast<std::size_t>(map_h) * map_w * cfg_.anchors.per_cell());
    double stride = cfg_.backbone.stride();
    for (int y = 0; y < map_h; ++y) {
        for (int x = 0; x < map_w; ++x) {
            double cx = (x + 0.5) * stride;
            double cy = (y + 0.5) * stride;
            for (double scale : cfg_.anchors.scales) {
                for (double aspect : cfg_.anchors.aspect_ratios) {
                    double h = scale * std::sqrt(aspect);
                    double w = scale / std::sqrt(aspect);
                    anchors.push_back(BBox{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
                }
            }
        }
    }
    return anchors;
}

namespace {

struct AnchorTargets {
    // class target per anchor: 0..3 lesion class, 4 background, -1 ignore
    std::vector<int> cls;
    std::vector<int> matched_gt;       // index into boxes, for positives
    std::vector<std::array<double, 4>> box_deltas;
};

std::array<double, 4> encode_box(const BBox& gt, const BBox& anchor) {
    double aw = anchor.width(), ah = anchor.height();
    return {(gt.center_x() - anchor.center_x()) / aw, (gt.center_y() - anchor.center_y()) / ah,
            std::log(gt.width() / aw), std::log(gt.height() / ah)};
}

BBox decode_box(const std::array<double, 4>& t, const BBox& anchor, int img_w, int img_h) {
    double aw = anchor.width(), ah = anchor.height();
    double cx = t[0] * aw + anchor.center_x();
    double cy = t[1] * ah + anchor.center_y();
    double w = std::exp(std::clamp(t[2], -4.0, 4.0)) * aw;
    double h = std::exp(std::clamp(t[3], -4.0, 4.0)) * ah;
    BBox b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(img_w));
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(img_w));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(img_h));
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(img_h));
    return b;
}

AnchorTargets assign_anchors(const std::vector<BBox>& anchors, const std::vector<BBox>& boxes,
                             const std::vector<LesionClass>& classes) {
    AnchorTargets t;
    t.cls.assign(anchors.size(), kBackgroundClass);
    t.matched_gt.assign(anchors.size(), -1);
    t.box_deltas.assign(anchors.size(), {0, 0, 0, 0});
    if (boxes.empty()) return t;

    std::vector<double> best_iou(anchors.size(), 0.0);
    std::vector<int> best_gt(anchors.size(), -1);
    std::vector<double> gt_best_iou(boxes.size(), -1.0);
    std::vector<int> gt_best_anchor(boxes.size(), -1);

    for (std::size_t a = 0; a < anchors.size(); ++a) {
        for (std::size_t g = 0; g < boxes.size(); ++g) {
            double v = iou(anchors[a], boxes[g]);
            if (v > best_iou[a]) {
                best_iou[a] = v;
                best_gt[a] = static_cast<int>(g);
            }
            if (v > gt_best_iou[g]) {
                gt_best_iou[g] = v;
                gt_best_anchor[g] = static_cast<int>(a);
            }
        }
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (best_iou[a] >= 0.5) {
            t.cls[a] = static_cast<int>(classes[best_gt[a]]);
            t.matched_gt[a] = best_gt[a];
        } else if (best_iou[a] >= 0.4) {
            t.cls[a] = -1;  // ignore band
        }
    }
    // Every ground truth owns its best-overlap anchor.
    for (std::size_t g = 0; g < boxes.size(); ++g) {
        int a = gt_best_anchor[g];
        if (a >= 0) {
            t.cls[a] = static_cast<int>(classes[g]);
            t.matched_gt[a] = static_cast<int>(g);
        }
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (t.matched_gt[a] >= 0) {
            t.box_deltas[a] = encode_box(boxes[t.matched_gt[a]], anchors[a]);
        }
    }
    return t;
}

}  // namespace

void sort_detections(std::vector<Detection>& detections) {
    std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        double aa = a.box.area(), ab = b.box.area();
        if (aa != ab) return aa > ab;
        if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
        return a.box.y_min < b.box.y_min;
    });
}

std::vector<Detection> nms_per_class(std::vector<Detection> detections, double iou_threshold) {
    sort_detections(detections);
    std::vector<Detection> kept;
    std::vector<bool> suppressed(detections.size(), false);
    for (std::size_t i = 0; i < detections.size(); ++i) {
        if (suppressed[i]) continue;
        kept.push_back(detections[i]);
        for (std::size_t j = i + 1; j < detections.size(); ++j) {
            if (suppressed[j] || detections[j].cls != detections[i].cls) continue;
            if (iou(detections[i].box, detections[j].box) > iou_threshold) suppressed[j] = true;
        }
    }
    return kept;
}

DetectionSet Localizer::detect(const Image& prepared, int max_detections) const {
    double scale = input_scale(cfg_.backbone.input_profile);
    nn::Tensor x = batch_tensor({&prepared}, scale);
    Rng rng(0);
    nn::Tensor map = trunk_.forward_map(x, false, rng);
    nn::Tensor cls = cls_head_.forward(map, false, rng);
    nn::Tensor box = box_head_.forward(map, false, rng);

    int mh = map.dim(2), mw = map.dim(3);
    int fw = cfg_.backbone.feature_width;
    int per_cell = cfg_.anchors.per_cell();
    std::vector<BBox> anchors = anchor_boxes(mh, mw);

    auto cls_at = [&](int a_local, int k, int y, int x_) {
        return cls.v[((static_cast<std::size_t>(a_local) * kDetectorClasses + k) * mh + y) * mw + x_];
    };
    auto box_at = [&](int a_local, int d, int y, int x_) {
        return box.v[((static_cast<std::size_t>(a_local) * 4 + d) * mh + y) * mw + x_];
    };

    std::vector<Detection> candidates;
    for (int y = 0; y < mh; ++y) {
        for (int x_ = 0; x_ < mw; ++x_) {
            for (int a = 0; a < per_cell; ++a) {
                double logits[kDetectorClasses];
                double zmax = -1e300;
                for (int k = 0; k < kDetectorClasses; ++k) {
                    logits[k] = cls_at(a, k, y, x_);
                    zmax = std::max(zmax, logits[k]);
                }
                double denom = 0.0;
                for (int k = 0; k < kDetectorClasses; ++k) denom += std::exp(logits[k] - zmax);
                std::size_t anchor_idx = (static_cast<std::size_t>(y) * mw + x_) * per_cell + a;
                for (int k = 0; k < kNumLesionClasses; ++k) {
                    double p = std::exp(logits[k] - zmax) / denom;
                    if (p < cfg_.score_threshold) continue;
                    std::array<double, 4> deltas = {box_at(a, 0, y, x_), box_at(a, 1, y, x_),
                                                    box_at(a, 2, y, x_), box_at(a, 3, y, x_)};
                    BBox decoded = decode_box(deltas, anchors[anchor_idx],
                                              cfg_.backbone.input_profile.target_width,
                                              cfg_.backbone.input_profile.target_height);
                    if (!decoded.valid()) continue;
                    Detection det;
                    det.box = decoded;
                    det.cls = static_cast<LesionClass>(k);
                    det.confidence = p;
                    candidates.push_back(det);
                }
            }
        }
    }

    std::vector<Detection> kept = nms_per_class(std::move(candidates), cfg_.nms_iou);
    sort_detections(kept);
    if (static_cast<int>(kept.size()) > max_detections) kept.resize(max_detections);

    // Pooled per-detection features plus the whole-map background feature.
    DetectionSet out;
    double stride = cfg_.backbone.stride();
    out.background_feature.assign(fw, 0.0);
    double inv_cells = 1.0 / (static_cast<double>(mh) * mw);
    for (int c = 0; c < fw; ++c) {
        const double* plane = map.data() + static_cast<std::size_t>(c) * mh * mw;
        double acc = 0.0;
        for (int p = 0; p < mh * mw; ++p) acc += plane[p];
        out.background_feature[c] = acc * inv_cells;
    }
    for (Detection& det : kept) {
        int x0 = std::clamp(static_cast<int>(std::floor(det.box.x_min / stride)), 0, mw - 1);
        int x1 = std::clamp(static_cast<int>(std::ceil(det.box.x_max / stride)), x0 + 1, mw);
        int y0 = std::clamp(static_cast<int>(std::floor(det.box.y_min / stride)), 0, mh - 1);
        int y1 = std::clamp(static_cast<int>(std::ceil(det.box.y_max / stride)), y0 + 1, mh);
        det.feature.assign(fw, 0.0);
        double inv = 1.0 / (static_cast<double>(y1 - y0) * (x1 - x0));
        for (int c = 0; c < fw; ++c) {
            const double* plane = map.data() + static_cast<std::size_t>(c) * mh * mw;
            double acc = 0.0;
            for (int yy = y0; yy < y1; ++yy) {
                for (int xx = x0; xx < x1; ++xx) acc += plane[yy * mw + xx];
            }
            det.feature[c] = acc * inv;
        }
        out.detections.push_back(std::move(det));
    }
    return out;
}

Localizer::TrainStats Localizer::train(const std::vector<TrainSample>& samples,
                                       const nn::TrainConfig& cfg, double box_jitter_ratio) {
    if (samples.empty()) throw DataError("localizer training requires annotated lesions");
    for (const auto& s : samples) {
        if (s.boxes.empty()) throw DataError("localizer training images must contain lesions");
    }

    AugmentationPolicy policy;
    policy.horizontal_flip = true;
    policy.rotation_degrees = {-15.0, 15.0};
    policy.crop_scale = {0.85, 1.0};
    policy.box_jitter_ratio = box_jitter_ratio;

    Rng rng(cfg.seed);
    Rng aug_rng = rng.fork(rng_tag("augment"));
    Rng order_rng = rng.fork(rng_tag("order"));
    Rng model_rng = rng.fork(rng_tag("model"));

    auto all_params = params();
    nn::MomentumSgd opt(cfg.learning_rate, 0.9);

    std::vector<int> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    order_rng.shuffle(order);
    std::size_t cursor = 0;

    double scale = input_scale(cfg_.backbone.input_profile);
    int iterations = cfg.epochs;  // iteration-based schedule
    int batch = std::max(1, cfg.batch_size);

    TrainStats stats;
    stats.iterations = iterations;
    double loss_acc = 0.0;
    int loss_n = 0;

    for (int it = 0; it < iterations; ++it) {
        nn::zero_grads(all_params);
        double batch_loss = 0.0;
        for (int b = 0; b < batch; ++b) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const TrainSample& sample = samples[order[cursor++]];

            AugmentResult aug = augment(sample.image, sample.boxes, policy, aug_rng);
            // Classes follow surviving boxes; augment preserves their order.
            std::vector<LesionClass> classes;
            if (aug.boxes.size() == sample.boxes.size()) {
                classes = sample.classes;
            } else {
                // Rare drop: re-run identity mapping to keep classes aligned.
                aug.image = sample.image;
                aug.boxes = sample.boxes;
                classes = sample.classes;
            }

            nn::Tensor x = batch_tensor({&aug.image}, scale);
            nn::Tensor map = trunk_.forward_map(x, true, model_rng);
            nn::Tensor cls = cls_head_.forward(map, true, model_rng);
            nn::Tensor box = box_head_.forward(map, true, model_rng);
            int mh = map.dim(2), mw = map.dim(3);
            int per_cell = cfg_.anchors.per_cell();
            std::vector<BBox> anchors = anchor_boxes(mh, mw);
            AnchorTargets targets = assign_anchors(anchors, aug.boxes, classes);

            // Gather positives and the hardest negatives by background score.
            std::vector<std::size_t> positive, negative;
            for (std::size_t a = 0; a < anchors.size(); ++a) {
                if (targets.cls[a] >= 0 && targets.cls[a] != kBackgroundClass) positive.push_back(a);
                else if (targets.cls[a] == kBackgroundClass) negative.push_back(a);
            }
            auto logits_of = [&](std::size_t anchor_idx, int k) {
                int cell = static_cast<int>(anchor_idx) / per_cell;
                int a_local = static_cast<int>(anchor_idx) % per_cell;
                int y = cell / mw, x_ = cell % mw;
                return cls.v[((static_cast<std::size_t>(a_local) * kDetectorClasses + k) * mh + y) * mw + x_];
            };
            auto background_margin = [&](std::size_t anchor_idx) {
                double bg = logits_of(anchor_idx, kBackgroundClass);
                double best = -1e300;
                for (int k = 0; k < kNumLesionClasses; ++k) best = std::max(best, logits_of(anchor_idx, k));
                return bg - best;  // low margin = hard negative
            };
            std::vector<std::pair<double, std::size_t>> neg_rank;
            neg_rank.reserve(negative.size());
            for (std::size_t a : negative) neg_rank.emplace_back(background_margin(a), a);
            std::size_t want_negatives = std::max<std::size_t>(8, 3 * positive.size());
            want_negatives = std::min(want_negatives, neg_rank.size());
            std::partial_sort(neg_rank.begin(), neg_rank.begin() + want_negatives, neg_rank.end());

            std::vector<std::size_t> selected = positive;
            for (std::size_t i = 0; i < want_negatives; ++i) selected.push_back(neg_rank[i].second);

            nn::Tensor sel_logits({static_cast<int>(selected.size()), kDetectorClasses});
            std::vector<int> sel_labels(selected.size());
            for (std::size_t i = 0; i < selected.size(); ++i) {
                for (int k = 0; k < kDetectorClasses; ++k) {
                    sel_logits.v[i * kDetectorClasses + k] = logits_of(selected[i], k);
                }
                sel_labels[i] = targets.cls[selected[i]];
            }
            nn::SoftmaxLoss cls_loss = nn::softmax_cross_entropy(sel_logits, sel_labels);

            // Box regression on positives.
            nn::Tensor pred_deltas({std::max(1, static_cast<int>(positive.size())), 4});
            nn::Tensor target_deltas(pred_deltas.shape);
            auto box_of = [&](std::size_t anchor_idx, int d) {
                int cell = static_cast<int>(anchor_idx) / per_cell;
                int a_local = static_cast<int>(anchor_idx) % per_cell;
                int y = cell / mw, x_ = cell % mw;
                return box.v[((static_cast<std::size_t>(a_local) * 4 + d) * mh + y) * mw + x_];
            };
            for (std::size_t i = 0; i < positive.size(); ++i) {
                for (int d = 0; d < 4; ++d) {
                    pred_deltas.v[i * 4 + d] = box_of(positive[i], d);
                    target_deltas.v[i * 4 + d] = targets.box_deltas[positive[i]][d];
                }
            }
            nn::Tensor dbox_sel;
            double box_loss = positive.empty()
                                  ? 0.0
                                  : nn::smooth_l1(pred_deltas, target_deltas, dbox_sel,
                                                  static_cast<double>(positive.size()));
            double sample_loss = cls_loss.loss + box_loss;
            batch_loss += sample_loss / batch;

            // Scatter gradients back into the head maps and run backward.
            nn::Tensor dcls(cls.shape);
            for (std::size_t i = 0; i < selected.size(); ++i) {
                int cell = static_cast<int>(selected[i]) / per_cell;
                int a_local = static_cast<int>(selected[i]) % per_cell;
                int y = cell / mw, x_ = cell % mw;
                for (int k = 0; k < kDetectorClasses; ++k) {
                    dcls.v[((static_cast<std::size_t>(a_local) * kDetectorClasses + k) * mh + y) * mw + x_] =
                        cls_loss.dlogits.v[i * kDetectorClasses + k] / batch;
                }
            }
            nn::Tensor dbox(box.shape);
            for (std::size_t i = 0; i < positive.size(); ++i) {
                int cell = static_cast<int>(positive[i]) / per_cell;
                int a_local = static_cast<int>(positive[i]) % per_cell;
                int y = cell / mw, x_ = cell % mw;
                for (int d = 0; d < 4; ++d) {
                    dbox.v[((static_cast<std::size_t>(a_local) * 4 + d) * mh + y) * mw + x_] =
                        dbox_sel.v[i * 4 + d] / batch;
                }
            }
            nn::Tensor dmap = cls_head_.backward(dcls);
            nn::Tensor dmap2 = box_head_.backward(dbox);
            for (std::size_t i = 0; i < dmap.size(); ++i) dmap.v[i] += dmap2.v[i];
            trunk_.backward_map(dmap);
        }
        if (!std::isfinite(batch_loss)) {
            throw DataError("non-finite localizer loss at iteration " + std::to_string(it));
        }
        opt.step(all_params);
        loss_acc += batch_loss;
        if (++loss_n == 50 || it + 1 == iterations) {
            stats.loss_per_log_interval.push_back(loss_acc / loss_n);
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
    return stats;
}

Checkpoint Localizer::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.config["model"] = "localizer";
    save_backbone_config(ckpt, "backbone_config", cfg_.backbone);
    std::string scales, aspects;
    for (double s : cfg_.anchors.scales) scales += (scales.empty() ? "" : ",") + format_double(s);
    for (double a : cfg_.anchors.aspect_ratios) aspects += (aspects.empty() ? "" : ",") + format_double(a);
    ckpt.config["anchors.scales"] = scales;
    ckpt.config["anchors.aspect_ratios"] = aspects;
    ckpt.config["score_threshold"] = format_double(cfg_.score_threshold);
    ckpt.config["nms_iou"] = format_double(cfg_.nms_iou);
    ckpt.config["max_detections"] = std::to_string(cfg_.max_detections);
    save_params(ckpt, const_cast<Localizer*>(this)->params());
    return ckpt;
}

Localizer Localizer::from_checkpoint(const Checkpoint& ckpt) {
    LocalizerConfig cfg;
    cfg.backbone = load_backbone_config(ckpt, "backbone_config");
    cfg.anchors.scales.clear();
    cfg.anchors.aspect_ratios.clear();
    for (const auto& part : split(ckpt.config.at("anchors.scales"), ',')) {
        cfg.anchors.scales.push_back(parse_double(trim(part), "anchors.scales"));
    }
    for (const auto& part : split(ckpt.config.at("anchors.aspect_ratios"), ',')) {
        cfg.anchors.aspect_ratios.push_back(parse_double(trim(part), "anchors.aspect_ratios"));
    }
    cfg.score_threshold = parse_double(ckpt.config.at("score_threshold"), "score_threshold");
    cfg.nms_iou = parse_double(ckpt.config.at("nms_iou"), "nms_iou");
    cfg.max_detections = static_cast<int>(parse_int(ckpt.config.at("max_detections"), "max_detections"));
    Localizer model(cfg, 0);
    load_params(ckpt, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// Classifier training wrappers

namespace {

double evaluate_auc_or_half(const std::vector<double>& scores, const std::vector<int>& labels);

struct SingleImageTrainer {
    const LabeledImageSet& train;
    const LabeledImageSet& val;
    const AugmentationPolicy& augmentation;
    double scale;
    Rng aug_rng;

    std::function<nn::Tensor(const nn::Tensor&, bool, Rng&)> forward_logits;
    std::function<void(const nn::Tensor&)> backward;

    double run_batch(const std::vector<int>& idx, Rng& rng) {
        std::vector<Image> augmented;
        augmented.reserve(idx.size());
        std::vector<const Image*> ptrs;
        std::vector<int> labels;
        for (int i : idx) {
            AugmentResult a = augment(train.images[i], {}, augmentation, aug_rng);
            augmented.push_back(std::move(a.image));
            labels.push_back(train.labels[i]);
        }
        for (const Image& img : augmented) ptrs.push_back(&img);
        nn::Tensor x = batch_tensor(ptrs, scale);
        nn::Tensor logits = forward_logits(x, true, rng);
        nn::SoftmaxLoss loss = nn::softmax_cross_entropy(logits, labels);
        backward(loss.dlogits);
        return loss.loss;
    }

    std::pair<double, double> evaluate(const std::vector<int>& idx) {
        Rng rng(0);
        double loss_sum = 0.0;
        std::vector<double> scores;
        std::vector<int> labels;
        constexpr int kChunk = 32;
        for (std::size_t start = 0; start < idx.size(); start += kChunk) {
            std::vector<const Image*> ptrs;
            std::vector<int> chunk_labels;
            for (std::size_t i = start; i < std::min(idx.size(), start + kChunk); ++i) {
                ptrs.push_back(&val.images[idx[i]]);
                chunk_labels.push_back(val.labels[idx[i]]);
            }
            nn::Tensor logits = forward_logits(batch_tensor(ptrs, scale), false, rng);
            nn::SoftmaxLoss loss = nn::softmax_cross_entropy(logits, chunk_labels);
            loss_sum += loss.loss * static_cast<double>(ptrs.size());
            for (std::size_t i = 0; i < ptrs.size(); ++i) {
                scores.push_back(loss.probs.v[i * 2 + 1]);
                labels.push_back(chunk_labels[i]);
            }
        }
        return {loss_sum / static_cast<double>(idx.size()), evaluate_auc_or_half(scores, labels)};
    }
};

}  // namespace

nn::TrainLog train_density_view(DensityViewModel& model, const LabeledImageSet& train,
                                const LabeledImageSet& val, const nn::TrainConfig& cfg,
                                const AugmentationPolicy& augmentation) {
    if (train.images.empty() || val.images.empty()) throw DataError("empty training or validation split");
    SingleImageTrainer trainer{train, val, augmentation, input_scale(model.backbone.config().input_profile),
                               Rng(cfg.seed).fork(rng_tag("aug")), {}, {}};
    trainer.forward_logits = [&](const nn::Tensor& x, bool t, Rng& r) { return model.forward(x, t, r).logits; };
    trainer.backward = [&](const nn::Tensor& d) { model.backward(d); };

    std::vector<int> val_idx(val.images.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = static_cast<int>(i);
    nn::TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) { return trainer.run_batch(idx, rng); };
    hooks.evaluate = [&](const std::vector<int>& idx) { return trainer.evaluate(idx); };
    return nn::train_classifier(cfg, static_cast<int>(train.images.size()), train.labels, val_idx,
                                model.params(), hooks);
}

nn::TrainLog train_patch_classifier(PatchClassifier& model, const LabeledImageSet& train,
                                    const LabeledImageSet& val, const nn::TrainConfig& cfg,
                                    const AugmentationPolicy& augmentation) {
    bool has_pos = false, has_neg = false;
    for (int l : train.labels) (l == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DataError("degenerate patch labels: need both classes");

    SingleImageTrainer trainer{train, val, augmentation, 1.0, Rng(cfg.seed).fork(rng_tag("aug")), {}, {}};
    trainer.forward_logits = [&](const nn::Tensor& x, bool t, Rng& r) { return model.forward(x, t, r); };
    trainer.backward = [&](const nn::Tensor& d) { model.backward(d); };

    std::vector<int> val_idx(val.images.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = static_cast<int>(i);
    nn::TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) { return trainer.run_batch(idx, rng); };
    hooks.evaluate = [&](const std::vector<int>& idx) { return trainer.evaluate(idx); };
    return nn::train_classifier(cfg, static_cast<int>(train.images.size()), train.labels, val_idx,
                                model.params(), hooks);
}

nn::TrainLog train_findings(FindingsModel& model, const LabeledImageSet& train,
                            const LabeledImageSet& val, const nn::TrainConfig& cfg,
                            const AugmentationPolicy& augmentation) {
    if (train.images.empty() || val.images.empty()) throw DataError("empty training or validation split");
    SingleImageTrainer trainer{train, val, augmentation, 1.0, Rng(cfg.seed).fork(rng_tag("aug")), {}, {}};
    trainer.forward_logits = [&](const nn::Tensor& x, bool t, Rng& r) { return model.forward(x, t, r).logits; };
    trainer.backward = [&](const nn::Tensor& d) { model.backward(d); };

    std::vector<int> val_idx(val.images.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = static_cast<int>(i);
    nn::TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) { return trainer.run_batch(idx, rng); };
    hooks.evaluate = [&](const std::vector<int>& idx) { return trainer.evaluate(idx); };
    return nn::train_classifier(cfg, static_cast<int>(train.images.size()), train.labels, val_idx,
                                model.params(), hooks);
}

nn::TrainLog train_density_patient(DensityPatientModel& model, const PatientDensitySet& train,
                                   const PatientDensitySet& val, const nn::TrainConfig& cfg,
                                   const AugmentationPolicy& augmentation) {
    if (train.cases.empty() || val.cases.empty()) throw DataError("empty training or validation split");
    double scale = input_scale(model.branch_config.input_profile);
    Rng aug_rng = Rng(cfg.seed).fork(rng_tag("aug"));

    auto build_views = [&](const std::vector<const std::array<Image, kNumViews>*>& cases,
                           bool do_augment) {
        std::array<nn::Tensor, kNumViews> views;
        for (int v = 0; v < kNumViews; ++v) {
            std::vector<Image> aug_storage;
            std::vector<const Image*> ptrs;
            for (const auto* c : cases) {
                if (do_augment) {
                    AugmentResult a = augment((*c)[v], {}, augmentation, aug_rng);
                    aug_storage.push_back(std::move(a.image));
                } else {
                    ptrs.push_back(&(*c)[v]);
                }
            }
            if (do_augment) {
                for (const Image& img : aug_storage) ptrs.push_back(&img);
            }
            views[v] = batch_tensor(ptrs, scale);
        }
        return views;
    };

    nn::TrainHooks hooks;
    hooks.run_batch = [&](const std::vector<int>& idx, Rng& rng) {
        std::vector<const std::array<Image, kNumViews>*> cases;
        std::vector<int> labels;
        for (int i : idx) {
            cases.push_back(&train.cases[i]);
            labels.push_back(train.labels[i]);
        }
        auto views = build_views(cases, true);
        auto out = model.forward(views, true, rng);
        nn::SoftmaxLoss loss = nn::softmax_cross_entropy(out.logits, labels);
        model.backward(loss.dlogits);
        return loss.loss;
    };
    hooks.evaluate = [&](const std::vector<int>& idx) {
        Rng rng(0);
        double loss_sum = 0.0;
        std::vector<double> scores;
        std::vector<int> labels;
        constexpr int kChunk = 16;
        for (std::size_t start = 0; start < idx.size(); start += kChunk) {
            std::vector<const std::array<Image, kNumViews>*> cases;
            std::vector<int> chunk_labels;
            for (std::size_t i = start; i < std::min(idx.size(), start + kChunk); ++i) {
                cases.push_back(&val.cases[idx[i]]);
                chunk_labels.push_back(val.labels[idx[i]]);
            }
            auto views = build_views(cases, false);
            auto out = model.forward(views, false, rng);
            nn::SoftmaxLoss loss = nn::softmax_cross_entropy(out.logits, chunk_labels);
            loss_sum += loss.loss * static_cast<double>(cases.size());
            for (std::size_t i = 0; i < cases.size(); ++i) {
                scores.push_back(loss.probs.v[i * 2 + 1]);
                labels.push_back(chunk_labels[i]);
            }
        }
        return std::make_pair(loss_sum / static_cast<double>(idx.size()),
                              evaluate_auc_or_half(scores, labels));
    };

    std::vector<int> val_idx(val.cases.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = static_cast<int>(i);
    return nn::train_classifier(cfg, static_cast<int>(train.cases.size()), train.labels, val_idx,
                                model.params(), hooks);
}

namespace {

double evaluate_auc_or_half(const std::vector<double>& scores, const std::vector<int>& labels) {
    bool has_pos = false, has_neg = false;
    for (int l : labels) (l == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) return 0.5;
    // Mann-Whitney on the raw pairs; small validation sets keep this cheap.
    double wins = 0.0;
    long long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] == 1) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

}  // namespace

DensityPrediction predict_density(DensityPatientModel& model,
                                  const std::array<Image, kNumViews>& prepared_views) {
    Rng rng(0);
    double scale = input_scale(model.branch_config.input_profile);
    std::array<nn::Tensor, kNumViews> views;
    for (int v = 0; v < kNumViews; ++v) views[v] = batch_tensor({&prepared_views[v]}, scale);
    auto out = model.forward(views, false, rng);
    nn::SoftmaxLoss sm = nn::softmax_cross_entropy(out.logits, {0});
    DensityPrediction pred;
    pred.p_dense = sm.probs.v[1];
    pred.feature = out.features.v;
    return pred;
}

double predict_density_view(DensityViewModel& model, const Image& prepared_view) {
    Rng rng(0);
    double scale = input_scale(model.backbone.config().input_profile);
    auto out = model.forward(batch_tensor({&prepared_view}, scale), false, rng);
    nn::SoftmaxLoss sm = nn::softmax_cross_entropy(out.logits, {0});
    return sm.probs.v[1];
}

FindingsPrediction predict_findings(FindingsModel& model, const Image& prepared_view) {
    Rng rng(0);
    auto out = model.forward(batch_tensor({&prepared_view}, 1.0), false, rng);
    nn::SoftmaxLoss sm = nn::softmax_cross_entropy(out.logits, {0});
    FindingsPrediction pred;
    pred.p_findings = sm.probs.v[1];
    pred.feature = out.features.v;
    return pred;
}

}  // namespace mf

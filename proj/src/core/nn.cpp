#include "core/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "core/errors.hpp"

namespace mf::nn {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatrixRM>;
using MapC = Eigen::Map<const MatrixRM>;

double he_scale(int fan_in) { return std::sqrt(2.0 / std::max(1, fan_in)); }

namespace {

void he_init(Tensor& w, int fan_in, Rng& rng) {
    double s = he_scale(fan_in);
    for (double& x : w.v) x = rng.normal() * s;
}

inline int conv_out(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// (C, H, W) plane -> columns (C*k*k, out_h*out_w)
void im2col(const double* x, int ch, int h, int w, int kernel, int stride, int pad, int oh, int ow,
            double* cols) {
    for (int c = 0; c < ch; ++c) {
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                double* row = cols + (static_cast<std::size_t>((c * kernel + ky) * kernel + kx)) *
                                         (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = 0.0;
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[oy * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* cols, int ch, int h, int w, int kernel, int stride, int pad, int oh,
                  int ow, double* dx) {
    for (int c = 0; c < ch; ++c) {
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const double* row = cols + (static_cast<std::size_t>((c * kernel + ky) * kernel + kx)) *
                                               (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = dx + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2D

Conv2D::Conv2D(int in_ch_, int out_ch_, int kernel_, int stride_, int pad_, Rng& init_rng)
    : weight({out_ch_, in_ch_, kernel_, kernel_}),
      bias({out_ch_}),
      grad_weight({out_ch_, in_ch_, kernel_, kernel_}),
      grad_bias({out_ch_}),
      in_ch(in_ch_),
      out_ch(out_ch_),
      kernel(kernel_),
      stride(stride_),
      pad(pad_) {
    he_init(weight, in_ch * kernel * kernel, init_rng);
}

Tensor Conv2D::forward(const Tensor& x, bool, Rng&) {
    input_ = x;
    int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    out_h_ = conv_out(h, kernel, stride, pad);
    out_w_ = conv_out(w, kernel, stride, pad);
    Tensor y({n, out_ch, out_h_, out_w_});

    int patch = in_ch * kernel * kernel;
    std::size_t plane = static_cast<std::size_t>(out_h_) * out_w_;
    std::vector<double> cols(static_cast<std::size_t>(patch) * plane);
    MapC wmat(weight.data(), out_ch, patch);
    for (int i = 0; i < n; ++i) {
        im2col(x.data() + static_cast<std::size_t>(i) * in_ch * h * w, in_ch, h, w, kernel, stride,
               pad, out_h_, out_w_, cols.data());
        MapC cmat(cols.data(), patch, static_cast<Eigen::Index>(plane));
        MapM ymat(y.data() + static_cast<std::size_t>(i) * out_ch * plane, out_ch,
                  static_cast<Eigen::Index>(plane));
        ymat.noalias() = wmat * cmat;
        for (int c = 0; c < out_ch; ++c) ymat.row(c).array() += bias.v[c];
    }
    return y;
}

Tensor Conv2D::backward(const Tensor& dy) {
    const Tensor& x = input_;
    int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor dx(x.shape);

    int patch = in_ch * kernel * kernel;
    std::size_t plane = static_cast<std::size_t>(out_h_) * out_w_;
    std::vector<double> cols(static_cast<std::size_t>(patch) * plane);
    std::vector<double> dcols(cols.size());
    MapC wmat(weight.data(), out_ch, patch);
    MapM gw(grad_weight.data(), out_ch, patch);
    for (int i = 0; i < n; ++i) {
        im2col(x.data() + static_cast<std::size_t>(i) * in_ch * h * w, in_ch, h, w, kernel, stride,
               pad, out_h_, out_w_, cols.data());
        MapC cmat(cols.data(), patch, static_cast<Eigen::Index>(plane));
        MapC gy(dy.data() + static_cast<std::size_t>(i) * out_ch * plane, out_ch,
                static_cast<Eigen::Index>(plane));
        gw.noalias() += gy * cmat.transpose();
        for (int c = 0; c < out_ch; ++c) grad_bias.v[c] += gy.row(c).sum();
        MapM dc(dcols.data(), patch, static_cast<Eigen::Index>(plane));
        dc.noalias() = wmat.transpose() * gy;
        col2im_accum(dcols.data(), in_ch, h, w, kernel, stride, pad, out_h_, out_w_,
                     dx.data() + static_cast<std::size_t>(i) * in_ch * h * w);
    }
    return dx;
}

void Conv2D::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".weight", &weight, &grad_weight});
    out.push_back({prefix + ".bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------------------
// DepthwiseConv2D

DepthwiseConv2D::DepthwiseConv2D(int channels_, int kernel_, int stride_, int pad_, Rng& init_rng)
    : weight({channels_, kernel_, kernel_}),
      bias({channels_}),
      grad_weight({channels_, kernel_, kernel_}),
      grad_bias({channels_}),
      channels(channels_),
      kernel(kernel_),
      stride(stride_),
      pad(pad_) {
    he_init(weight, kernel * kernel, init_rng);
}

Tensor DepthwiseConv2D::forward(const Tensor& x, bool, Rng&) {
    input_ = x;
    int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    out_h_ = conv_out(h, kernel, stride, pad);
    out_w_ = conv_out(w, kernel, stride, pad);
    Tensor y({n, channels, out_h_, out_w_});
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < channels; ++c) {
            const double* src = x.data() + (static_cast<std::size_t>(i) * channels + c) * h * w;
            const double* ker = weight.data() + static_cast<std::size_t>(c) * kernel * kernel;
            double* dst = y.data() + (static_cast<std::size_t>(i) * channels + c) * out_h_ * out_w_;
            for (int oy = 0; oy < out_h_; ++oy) {
                for (int ox = 0; ox < out_w_; ++ox) {
                    double acc = bias.v[c];
                    for (int ky = 0; ky < kernel; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kernel; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            acc += ker[ky * kernel + kx] * src[iy * w + ix];
                        }
                    }
                    dst[oy * out_w_ + ox] = acc;
                }
            }
        }
    }
    return y;
}

Tensor DepthwiseConv2D::backward(const Tensor& dy) {
    const Tensor& x = input_;
    int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor dx(x.shape);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < channels; ++c) {
            const double* src = x.data() + (static_cast<std::size_t>(i) * channels + c) * h * w;
            const double* gy = dy.data() + (static_cast<std::size_t>(i) * channels + c) * out_h_ * out_w_;
            const double* ker = weight.data() + static_cast<std::size_t>(c) * kernel * kernel;
            double* gker = grad_weight.data() + static_cast<std::size_t>(c) * kernel * kernel;
            double* gx = dx.data() + (static_cast<std::size_t>(i) * channels + c) * h * w;
            double gb = 0.0;
            for (int oy = 0; oy < out_h_; ++oy) {
                for (int ox = 0; ox < out_w_; ++ox) {
                    double g = gy[oy * out_w_ + ox];
                    gb += g;
                    for (int ky = 0; ky < kernel; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kernel; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            gker[ky * kernel + kx] += g * src[iy * w + ix];
                            gx[iy * w + ix] += g * ker[ky * kernel + kx];
                        }
                    }
                }
            }
            grad_bias.v[c] += gb;
        }
    }
    return dx;
}

void DepthwiseConv2D::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".weight", &weight, &grad_weight});
    out.push_back({prefix + ".bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------------------
// Dense

Dense::Dense(int in_dim_, int out_dim_, Rng& init_rng)
    : weight({out_dim_, in_dim_}),
      bias({out_dim_}),
      grad_weight({out_dim_, in_dim_}),
      grad_bias({out_dim_}),
      in_dim(in_dim_),
      out_dim(out_dim_) {
    he_init(weight, in_dim, init_rng);
}

Tensor Dense::forward(const Tensor& x, bool, Rng&) {
    input_ = x;
    int n = x.dim(0);
    Tensor y({n, out_dim});
    MapC xm(x.data(), n, in_dim);
    MapC wm(weight.data(), out_dim, in_dim);
    MapM ym(y.data(), n, out_dim);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_dim; ++o) y.v[static_cast<std::size_t>(i) * out_dim + o] += bias.v[o];
    }
    return y;
}

Tensor Dense::backward(const Tensor& dy) {
    int n = input_.dim(0);
    Tensor dx(input_.shape);
    MapC xm(input_.data(), n, in_dim);
    MapC gy(dy.data(), n, out_dim);
    MapM gw(grad_weight.data(), out_dim, in_dim);
    MapM dxm(dx.data(), n, in_dim);
    MapC wm(weight.data(), out_dim, in_dim);
    gw.noalias() += gy.transpose() * xm;
    for (int o = 0; o < out_dim; ++o) grad_bias.v[o] += gy.col(o).sum();
    dxm.noalias() = gy * wm;
    return dx;
}

void Dense::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".weight", &weight, &grad_weight});
    out.push_back({prefix + ".bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------------------
// ReLU / GAP / Dropout

Tensor ReLU::forward(const Tensor& x, bool, Rng&) {
    Tensor y = x;
    active_.assign(x.size(), false);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.v[i] > 0) active_[i] = true;
        else y.v[i] = 0.0;
    }
    return y;
}

Tensor ReLU::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        if (!active_[i]) dx.v[i] = 0.0;
    }
    return dx;
}

Tensor GlobalAvgPool2D::forward(const Tensor& x, bool, Rng&) {
    in_shape_ = x.shape;
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y({n, c});
    double inv = 1.0 / (static_cast<double>(h) * w);
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const double* src = x.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
            double acc = 0.0;
            for (int p = 0; p < h * w; ++p) acc += src[p];
            y.v[static_cast<std::size_t>(i) * c + ch] = acc * inv;
        }
    }
    return y;
}

Tensor GlobalAvgPool2D::backward(const Tensor& dy) {
    Tensor dx(in_shape_);
    int n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
    double inv = 1.0 / (static_cast<double>(h) * w);
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            double g = dy.v[static_cast<std::size_t>(i) * c + ch] * inv;
            double* dst = dx.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
            for (int p = 0; p < h * w; ++p) dst[p] = g;
        }
    }
    return dx;
}

Tensor Dropout::forward(const Tensor& x, bool train, Rng& rng) {
    train_pass_ = train && rate_ > 0.0;
    if (!train_pass_) return x;
    Tensor y = x;
    mask_.assign(x.size(), 0.0);
    double keep = 1.0 - rate_;
    double scale = 1.0 / keep;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (rng.uniform() < keep) {
            mask_[i] = scale;
            y.v[i] = x.v[i] * scale;
        } else {
            y.v[i] = 0.0;
        }
    }
    return y;
}

Tensor Dropout::backward(const Tensor& dy) {
    if (!train_pass_) return dy;
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] *= mask_[i];
    return dx;
}

// ---------------------------------------------------------------------------
// Conv1D / MaxPool1D

Conv1D::Conv1D(int in_ch_, int out_ch_, int kernel_, int pad_, Rng& init_rng)
    : weight({out_ch_, in_ch_, kernel_}),
      bias({out_ch_}),
      grad_weight({out_ch_, in_ch_, kernel_}),
      grad_bias({out_ch_}),
      in_ch(in_ch_),
      out_ch(out_ch_),
      kernel(kernel_),
      pad(pad_) {
    he_init(weight, in_ch * kernel, init_rng);
}

Tensor Conv1D::forward(const Tensor& x, bool, Rng&) {
    input_ = x;
    int n = x.dim(0), len = x.dim(2);
    out_len_ = len + 2 * pad - kernel + 1;
    Tensor y({n, out_ch, out_len_});
    for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_ch; ++o) {
            double* dst = y.data() + (static_cast<std::size_t>(i) * out_ch + o) * out_len_;
            for (int p = 0; p < out_len_; ++p) dst[p] = bias.v[o];
            for (int c = 0; c < in_ch; ++c) {
                const double* src = x.data() + (static_cast<std::size_t>(i) * in_ch + c) * len;
                const double* ker = weight.data() + (static_cast<std::size_t>(o) * in_ch + c) * kernel;
                for (int p = 0; p < out_len_; ++p) {
                    double acc = 0.0;
                    for (int k = 0; k < kernel; ++k) {
                        int ix = p - pad + k;
                        if (ix >= 0 && ix < len) acc += ker[k] * src[ix];
                    }
                    dst[p] += acc;
                }
            }
        }
    }
    return y;
}

Tensor Conv1D::backward(const Tensor& dy) {
    int n = input_.dim(0), len = input_.dim(2);
    Tensor dx(input_.shape);
    for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_ch; ++o) {
            const double* gy = dy.data() + (static_cast<std::size_t>(i) * out_ch + o) * out_len_;
            for (int p = 0; p < out_len_; ++p) grad_bias.v[o] += gy[p];
            for (int c = 0; c < in_ch; ++c) {
                const double* src = input_.data() + (static_cast<std::size_t>(i) * in_ch + c) * len;
                const double* ker = weight.data() + (static_cast<std::size_t>(o) * in_ch + c) * kernel;
                double* gker = grad_weight.data() + (static_cast<std::size_t>(o) * in_ch + c) * kernel;
                double* gx = dx.data() + (static_cast<std::size_t>(i) * in_ch + c) * len;
                for (int p = 0; p < out_len_; ++p) {
                    double g = gy[p];
                    for (int k = 0; k < kernel; ++k) {
                        int ix = p - pad + k;
                        if (ix >= 0 && ix < len) {
                            gker[k] += g * src[ix];
                            gx[ix] += g * ker[k];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

void Conv1D::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".weight", &weight, &grad_weight});
    out.push_back({prefix + ".bias", &bias, &grad_bias});
}

Tensor MaxPool1D::forward(const Tensor& x, bool, Rng&) {
    in_shape_ = x.shape;
    int n = x.dim(0), c = x.dim(1), len = x.dim(2);
    int out_len = len / 2;
    Tensor y({n, c, out_len});
    argmax_.assign(y.size(), 0);
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const double* src = x.data() + (static_cast<std::size_t>(i) * c + ch) * len;
            double* dst = y.data() + (static_cast<std::size_t>(i) * c + ch) * out_len;
            int* am = argmax_.data() + (static_cast<std::size_t>(i) * c + ch) * out_len;
            for (int p = 0; p < out_len; ++p) {
                int a = 2 * p, b = 2 * p + 1;
                if (src[a] >= src[b]) {
                    dst[p] = src[a];
                    am[p] = a;
                } else {
                    dst[p] = src[b];
                    am[p] = b;
                }
            }
        }
    }
    return y;
}

Tensor MaxPool1D::backward(const Tensor& dy) {
    Tensor dx(in_shape_);
    int n = in_shape_[0], c = in_shape_[1], len = in_shape_[2];
    int out_len = len / 2;
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const double* gy = dy.data() + (static_cast<std::size_t>(i) * c + ch) * out_len;
            const int* am = argmax_.data() + (static_cast<std::size_t>(i) * c + ch) * out_len;
            double* gx = dx.data() + (static_cast<std::size_t>(i) * c + ch) * len;
            for (int p = 0; p < out_len; ++p) gx[am[p]] += gy[p];
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Sequential

Tensor Sequential::forward(const Tensor& x, bool train, Rng& rng) {
    Tensor cur = x;
    for (auto& layer : layers_) cur = layer->forward(cur, train, rng);
    return cur;
}

Tensor Sequential::backward(const Tensor& dy) {
    Tensor cur = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
}

void Sequential::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i]->collect_params(prefix + "." + std::to_string(i), out);
    }
}

// ---------------------------------------------------------------------------
// Losses

SoftmaxLoss softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) throw DataError("label count mismatch");
    SoftmaxLoss out;
    out.probs = Tensor({n, k});
    out.dlogits = Tensor({n, k});
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* z = logits.data() + static_cast<std::size_t>(i) * k;
        double* p = out.probs.data() + static_cast<std::size_t>(i) * k;
        double zmax = z[0];
        for (int j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
        double denom = 0.0;
        for (int j = 0; j < k; ++j) {
            p[j] = std::exp(z[j] - zmax);
            denom += p[j];
        }
        for (int j = 0; j < k; ++j) p[j] /= denom;
        total += -std::log(std::max(p[labels[i]], 1e-300));
        double* g = out.dlogits.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) g[j] = (p[j] - (j == labels[i] ? 1.0 : 0.0)) / n;
    }
    out.loss = total / n;
    return out;
}

double smooth_l1(const Tensor& pred, const Tensor& target, Tensor& grad, double normalizer) {
    grad = Tensor(pred.shape);
    double loss = 0.0;
    double inv = 1.0 / std::max(1.0, normalizer);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred.v[i] - target.v[i];
        double ad = std::fabs(d);
        if (ad < 1.0) {
            loss += 0.5 * d * d;
            grad.v[i] = d * inv;
        } else {
            loss += ad - 0.5;
            grad.v[i] = (d > 0 ? 1.0 : -1.0) * inv;
        }
    }
    return loss * inv;
}

// ---------------------------------------------------------------------------
// Optimizers

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    learning_rate = lr;
}

void Adam::step(std::vector<ParamRef>& params) {
    if (m_.size() != params.size()) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.emplace_back(p.value->size(), 0.0);
            v_.emplace_back(p.value->size(), 0.0);
        }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
        double* w = params[p].value->data();
        const double* g = params[p].grad->data();
        double* m = m_[p].data();
        double* v = v_[p].data();
        std::size_t n = params[p].value->size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            double mh = m[i] / bc1;
            double vh = v[i] / bc2;
            w[i] -= learning_rate * mh / (std::sqrt(vh) + eps_);
        }
    }
}

MomentumSgd::MomentumSgd(double lr, double momentum) : momentum_(momentum) {
    learning_rate = lr;
}

void MomentumSgd::step(std::vector<ParamRef>& params) {
    if (velocity_.size() != params.size()) {
        velocity_.clear();
        for (const auto& p : params) velocity_.emplace_back(p.value->size(), 0.0);
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        double* w = params[p].value->data();
        const double* g = params[p].grad->data();
        double* v = velocity_[p].data();
        std::size_t n = params[p].value->size();
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = momentum_ * v[i] - learning_rate * g[i];
            w[i] += v[i];
        }
    }
}

void zero_grads(std::vector<ParamRef>& params) {
    for (auto& p : params) std::fill(p.grad->v.begin(), p.grad->v.end(), 0.0);
}

void WeightAverager::accumulate(const std::vector<ParamRef>& params) {
    if (avg_.empty()) {
        for (const auto& p : params) avg_.emplace_back(p.value->v);
        count_ = 1;
        return;
    }
    double m = static_cast<double>(count_);
    for (std::size_t p = 0; p < params.size(); ++p) {
        const double* w = params[p].value->data();
        double* a = avg_[p].data();
        for (std::size_t i = 0; i < avg_[p].size(); ++i) a[i] = (a[i] * m + w[i]) / (m + 1.0);
    }
    ++count_;
}

bool WeightAverager::apply(std::vector<ParamRef>& params) const {
    if (count_ == 0) return false;
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::copy(avg_[p].begin(), avg_[p].end(), params[p].value->v.begin());
    }
    return true;
}

std::vector<double> snapshot_params(const std::vector<ParamRef>& params) {
    std::vector<double> out;
    for (const auto& p : params) out.insert(out.end(), p.value->v.begin(), p.value->v.end());
    return out;
}

void restore_params(std::vector<ParamRef>& params, const std::vector<double>& snapshot) {
    std::size_t cursor = 0;
    for (auto& p : params) {
        std::copy(snapshot.begin() + cursor, snapshot.begin() + cursor + p.value->size(),
                  p.value->v.begin());
        cursor += p.value->size();
    }
}

// ---------------------------------------------------------------------------
// Batching and the shared training loop

std::vector<std::vector<int>> make_batches(int count, const std::vector<int>& labels, int batch_size,
                                           bool stratified, Rng& rng) {
    std::vector<std::vector<int>> batches;
    if (!stratified) {
        std::vector<int> order(count);
        for (int i = 0; i < count; ++i) order[i] = i;
        rng.shuffle(order);
        for (int start = 0; start < count; start += batch_size) {
            int end = std::min(count, start + batch_size);
            batches.emplace_back(order.begin() + start, order.begin() + end);
        }
        return batches;
    }

    // Class queues drawn round-robin; exhausted queues reshuffle and restart,
    // so minority classes are oversampled and every full batch sees each class.
    std::vector<std::vector<int>> queues(2);
    for (int i = 0; i < count; ++i) queues[labels[i] == 1 ? 1 : 0].push_back(i);
    if (queues[0].empty() || queues[1].empty()) {
        return make_batches(count, labels, batch_size, false, rng);
    }
    rng.shuffle(queues[0]);
    rng.shuffle(queues[1]);
    std::array<std::size_t, 2> cursor = {0, 0};
    auto draw = [&](int q) {
        if (cursor[q] >= queues[q].size()) {
            rng.shuffle(queues[q]);
            cursor[q] = 0;
        }
        return queues[q][cursor[q]++];
    };
    int n_batches = (count + batch_size - 1) / batch_size;
    int produced = 0;
    for (int b = 0; b < n_batches; ++b) {
        int size = std::min(batch_size, count - produced);
        produced += size;
        std::vector<int> batch;
        for (int i = 0; i < size; ++i) batch.push_back(draw(i % 2));
        batches.push_back(std::move(batch));
    }
    return batches;
}

namespace {

struct Monitor {
    EarlyStopMonitor kind;
    double best = 0.0;
    bool has_best = false;

    double value(const EpochStats& s) const {
        return kind == EarlyStopMonitor::validation_auc ? s.val_auc : s.val_loss;
    }
    // True when `candidate` improves on `best` by more than tolerance.
    bool improves(double candidate, double tolerance) const {
        if (!has_best) return true;
        if (kind == EarlyStopMonitor::validation_auc) return candidate > best + tolerance;
        return candidate < best - tolerance;
    }
};

}  // namespace

TrainLog train_classifier(const TrainConfig& cfg, int train_count, const std::vector<int>& train_labels,
                          const std::vector<int>& val_indices, std::vector<ParamRef> params,
                          const TrainHooks& hooks) {
    if (train_count <= 0) throw DataError("training split is empty");
    TrainLog log;
    Rng rng = Rng(cfg.seed);
    Rng batch_rng = rng.fork(rng_tag("batches"));
    Rng model_rng = rng.fork(rng_tag("dropout"));

    std::unique_ptr<Optimizer> opt;
    if (cfg.optimizer == OptimizerKind::adaptive_moment) opt = std::make_unique<Adam>(cfg.learning_rate);
    else opt = std::make_unique<MomentumSgd>(cfg.learning_rate);

    WeightAverager swa;
    Monitor monitor{cfg.early_stop, 0.0, false};
    std::vector<double> best_snapshot;
    int since_best = 0;
    double plateau_best = 0.0;
    bool plateau_has_best = false;
    int plateau_since = 0;

    auto run_epochs = [&](int epochs, int epoch_offset, bool allow_early_stop) {
        for (int e = 0; e < epochs; ++e) {
            int epoch = epoch_offset + e + 1;
            auto batches = make_batches(train_count, train_labels, cfg.batch_size,
                                        cfg.stratified_batches, batch_rng);
            double loss_sum = 0.0;
            std::size_t batch_count = 0;
            for (const auto& batch : batches) {
                zero_grads(params);
                double loss = hooks.run_batch(batch, model_rng);
                if (!std::isfinite(loss)) {
                    throw DataError("non-finite training loss at epoch " + std::to_string(epoch));
                }
                opt->step(params);
                loss_sum += loss;
                ++batch_count;
            }

            EpochStats stats;
            stats.epoch = epoch;
            stats.train_loss = batch_count ? loss_sum / static_cast<double>(batch_count) : 0.0;
            stats.learning_rate = opt->learning_rate;
            if (!val_indices.empty()) {
                auto [vl, va] = hooks.evaluate(val_indices);
                stats.val_loss = vl;
                stats.val_auc = va;
            }
            log.epochs.push_back(stats);

            if (cfg.swa_start_epoch > 0 && epoch >= cfg.swa_start_epoch) {
                swa.accumulate(params);
            }

            if (cfg.plateau_factor > 0.0 && !val_indices.empty()) {
                if (!plateau_has_best || stats.val_loss < plateau_best - 1e-12) {
                    plateau_best = stats.val_loss;
                    plateau_has_best = true;
                    plateau_since = 0;
                } else if (++plateau_since >= cfg.plateau_patience) {
                    opt->learning_rate *= cfg.plateau_factor;
                    plateau_since = 0;
                }
            }

            if (cfg.early_stop != EarlyStopMonitor::none && !val_indices.empty()) {
                double candidate = monitor.value(stats);
                if (monitor.improves(candidate, cfg.early_stop_tolerance)) {
                    monitor.best = candidate;
                    monitor.has_best = true;
                    best_snapshot = snapshot_params(params);
                    since_best = 0;
                } else if (allow_early_stop && ++since_best >= cfg.early_stop_patience) {
                    log.early_stopped = true;
                    return;
                }
            }
        }
    };

    run_epochs(cfg.epochs, 0, true);

    // Weight averaging wins over best-epoch restore when both are configured.
    if (cfg.swa_start_epoch > 0 && swa.apply(params)) {
        log.swa_applied = true;
    } else if (cfg.early_stop != EarlyStopMonitor::none && !best_snapshot.empty()) {
        restore_params(params, best_snapshot);
    }

    if (cfg.fine_tune_epochs > 0 && cfg.fine_tune_learning_rate > 0.0) {
        if (cfg.optimizer == OptimizerKind::adaptive_moment) {
            opt = std::make_unique<Adam>(cfg.fine_tune_learning_rate);
        } else {
            opt = std::make_unique<MomentumSgd>(cfg.fine_tune_learning_rate);
        }
        monitor.has_best = false;
        best_snapshot.clear();
        since_best = 0;
        run_epochs(cfg.fine_tune_epochs, static_cast<int>(log.epochs.size()), true);
        log.fine_tune_epochs_run = cfg.fine_tune_epochs;
        if (cfg.early_stop != EarlyStopMonitor::none && !best_snapshot.empty()) {
            restore_params(params, best_snapshot);
        }
    }
    return log;
}

}  // namespace mf::nn

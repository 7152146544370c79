#include "core/svm.hpp"

#include <algorithm>
#include <cmath>

#include "core/errors.hpp"
#include "core/rng.hpp"

namespace mf {

namespace {

double rbf(const std::vector<double>& a, const std::vector<double>& b, double gamma) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        d2 += d * d;
    }
    return std::exp(-gamma * d2);
}

// Platt scaling: fits sigma(A*f + B) to the labels by Newton iterations on
// the regularized log-likelihood (Lin, Lin & Weng's formulation).
void fit_platt(const std::vector<double>& decisions, const std::vector<int>& labels, double& a,
               double& b) {
    std::size_t n = decisions.size();
    double prior1 = 0.0;
    for (int y : labels) prior1 += (y == 1);
    double prior0 = static_cast<double>(n) - prior1;
    double hi_t = (prior1 + 1.0) / (prior1 + 2.0);
    double lo_t = 1.0 / (prior0 + 2.0);

    a = 0.0;
    b = std::log((prior0 + 1.0) / (prior1 + 1.0));
    double fval = 0.0;
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = labels[i] == 1 ? hi_t : lo_t;
        double z = a * decisions[i] + b;
        if (z >= 0) fval += t[i] * z + std::log1p(std::exp(-z));
        else fval += (t[i] - 1.0) * z + std::log1p(std::exp(z));
    }

    constexpr int kMaxIter = 100;
    constexpr double kMinStep = 1e-10, kSigma = 1e-12, kEps = 1e-5;
    for (int iter = 0; iter < kMaxIter; ++iter) {
        double h11 = kSigma, h22 = kSigma, h21 = 0.0, g1 = 0.0, g2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z = a * decisions[i] + b;
            double p, q;
            if (z >= 0) {
                double e = std::exp(-z);
                p = e / (1.0 + e);
                q = 1.0 / (1.0 + e);
            } else {
                double e = std::exp(z);
                p = 1.0 / (1.0 + e);
                q = e / (1.0 + e);
            }
            double d2 = p * q;
            h11 += decisions[i] * decisions[i] * d2;
            h22 += d2;
            h21 += decisions[i] * d2;
            double d1 = t[i] - p;
            g1 += decisions[i] * d1;
            g2 += d1;
        }
        if (std::fabs(g1) < kEps && std::fabs(g2) < kEps) break;

        double det = h11 * h22 - h21 * h21;
        double da = -(h22 * g1 - h21 * g2) / det;
        double db = -(-h21 * g1 + h11 * g2) / det;
        double gd = g1 * da + g2 * db;
        double step = 1.0;
        bool moved = false;
        while (step >= kMinStep) {
            double na = a + step * da, nb = b + step * db;
            double nf = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double z = na * decisions[i] + nb;
                if (z >= 0) nf += t[i] * z + std::log1p(std::exp(-z));
                else nf += (t[i] - 1.0) * z + std::log1p(std::exp(z));
            }
            if (nf < fval + 1e-4 * step * gd) {
                a = na;
                b = nb;
                fval = nf;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break;
    }
}

}  // namespace

void SvmRbf::fit(const std::vector<std::vector<double>>& x, const std::vector<int>& labels,
                 const Options& options) {
    std::size_t n = x.size();
    if (n < 2) throw DataError("SVM training needs at least 2 samples");
    std::size_t dim = x[0].size();

    bool has_pos = false, has_neg = false;
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = labels[i] == 1 ? 1.0 : -1.0;
        (labels[i] == 1 ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) throw DataError("SVM training needs both classes");

    gamma_ = options.gamma;
    if (gamma_ <= 0) {
        double mean = 0.0, sq = 0.0;
        std::size_t count = 0;
        for (const auto& row : x) {
            for (double v : row) {
                mean += v;
                sq += v * v;
                ++count;
            }
        }
        mean /= static_cast<double>(count);
        double var = sq / static_cast<double>(count) - mean * mean;
        gamma_ = 1.0 / (static_cast<double>(dim) * std::max(var, 1e-12));
    }

    // Precomputed kernel matrix; fusion-scale problems are small.
    std::vector<std::vector<double>> K(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            K[i][j] = K[j][i] = rbf(x[i], x[j], gamma_);
        }
    }

    std::vector<double> alpha(n, 0.0);
    double b = 0.0;
    auto f = [&](std::size_t i) {
        double s = b;
        for (std::size_t j = 0; j < n; ++j) {
            if (alpha[j] != 0.0) s += alpha[j] * y[j] * K[i][j];
        }
        return s;
    };

    Rng rng(options.seed ^ 0x53564d);
    const double C = options.C, tol = options.tolerance;
    int passes = 0, iterations = 0;
    while (passes < options.max_passes && iterations < options.max_iterations) {
        int changed = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ++iterations;
            double Ei = f(i) - y[i];
            if ((y[i] * Ei < -tol && alpha[i] < C) || (y[i] * Ei > tol && alpha[i] > 0)) {
                std::size_t j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n - 1)));
                if (j >= i) ++j;
                double Ej = f(j) - y[j];
                double ai_old = alpha[i], aj_old = alpha[j];
                double lo, hi;
                if (y[i] != y[j]) {
                    lo = std::max(0.0, aj_old - ai_old);
                    hi = std::min(C, C + aj_old - ai_old);
                } else {
                    lo = std::max(0.0, ai_old + aj_old - C);
                    hi = std::min(C, ai_old + aj_old);
                }
                if (lo >= hi) continue;
                double eta = 2.0 * K[i][j] - K[i][i] - K[j][j];
                if (eta >= 0) continue;
                double aj = aj_old - y[j] * (Ei - Ej) / eta;
                aj = std::clamp(aj, lo, hi);
                if (std::fabs(aj - aj_old) < 1e-5) continue;
                double ai = ai_old + y[i] * y[j] * (aj_old - aj);
                double b1 = b - Ei - y[i] * (ai - ai_old) * K[i][i] - y[j] * (aj - aj_old) * K[i][j];
                double b2 = b - Ej - y[i] * (ai - ai_old) * K[i][j] - y[j] * (aj - aj_old) * K[j][j];
                alpha[i] = ai;
                alpha[j] = aj;
                if (ai > 0 && ai < C) b = b1;
                else if (aj > 0 && aj < C) b = b2;
                else b = 0.5 * (b1 + b2);
                ++changed;
            }
        }
        passes = changed == 0 ? passes + 1 : 0;
    }

    support_vectors_.clear();
    coefficients_.clear();
    for (std::size_t i = 0; i < n; ++i) {
        if (alpha[i] > 1e-12) {
            support_vectors_.push_back(x[i]);
            coefficients_.push_back(alpha[i] * y[i]);
        }
    }
    bias_ = b;
    if (support_vectors_.empty()) {
        // Degenerate fit: keep a single vector so decision() stays defined.
        support_vectors_.push_back(x[0]);
        coefficients_.push_back(0.0);
    }

    std::vector<double> decisions(n);
    for (std::size_t i = 0; i < n; ++i) decisions[i] = decision(x[i]);
    fit_platt(decisions, labels, platt_a_, platt_b_);
}

double SvmRbf::decision(const std::vector<double>& x) const {
    double s = bias_;
    for (std::size_t i = 0; i < support_vectors_.size(); ++i) {
        s += coefficients_[i] * rbf(support_vectors_[i], x, gamma_);
    }
    return s;
}

double SvmRbf::predict_probability(const std::vector<double>& x) const {
    double z = platt_a_ * decision(x) + platt_b_;
    if (z >= 0) {
        double e = std::exp(-z);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(z));
}

std::vector<double> SvmRbf::pack() const {
    std::vector<double> blob;
    std::size_t n = support_vectors_.size();
    std::size_t dim = support_vectors_.empty() ? 0 : support_vectors_[0].size();
    blob.push_back(static_cast<double>(n));
    blob.push_back(static_cast<double>(dim));
    blob.push_back(bias_);
    blob.push_back(gamma_);
    blob.push_back(platt_a_);
    blob.push_back(platt_b_);
    for (std::size_t i = 0; i < n; ++i) {
        blob.push_back(coefficients_[i]);
        blob.insert(blob.end(), support_vectors_[i].begin(), support_vectors_[i].end());
    }
    return blob;
}

SvmRbf SvmRbf::unpack(const std::vector<double>& blob) {
    if (blob.size() < 6) throw DataError("malformed SVM blob");
    SvmRbf svm;
    auto n = static_cast<std::size_t>(blob[0]);
    auto dim = static_cast<std::size_t>(blob[1]);
    svm.bias_ = blob[2];
    svm.gamma_ = blob[3];
    svm.platt_a_ = blob[4];
    svm.platt_b_ = blob[5];
    std::size_t pos = 6;
    if (blob.size() != 6 + n * (dim + 1)) throw DataError("malformed SVM blob");
    for (std::size_t i = 0; i < n; ++i) {
        svm.coefficients_.push_back(blob[pos++]);
        svm.support_vectors_.emplace_back(blob.begin() + pos, blob.begin() + pos + dim);
        pos += dim;
    }
    return svm;
}

}  // namespace mf

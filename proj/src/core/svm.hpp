#pragma once

#include <cstdint>
#include <vector>

namespace mf {

// RBF-kernel support vector classifier trained with sequential minimal
// optimization, plus a logistic calibration of the decision values so that
// predictions come back as probabilities.
class SvmRbf {
public:
    struct Options {
        double C = 1.0;
        double gamma = -1.0;  // <= 0: 1 / (dim * variance)
        double tolerance = 1e-3;
        int max_passes = 10;
        int max_iterations = 20000;
        std::uint64_t seed = 0;
    };

    void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& labels,
             const Options& options);

    double decision(const std::vector<double>& x) const;
    double predict_probability(const std::vector<double>& x) const;

    bool trained() const { return !support_vectors_.empty(); }

    // Serialization as flat arrays (for checkpoint containers).
    std::vector<double> pack() const;
    static SvmRbf unpack(const std::vector<double>& blob);

private:
    std::vector<std::vector<double>> support_vectors_;
    std::vector<double> coefficients_;  // alpha_i * y_i
    double bias_ = 0.0;
    double gamma_ = 1.0;
    double platt_a_ = -1.0;
    double platt_b_ = 0.0;
};

}  // namespace mf

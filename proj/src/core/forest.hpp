#pragma once

#include <cstdint>
#include <vector>

namespace mf {

// Random forest classifier: Gini-split CART trees over bootstrap samples with
// sqrt(dim) feature subsampling. predict_probability returns the mean leaf
// positive fraction across trees.
class RandomForest {
public:
    struct Options {
        int n_trees = 10;
        int max_depth = 16;
        int min_samples_split = 2;
        std::uint64_t seed = 0;
    };

    void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& labels,
             const Options& options);
    double predict_probability(const std::vector<double>& x) const;
    bool trained() const { return !trees_.empty(); }

    std::vector<double> pack() const;
    static RandomForest unpack(const std::vector<double>& blob);

private:
    struct Node {
        int feature = -1;      // -1: leaf
        double threshold = 0;  // go left when x[feature] <= threshold
        int left = -1, right = -1;
        double positive_fraction = 0.0;
    };
    using Tree = std::vector<Node>;

    std::vector<Tree> trees_;
};

}  // namespace mf
